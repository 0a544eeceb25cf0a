"""Loader for the versioned profile/link catalog.

The shipped defaults live in ``data/profiles.yaml``; scenarios may point at
an alternative catalog or override individual entries inline.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Dict, Optional

import yaml

from .devices import (
    ActivityState,
    BatteryRates,
    PlatformProfile,
    SleepDynamics,
    StackingPolicy,
    derive_deep_sleep,
)
from .netmodel import AccessLink, LatencyDistribution, LinkTech

CATALOG_VERSION = 1


class CatalogError(ValueError):
    """Malformed catalog file or unknown entry."""


def parse_latency(spec) -> LatencyDistribution:
    """Parse a latency spec: number, {constant: x} or {mean, std, min, dist}."""
    if isinstance(spec, (int, float)):
        return LatencyDistribution.constant(float(spec))
    if not isinstance(spec, dict):
        raise CatalogError(f"latency spec must be a number or mapping, got {spec!r}")
    if "constant" in spec:
        return LatencyDistribution.constant(float(spec["constant"]))
    if "table" in spec:
        return LatencyDistribution.empirical(
            [float(v) for v in spec["table"]], min_ms=float(spec.get("min", 0.0))
        )
    mean = float(spec["mean"])
    std = float(spec.get("std", 0.0))
    min_ms = float(spec.get("min", 0.0))
    dist = spec.get("dist", "lognormal")
    if dist == "normal":
        return LatencyDistribution.normal(mean, std, min_ms=min_ms)
    if dist == "lognormal":
        return LatencyDistribution.lognormal(mean, std, min_ms=min_ms)
    if dist == "constant":
        return LatencyDistribution.constant(mean)
    raise CatalogError(f"unknown latency dist {dist!r}")


def parse_link(name: str, spec: dict) -> AccessLink:
    try:
        tech = LinkTech(spec.get("tech", name))
    except ValueError:
        raise CatalogError(f"link {name!r}: unknown tech {spec.get('tech')!r}")
    return AccessLink(
        tech=tech,
        up=parse_latency(spec["up"]),
        down=parse_latency(spec["down"]),
        jitter_scale=float(spec.get("jitter_scale", 1.0)),
        loss_probability=float(spec.get("loss_probability", 0.0)),
    )


def parse_profile(name: str, spec: dict) -> PlatformProfile:
    delays: Dict[ActivityState, LatencyDistribution] = {}
    for state_name, d in spec.get("delays", {}).items():
        try:
            state = ActivityState(state_name)
        except ValueError:
            raise CatalogError(f"profile {name!r}: unknown state {state_name!r}")
        delays[state] = parse_latency(d)
    if not delays:
        raise CatalogError(f"profile {name!r} has no delay table")
    # Phones that can sleep get a derived DeepSleep level unless one is given.
    if ActivityState.SCREEN_OFF in delays and ActivityState.DEEP_SLEEP not in delays:
        delays[ActivityState.DEEP_SLEEP] = derive_deep_sleep(delays[ActivityState.SCREEN_OFF])
    sleep_spec = spec.get("sleep", {})
    battery_spec = spec.get("battery", {})
    override = None
    if spec.get("stranger_delay_override"):
        override = {
            ActivityState(k): parse_latency(v)
            for k, v in spec["stranger_delay_override"].items()
        }
    return PlatformProfile(
        name=name,
        app=spec.get("app", "WhatsApp"),
        platform=spec.get("platform", "Android"),
        delay_by_state=delays,
        sleep=SleepDynamics(
            idle_threshold_s=float(sleep_spec.get("idle_threshold_s", 0.0)),
            probe_resets_idle=bool(sleep_spec.get("probe_resets_idle", False)),
        ),
        stacking=StackingPolicy(spec.get("stacking", "separate")),
        read_stacking=StackingPolicy(spec.get("read_stacking", "stacked")),
        transient_duration_s=float(spec.get("transient_duration_s", 30.0)),
        battery=BatteryRates(
            idle_pct_per_h=float(battery_spec.get("idle_pct_per_h", 0.9)),
            attack_pct_per_h=float(battery_spec.get("attack_pct_per_h", 15.0)),
            reference_bytes_per_s=float(
                battery_spec.get("reference_bytes_per_s", 3_700_000.0)
            ),
        ),
        stranger_delay_override=override,
    )


@dataclass
class Catalog:
    profiles: Dict[str, PlatformProfile]
    links: Dict[str, AccessLink]

    def profile(self, name: str) -> PlatformProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise CatalogError(f"unknown profile {name!r}; known: {sorted(self.profiles)}")

    def link(self, name: str) -> AccessLink:
        try:
            return self.links[name]
        except KeyError:
            raise CatalogError(f"unknown link {name!r}; known: {sorted(self.links)}")


def load_catalog(path: Optional[str] = None) -> Catalog:
    if path is None:
        text = resources.files("receiptsim.data").joinpath("profiles.yaml").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise CatalogError("catalog root must be a mapping")
    version = raw.get("version")
    if version != CATALOG_VERSION:
        raise CatalogError(f"unsupported catalog version {version!r}")
    profiles = {name: parse_profile(name, spec) for name, spec in raw.get("profiles", {}).items()}
    links = {name: parse_link(name, spec) for name, spec in raw.get("links", {}).items()}
    return Catalog(profiles=profiles, links=links)

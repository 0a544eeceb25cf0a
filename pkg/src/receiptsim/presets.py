"""Programmatic scenario builders used by the verification suite and handy
for quick experiments: state-classification runs per profile and access to
the bundled scenario files."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import List, Optional

from .catalog import Catalog, load_catalog
from .devices import ActivityState, ScriptEntry
from .prober import ProbeSchedule, SenderRateLimiter, default_limiter_for
from .protocol import ProbeKind
from .scenario import (
    AttackerSpec,
    AttackerType,
    DeviceSpec,
    Scenario,
    TopologySpec,
    VictimSpec,
)

#: States a classification scenario cycles through, preferring phone states.
_PHONE_CYCLE = (
    ActivityState.APP_FOREGROUND,
    ActivityState.SCREEN_ON,
    ActivityState.SCREEN_OFF,
)
_WEB_CYCLE = (ActivityState.TAB_ACTIVE, ActivityState.TAB_BACKGROUND)


def classification_states(profile) -> List[ActivityState]:
    cycle = [s for s in _PHONE_CYCLE if s in profile.delay_by_state]
    if len(cycle) >= 2:
        return cycle
    return [s for s in _WEB_CYCLE if s in profile.delay_by_state]


def classification_scenario(
    profile_name: str,
    seed: int,
    catalog: Optional[Catalog] = None,
    interval_ms: int = 20_000,
    duration_s: int = 7200,
    segment_s: int = 720,
    policy_name: str = "whatsapp_like",
) -> Scenario:
    """A seeded ground-truth run cycling a single device through its
    separable activity states in fixed-length segments.

    Segment boundaries land on the probe grid so the scripted timeline is
    an exact per-sample oracle.
    """
    catalog = catalog or load_catalog()
    profile = catalog.profile(profile_name)
    states = classification_states(profile)
    if len(states) < 2:
        raise ValueError(f"profile {profile_name} has fewer than two classifiable states")
    if segment_s % (interval_ms // 1000) != 0:
        raise ValueError("segment length must be a multiple of the probe interval")
    script: List[ScriptEntry] = []
    t = segment_s
    i = 1
    while t < duration_s:
        script.append(ScriptEntry(t_ms=t * 1000, op="state", arg=states[i % len(states)].value))
        t += segment_s
        i += 1
    return Scenario(
        name=f"classify-{profile_name}",
        seed=seed,
        policy_name=policy_name,
        duration_ms=duration_s * 1000,
        attacker=AttackerSpec(
            kind=AttackerType.SPOOKY_STRANGER,
            schedules=[
                ProbeSchedule(
                    kind=ProbeKind.INVALID_REF_REACTION,
                    interval_ms=interval_ms,
                    payload_bytes=8,
                    duration_s=duration_s,
                )
            ],
            limiter=default_limiter_for(policy_name),
        ),
        victim=VictimSpec(
            account="victim",
            devices=[
                DeviceSpec(
                    index=0,
                    profile_name=profile_name,
                    link_name="wifi",
                    script=script,
                    start_state=states[0],
                )
            ],
        ),
        topology=TopologySpec(attacker_pin="odn", victim_pin="odn"),
    )


def bundled_scenario_paths() -> List[Path]:
    root = resources.files("receiptsim.data").joinpath("scenarios")
    return sorted(Path(str(root)).glob("*.yaml"))


def load_bundled(name: str, catalog: Optional[Catalog] = None, seed_override=None):
    from .scenario import load_scenario

    catalog = catalog or load_catalog()
    for path in bundled_scenario_paths():
        if path.stem == name:
            return load_scenario(str(path), catalog, seed_override=seed_override)
    raise FileNotFoundError(f"no bundled scenario named {name!r}")

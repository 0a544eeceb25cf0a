"""Scenario configuration: a versioned YAML format describing one attack
run (policy, topology, attacker schedules, victim devices with scripted
state timelines, mitigations).

Wall-clock strings like "19:28" are sugar for millisecond offsets from the
scenario epoch.  Validation failures raise :class:`ScenarioError` with a
field path in the message.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import yaml

from .catalog import Catalog, CatalogError, parse_latency
from .devices import ActivityState, ScriptEntry
from .mitigation import MitigationConfig
from .netmodel import AccessLink, LatencyDistribution, LinkTech
from .prober import ProbeSchedule, SenderRateLimiter, default_limiter_for
from .protocol import ProbeKind, policy_by_name

SCENARIO_VERSION = 1

#: Probe kinds that presuppose an existing attacker-victim conversation.
CONVERSATION_KINDS = frozenset(
    {
        ProbeKind.SELF_REACTION,
        ProbeKind.REMOVE_REACTION,
        ProbeKind.EDIT,
        ProbeKind.DELETE,
    }
)


class ScenarioError(ValueError):
    """Scenario file failed validation."""


class AttackerType(str, Enum):
    CREEPY_COMPANION = "creepy_companion"
    SPOOKY_STRANGER = "spooky_stranger"


def parse_clock(value, epoch_ms: int = 0) -> int:
    """Accept integer milliseconds or "HH:MM[:SS]" relative to the epoch."""
    if isinstance(value, bool):
        raise ScenarioError(f"not a time value: {value!r}")
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, str):
        parts = value.split(":")
        if len(parts) in (2, 3) and all(p.isdigit() for p in parts):
            h, m = int(parts[0]), int(parts[1])
            s = int(parts[2]) if len(parts) == 3 else 0
            return (h * 3600 + m * 60 + s) * 1000 - epoch_ms
        if value.isdigit():
            return int(value)
    raise ScenarioError(f"cannot parse time {value!r} (want ms or HH:MM[:SS])")


@dataclass
class AttackerSpec:
    kind: AttackerType
    schedules: List[ProbeSchedule]
    limiter: SenderRateLimiter
    allow_visible: bool = False
    ref_message_age_s: float = 0.0
    directory_poll_interval_s: Optional[float] = None
    link: Optional[AccessLink] = None  # defaults to the catalog attacker uplink

    @property
    def is_stranger(self) -> bool:
        return self.kind == AttackerType.SPOOKY_STRANGER


@dataclass
class DeviceSpec:
    index: int
    profile_name: str
    link_name: str
    script: List[ScriptEntry] = field(default_factory=list)
    start_state: Optional[ActivityState] = None
    start_offline: bool = False
    registered_at_ms: int = 0
    removed_at_ms: Optional[int] = None


@dataclass
class VictimSpec:
    account: str
    devices: List[DeviceSpec]
    read_receipts: bool = False


@dataclass
class TopologySpec:
    messaging_servers: Optional[List[str]] = None
    attacker_pin: Optional[str] = None
    victim_pin: Optional[str] = None
    hop: Optional[LatencyDistribution] = None
    link_overrides: Dict[str, AccessLink] = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    seed: int
    policy_name: str
    duration_ms: int
    attacker: AttackerSpec
    victim: VictimSpec
    epoch_ms: int = 0
    topology: TopologySpec = field(default_factory=TopologySpec)
    mitigations: MitigationConfig = field(default_factory=MitigationConfig)

    def clock_label(self, t_ms: int) -> str:
        total_s = (t_ms + self.epoch_ms) // 1000
        return f"{total_s // 3600:02d}:{(total_s % 3600) // 60:02d}:{total_s % 60:02d}"


def _parse_schedule(raw: dict, where: str) -> ProbeSchedule:
    try:
        kind = ProbeKind(raw["kind"])
    except KeyError:
        raise ScenarioError(f"{where}: schedule needs a probe kind")
    except ValueError:
        raise ScenarioError(f"{where}: unknown probe kind {raw['kind']!r}")
    try:
        return ProbeSchedule(
            kind=kind,
            duration_s=float(raw["duration_s"]),
            interval_ms=raw.get("interval_ms"),
            rate_per_s=raw.get("rate_per_s"),
            payload_bytes=int(raw.get("payload_bytes", 0)),
            start_at_ms=int(raw.get("start_at_ms", 0)),
            ref_valid=raw.get("ref_valid"),
        )
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}")


def _parse_script(raw_entries, epoch_ms: int, where: str) -> List[ScriptEntry]:
    entries: List[ScriptEntry] = []
    last_t = None
    for i, raw in enumerate(raw_entries or []):
        if not isinstance(raw, (list, tuple)) or len(raw) < 2:
            raise ScenarioError(f"{where}[{i}]: expected [time, op, arg?]")
        t = parse_clock(raw[0], epoch_ms)
        if t < 0:
            raise ScenarioError(f"{where}[{i}]: time {raw[0]!r} is before the epoch")
        if last_t is not None and t < last_t:
            raise ScenarioError(
                f"{where}[{i}]: entry at {raw[0]!r} is out of chronological order"
            )
        last_t = t
        op = str(raw[1])
        arg = str(raw[2]) if len(raw) > 2 else None
        entries.append(ScriptEntry(t_ms=t, op=op, arg=arg))
    return entries


def load_scenario(path: str, catalog: Catalog, seed_override: Optional[int] = None) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return parse_scenario(raw, catalog, seed_override=seed_override, source=str(path))


def parse_scenario(
    raw: dict,
    catalog: Catalog,
    seed_override: Optional[int] = None,
    source: str = "<scenario>",
) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError(f"{source}: scenario root must be a mapping")
    version = raw.get("version")
    if version != SCENARIO_VERSION:
        raise ScenarioError(f"{source}: unsupported scenario version {version!r}")

    name = str(raw.get("name", "scenario"))
    policy_name = raw.get("policy", "whatsapp_like")
    try:
        policy = policy_by_name(policy_name)
    except ValueError as exc:
        raise ScenarioError(f"{source}: {exc}")

    epoch_ms = parse_clock(raw["epoch"], 0) if "epoch" in raw else 0
    if "until" in raw:
        duration_ms = parse_clock(raw["until"], epoch_ms)
    elif "duration_s" in raw:
        duration_ms = int(float(raw["duration_s"]) * 1000)
    else:
        raise ScenarioError(f"{source}: scenario needs duration_s or until")
    if duration_ms <= 0:
        raise ScenarioError(f"{source}: duration must be positive")

    seed = int(raw.get("seed", 0)) if seed_override is None else seed_override

    # attacker -------------------------------------------------------------
    araw = raw.get("attacker") or {}
    try:
        attacker_kind = AttackerType(araw.get("type", "creepy_companion"))
    except ValueError:
        raise ScenarioError(f"{source}: unknown attacker type {araw.get('type')!r}")
    schedules_raw = araw.get("schedules")
    if schedules_raw is None and araw.get("schedule"):
        schedules_raw = [araw["schedule"]]
    schedules = [
        _parse_schedule(s, f"{source}: attacker.schedules[{i}]")
        for i, s in enumerate(schedules_raw or [])
    ]
    limiter_raw = araw.get("limiter")
    if limiter_raw is None:
        limiter = default_limiter_for(policy_name)
    elif limiter_raw == "none":
        limiter = SenderRateLimiter.none()
    else:
        limiter = SenderRateLimiter.queue_above_rate(
            float(limiter_raw["threshold_per_s"]), int(limiter_raw.get("burst", 30))
        )
    attacker = AttackerSpec(
        kind=attacker_kind,
        schedules=schedules,
        limiter=limiter,
        allow_visible=bool(araw.get("allow_visible", False)),
        ref_message_age_s=float(araw.get("ref_message_age_s", 0.0)),
        directory_poll_interval_s=araw.get("directory_poll_interval_s"),
    )

    for i, sched in enumerate(schedules):
        if attacker.is_stranger:
            if sched.kind in CONVERSATION_KINDS:
                raise ScenarioError(
                    f"{source}: attacker.schedules[{i}]: {sched.kind.value} requires an "
                    "existing conversation, but the attacker is a stranger"
                )
            if sched.kind == ProbeKind.REACTION and sched.effective_ref_valid:
                raise ScenarioError(
                    f"{source}: attacker.schedules[{i}]: a stranger has no valid message "
                    "to react to (use invalid_ref_reaction)"
                )

    # victim -----------------------------------------------------------------
    vraw = raw.get("victim") or {}
    devices_raw = vraw.get("devices")
    if not devices_raw:
        raise ScenarioError(f"{source}: victim needs at least one device")
    devices: List[DeviceSpec] = []
    seen_indices: set = set()
    for i, draw in enumerate(devices_raw):
        where = f"{source}: victim.devices[{i}]"
        try:
            index = int(draw["index"])
            profile_name = str(draw["profile"])
            link_name = str(draw.get("link", "wifi"))
        except KeyError as exc:
            raise ScenarioError(f"{where}: missing field {exc}")
        if index in seen_indices:
            raise ScenarioError(f"{where}: duplicate device index {index}")
        seen_indices.add(index)
        try:
            profile = catalog.profile(profile_name)
        except CatalogError as exc:
            raise ScenarioError(f"{where}: {exc}")
        script = _parse_script(draw.get("script"), epoch_ms, f"{where}.script")
        for j, entry in enumerate(script):
            if entry.op == "state":
                try:
                    state = ActivityState(entry.arg)
                except ValueError:
                    raise ScenarioError(f"{where}.script[{j}]: unknown state {entry.arg!r}")
                if state not in profile.delay_by_state and state != ActivityState.OFFLINE:
                    raise ScenarioError(
                        f"{where}.script[{j}]: profile {profile_name} does not support "
                        f"state {state.value}"
                    )
            elif entry.op == "link":
                if entry.arg not in catalog.links and entry.arg not in (
                    raw.get("links") or {}
                ):
                    raise ScenarioError(f"{where}.script[{j}]: unknown link {entry.arg!r}")
            elif entry.op not in ("offline", "online", "open_conversation"):
                raise ScenarioError(f"{where}.script[{j}]: unknown op {entry.op!r}")
        start_state = None
        if draw.get("start_state"):
            try:
                start_state = ActivityState(draw["start_state"])
            except ValueError:
                raise ScenarioError(f"{where}: unknown start_state {draw['start_state']!r}")
        devices.append(
            DeviceSpec(
                index=index,
                profile_name=profile_name,
                link_name=link_name,
                script=script,
                start_state=start_state,
                start_offline=bool(draw.get("start_offline", False)),
                registered_at_ms=parse_clock(draw.get("registered_at", 0), epoch_ms),
                removed_at_ms=(
                    parse_clock(draw["removed_at"], epoch_ms) if "removed_at" in draw else None
                ),
            )
        )
    victim = VictimSpec(
        account=str(vraw.get("account", "victim")),
        devices=devices,
        read_receipts=bool(vraw.get("read_receipts", False)),
    )

    # topology / link overrides ------------------------------------------------
    traw = raw.get("topology") or {}
    link_overrides: Dict[str, AccessLink] = {}
    for lname, lspec in (raw.get("links") or {}).items():
        from .catalog import parse_link

        link_overrides[lname] = parse_link(lname, lspec)
    topology = TopologySpec(
        messaging_servers=traw.get("messaging_servers"),
        attacker_pin=traw.get("attacker_pin"),
        victim_pin=traw.get("victim_pin"),
        hop=parse_latency(traw["hop"]) if traw.get("hop") else None,
        link_overrides=link_overrides,
    )
    if traw.get("attacker_link"):
        attacker.link = parse_link_spec(traw["attacker_link"])

    mitigations = MitigationConfig.from_dict(raw.get("mitigations"))

    return Scenario(
        name=name,
        seed=seed,
        policy_name=policy_name,
        duration_ms=duration_ms,
        attacker=attacker,
        victim=victim,
        epoch_ms=epoch_ms,
        topology=topology,
        mitigations=mitigations,
    )


def parse_link_spec(spec: dict) -> AccessLink:
    from .catalog import parse_link

    return parse_link("custom", {"tech": spec.get("tech", "lan"), **spec})

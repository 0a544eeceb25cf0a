"""Deterministic single-threaded event loop tying the protocol, network,
device and attacker models together.

Everything random flows from named child streams of the scenario seed and
every event is ordered by (time, insertion sequence), so a (seed, scenario)
pair fully determines all outputs.
"""

from __future__ import annotations

import copy
import heapq
import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from .catalog import Catalog, load_catalog
from .devices import ActivityState, DeviceSession, QueuedProbe, StackingPolicy, drain_battery
from .mitigation import apply_mitigations
from .netmodel import AccessLink, PinStrategy, ServerTopology, default_topology
from .prober import ProbeSchedule, RttSample, SenderRateLimiter
from .protocol import (
    AccountId,
    DeviceDirectory,
    ProbeAction,
    ProbeKind,
    ReceiptDecision,
    ReceiptEvent,
    ReceiptKind,
    StealthContext,
    UnsupportedProbeKind,
    ack_granted,
    elicits_receipt,
    fanout,
    is_stealthy,
    policy_by_name,
    within_enforced_window,
)
from .scenario import Scenario, ScenarioError


@dataclass
class LogRecord:
    t_ms: int
    seq: int
    actor: str
    kind: str
    payload: dict

    def to_dict(self) -> dict:
        return {
            "t_ms": self.t_ms,
            "seq": self.seq,
            "actor": self.actor,
            "kind": self.kind,
            "payload": self.payload,
        }


class EventLog:
    """Append-only, totally ordered by (t_ms, insertion sequence)."""

    def __init__(self) -> None:
        self.records: List[LogRecord] = []

    def append(self, t_ms: int, actor: str, kind: str, payload: Optional[dict] = None) -> None:
        self.records.append(LogRecord(t_ms, len(self.records), actor, kind, payload or {}))

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r.kind == kind)

    def of_kind(self, kind: str) -> List[LogRecord]:
        return [r for r in self.records if r.kind == kind]


@dataclass
class SimulationRun:
    """Everything one scenario run produced.

    Attacker-observable data (samples, receipts, directory snapshots) is
    kept apart from the ground truth so analysis tooling can be fed only
    what a real attacker would see.
    """

    scenario: Scenario
    event_log: EventLog
    receipts: List[ReceiptEvent]
    samples: List[RttSample]
    sessions: Dict[int, DeviceSession]
    directory_snapshots: List[Tuple[int, List[int]]]
    ground_truth: dict
    summary: dict

    @property
    def notification_count(self) -> int:
        return self.event_log.count("notification")


class Simulator:
    """One scenario bound to one event loop."""

    def __init__(self, scenario: Scenario, catalog: Optional[Catalog] = None):
        self.scenario = scenario
        self.catalog = catalog or load_catalog()
        self.log = EventLog()
        self.receipts: List[ReceiptEvent] = []
        self.samples: Dict[Tuple[str, Optional[int]], RttSample] = {}
        self._samples_by_probe: Dict[str, List[RttSample]] = {}
        self._server_ack_at: Dict[str, int] = {}
        self.directory_snapshots: List[Tuple[int, List[int]]] = []
        self.now = 0
        self._heap: List[Tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._last_arrival: Dict[object, int] = {}
        self._edit_count = 0
        self._delete_applied = False
        self._blocked_until = -1
        self._delivery_times: List[int] = []
        self._unread: Dict[int, List[str]] = {}
        self._probe_seq = 0
        self._rngs: Dict[str, random.Random] = {}

        base_policy = policy_by_name(scenario.policy_name)
        profiles = {
            spec.profile_name: self.catalog.profile(spec.profile_name)
            for spec in scenario.victim.devices
        }
        self.mitigations = scenario.mitigations
        self.policy, profiles = apply_mitigations(base_policy, profiles, self.mitigations)
        self._read_receipts = scenario.victim.read_receipts

        self.attacker = AccountId("attacker")
        self.victim = AccountId(scenario.victim.account)

        servers = tuple(
            scenario.topology.messaging_servers or default_topology().messaging_servers
        )
        self.topology = ServerTopology(messaging_servers=servers)
        if scenario.topology.hop is not None:
            self.topology.default_hop = scenario.topology.hop
        pin_rng = self.rng("pins")
        for account, wanted in (
            (self.attacker, scenario.topology.attacker_pin),
            (self.victim, scenario.topology.victim_pin),
        ):
            if wanted is not None:
                if wanted not in servers:
                    raise ScenarioError(f"pin {wanted!r} names an unknown messaging server")
                self.topology.routing_pins[account.value] = wanted
            else:
                self.topology.update_routing_pin(account, PinStrategy.KEEP_COOKIE, pin_rng)
        self._cross_server = (
            self.topology.pin_of(self.attacker) != self.topology.pin_of(self.victim)
        )

        self.attacker_link: AccessLink = scenario.attacker.link or self.catalog.link(
            "attacker-uplink"
        )

        self.sessions: Dict[int, DeviceSession] = {}
        self._device_specs = {spec.index: spec for spec in scenario.victim.devices}
        for spec in scenario.victim.devices:
            profile = profiles[spec.profile_name]
            link = self._resolve_link(spec.link_name)
            if spec.start_offline:
                state = ActivityState.OFFLINE
            elif spec.start_state is not None:
                state = spec.start_state
            else:
                state = _default_state(profile)
            session = DeviceSession(
                index=spec.index,
                profile=profile,
                link=link,
                state=state,
                script=spec.script,
                registered_at_ms=spec.registered_at_ms,
                removed_at_ms=spec.removed_at_ms,
            )
            self.sessions[spec.index] = session
            self._unread[spec.index] = []

        self.limiter: SenderRateLimiter = (
            self.mitigations.sender_rate_limit
            if self.mitigations.sender_rate_limit is not None
            else scenario.attacker.limiter
        )

        self._stealth_gate()

    # -- plumbing -----------------------------------------------------------

    def rng(self, name: str) -> random.Random:
        if name not in self._rngs:
            self._rngs[name] = random.Random(f"{self.scenario.seed}:{name}")
        return self._rngs[name]

    def schedule(self, t_ms: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(t_ms, self.now), self._seq, fn))
        self._seq += 1

    def _resolve_link(self, name: str) -> AccessLink:
        if name in self.scenario.topology.link_overrides:
            return self.scenario.topology.link_overrides[name]
        return self.catalog.link(name)

    def _stealth_gate(self) -> None:
        """Refuse schedules that would notify the victim unless overridden."""
        if self.scenario.attacker.allow_visible:
            return
        for sched in self.scenario.attacker.schedules:
            for session in self.sessions.values():
                ctx = StealthContext(
                    existing_conversation=not self.scenario.attacker.is_stranger,
                    reacts_to_own_message=sched.kind == ProbeKind.SELF_REACTION,
                    target_platform=session.profile.platform.lower(),
                )
                try:
                    stealthy = is_stealthy(sched.kind, ctx, self.policy)
                except UnsupportedProbeKind as exc:
                    raise ScenarioError(str(exc))
                if not stealthy:
                    raise ScenarioError(
                        f"schedule kind {sched.kind.value} would notify the victim on "
                        f"{session.profile.platform}; pass allow_visible to override"
                    )

    def directory_at(self, t_ms: int) -> DeviceDirectory:
        directory = DeviceDirectory(account=self.victim)
        for spec in sorted(self._device_specs.values(), key=lambda s: s.index):
            if spec.registered_at_ms <= t_ms and (
                spec.removed_at_ms is None or t_ms < spec.removed_at_ms
            ):
                directory.device_indices.append(spec.index)
        return directory

    def snapshot_device_directory(self, account: AccountId) -> List[int]:
        if account.value != self.victim.value:
            raise ScenarioError(f"unknown account {account.value!r}")
        return self.directory_at(self.now).snapshot()

    def _sample_for(self, probe: ProbeAction, device_index: Optional[int]) -> RttSample:
        key = (probe.id, device_index)
        if key not in self.samples:
            sample = RttSample(
                probe_id=probe.id, device_index=device_index, send_at=probe.sent_at
            )
            self.samples[key] = sample
            self._samples_by_probe.setdefault(probe.id, []).append(sample)
        return self.samples[key]

    # -- attacker timeline ----------------------------------------------------

    def _plan_probes(self) -> None:
        injections: List[Tuple[int, ProbeSchedule]] = []
        for sched in self.scenario.attacker.schedules:
            injections.extend((t, sched) for t in sched.injection_times())
        injections.sort(key=lambda pair: pair[0])
        departures = self.limiter.departure_times([t for t, _ in injections])
        for depart, (_, sched) in zip(departures, injections):
            self.schedule(depart, lambda s=sched, t=depart: self._send_probe(s, t))

    def _plan_directory_polls(self) -> None:
        interval = self.scenario.attacker.directory_poll_interval_s
        if not interval:
            return
        step = int(interval * 1000)
        t = 0
        while t <= self.scenario.duration_ms:
            self.schedule(t, lambda now=t: self._poll_directory(now))
            t += step

    def _poll_directory(self, t: int) -> None:
        self.directory_snapshots.append((t, self.directory_at(t).snapshot()))

    def _send_probe(self, sched: ProbeSchedule, depart: int) -> None:
        token = f"{self.rng('ids').getrandbits(128):032x}"
        probe = ProbeAction(
            id=ProbeAction.make_id(self._probe_seq, token),
            seq=self._probe_seq,
            kind=sched.kind,
            payload_bytes=sched.payload_bytes,
            ref_valid=sched.effective_ref_valid,
            sent_at=depart,
        )
        self._probe_seq += 1
        self.log.append(
            depart, "attacker", "probe_sent", {"probe_id": probe.id, "kind": probe.kind.value}
        )
        arrive = depart + _ms(self.attacker_link.sample_up(self.rng("net")))
        self.schedule(arrive, lambda: self._server_receive(probe))

    # -- server ----------------------------------------------------------------

    def _server_receive(self, probe: ProbeAction) -> None:
        now = self.now
        if now < self._blocked_until:
            self.log.append(now, "server", "probe_blocked", {"probe_id": probe.id})
            self._sample_for(probe, None).rejected = "blocked"
            return
        decision = elicits_receipt(probe.kind, probe.ref_valid, probe.payload_bytes, self.policy)
        reason = "payload"
        if (
            probe.kind == ProbeKind.EDIT
            and self.policy.max_edits is not None
            and decision != ReceiptDecision.REJECTED_BY_SERVER
        ):
            self._edit_count += 1
            if self._edit_count > self.policy.max_edits:
                decision = ReceiptDecision.REJECTED_BY_SERVER
                reason = "max_edits"
        if decision == ReceiptDecision.REJECTED_BY_SERVER:
            self.log.append(
                now, "server", "probe_rejected", {"probe_id": probe.id, "reason": reason}
            )
            self._sample_for(probe, None).rejected = reason
            return

        net = self.rng("net")
        ack_at = now + _ms(self.attacker_link.sample_down(net))
        self._server_ack_at[probe.id] = ack_at
        self.schedule(ack_at, lambda: self._server_ack_arrives(probe))

        self._flood_check(now)
        if now < self._blocked_until and self.mitigations.receiver_flood_threshold_per_min:
            # The probe that trips the flood detector is the last one through.
            pass
        directory = self.directory_at(now)
        tasks = fanout(probe, directory, self.policy)
        hop_dist = self.topology.hop(
            self.topology.pin_of(self.attacker), self.topology.pin_of(self.victim)
        )
        for task in tasks:
            hop = _ms(hop_dist.sample(net)) if self._cross_server else 0
            session = self._route_session(task.device_index)
            if session is None:
                continue
            down = _ms(session.link.sample_down(net)) if not session.link.is_offline else 0
            self._sample_for(probe, task.device_index)
            deliver_at = now + hop + down
            self.schedule(
                deliver_at,
                lambda p=probe, d=decision, s=session, di=task.device_index: self._deliver(
                    p, d, s, di
                ),
            )

    def _route_session(self, device_index: Optional[int]) -> Optional[DeviceSession]:
        if device_index is not None:
            return self.sessions.get(device_index)
        # Synchronized delivery: lowest-index online device, else the main one.
        online = [s for s in self.sessions.values() if s.is_online]
        pool = online or list(self.sessions.values())
        return min(pool, key=lambda s: s.index) if pool else None

    def _server_ack_arrives(self, probe: ProbeAction) -> None:
        event = ReceiptEvent(
            kind=ReceiptKind.SERVER_ACK, probe_ids=(probe.id,), observed_at=self.now
        )
        self.receipts.append(event)
        for sample in self._samples_by_probe.get(probe.id, []):
            sample.server_ack_at = self.now

    def _flood_check(self, now: int) -> None:
        threshold = self.mitigations.receiver_flood_threshold_per_min
        if threshold is None:
            return
        self._delivery_times.append(now)
        cutoff = now - 60_000
        while self._delivery_times and self._delivery_times[0] <= cutoff:
            self._delivery_times.pop(0)
        if len(self._delivery_times) > threshold and now >= self._blocked_until:
            self._blocked_until = now + int(self.mitigations.flood_block_duration_s * 1000)
            self.log.append(
                now,
                "victim_ui",
                "notification",
                {"reason": "flood_alert", "blocked_until_ms": self._blocked_until},
            )
            self._delivery_times.clear()

    # -- victim devices ----------------------------------------------------------

    def _deliver(
        self,
        probe: ProbeAction,
        decision: ReceiptDecision,
        session: DeviceSession,
        device_key: Optional[int],
    ) -> None:
        now = self.now
        session.advance_state(now)
        if self.policy.restrict_to_contacts and self.scenario.attacker.is_stranger:
            self.log.append(
                now, f"victim:{session.index}", "dropped_unknown_sender", {"probe_id": probe.id}
            )
            return

        ack = ack_granted(decision, self.policy)
        applied = True
        strict_dropped = False
        if probe.kind in (ProbeKind.EDIT, ProbeKind.DELETE):
            age_s = self.scenario.attacker.ref_message_age_s + now / 1000.0
            applied = within_enforced_window(probe.kind, age_s, self.policy)
            if probe.kind == ProbeKind.DELETE and applied:
                applied = not self._delete_applied
                self._delete_applied = True
            if not applied and self.policy.strict_validation:
                ack = False
                strict_dropped = True

        was_offline = not session.is_online
        emissions = session.process_incoming(
            probe,
            now,
            self.rng("proc"),
            ack=ack,
            stranger=self.scenario.attacker.is_stranger,
            extra_delay=self.mitigations.receipt_delay_noise,
        )
        if was_offline:
            self.log.append(
                now, f"victim:{session.index}", "queued_offline", {"probe_id": probe.id}
            )
            return
        if strict_dropped:
            self.log.append(
                now,
                f"victim:{session.index}",
                "discarded_out_of_window",
                {"probe_id": probe.id},
            )
        else:
            self._after_delivery(probe, session, applied)
        for emission in emissions:
            self._schedule_receipt_return(
                emission.depart_at,
                list(emission.probe_ids),
                session,
                device_key,
                ReceiptKind.DEVICE_ACK,
            )

    def _after_delivery(self, probe: ProbeAction, session: DeviceSession, applied: bool) -> None:
        now = self.now
        ctx = StealthContext(
            existing_conversation=not self.scenario.attacker.is_stranger,
            reacts_to_own_message=probe.kind == ProbeKind.SELF_REACTION,
            target_platform=session.profile.platform.lower(),
        )
        try:
            notifies = self.policy.notifies_target(probe.kind, ctx)
        except UnsupportedProbeKind:
            notifies = False
        if notifies:
            self.log.append(
                now,
                "victim_ui",
                "notification",
                {"probe_id": probe.id, "device_index": session.index, "kind": probe.kind.value},
            )
        if probe.kind in (ProbeKind.EDIT, ProbeKind.DELETE):
            if applied:
                self.log.append(
                    now,
                    "victim_ui",
                    "ui_artifact",
                    {"probe_id": probe.id, "kind": probe.kind.value},
                )
            else:
                self.log.append(
                    now,
                    f"victim:{session.index}",
                    "not_applied",
                    {"probe_id": probe.id, "kind": probe.kind.value},
                )
        if self._read_receipts and probe.kind == ProbeKind.TEXT_MESSAGE:
            self._unread.setdefault(session.index, []).append(probe.id)

    def _schedule_receipt_return(
        self,
        depart: int,
        probe_ids: List[str],
        session: DeviceSession,
        device_key: Optional[int],
        kind: ReceiptKind,
    ) -> None:
        net = self.rng("net")
        up = _ms(session.link.sample_up(net))
        hop_dist = self.topology.hop(
            self.topology.pin_of(self.attacker), self.topology.pin_of(self.victim)
        )
        hop = _ms(hop_dist.sample(net)) if self._cross_server else 0
        down = _ms(self.attacker_link.sample_down(net))
        arrival = depart + up + hop + down
        # A device ack is forwarded by the server strictly after the server
        # ack for the same probe.
        for pid in probe_ids:
            if pid in self._server_ack_at:
                arrival = max(arrival, self._server_ack_at[pid] + 1)
        # Receipts from one device share a connection and cannot reorder.
        chan = (kind.value, device_key)
        arrival = max(arrival, self._last_arrival.get(chan, -1) + 1)
        self._last_arrival[chan] = arrival
        self.schedule(
            arrival, lambda: self._receipt_arrives(kind, tuple(probe_ids), device_key)
        )

    def _receipt_arrives(
        self, kind: ReceiptKind, probe_ids: Tuple[str, ...], device_key: Optional[int]
    ) -> None:
        event = ReceiptEvent(
            kind=kind, probe_ids=probe_ids, observed_at=self.now, device_index=device_key
        )
        self.receipts.append(event)
        self.log.append(
            self.now,
            "attacker",
            "receipt",
            {"kind": kind.value, "device_index": device_key, "count": len(probe_ids)},
        )
        if kind == ReceiptKind.DEVICE_ACK:
            for pid in probe_ids:
                sample = self.samples.get((pid, device_key))
                if sample is not None and sample.device_ack_at is None:
                    sample.device_ack_at = self.now

    # -- scripted pokes ------------------------------------------------------------

    def _plan_pokes(self) -> None:
        for session in self.sessions.values():
            for entry in session.script:
                self.schedule(entry.t_ms, lambda s=session, e=entry: self._poke(s, e))
        # Materialize trailing auto transitions for the ground truth.
        self.schedule(self.scenario.duration_ms, self._finalize_states)

    def _poke(self, session: DeviceSession, entry) -> None:
        was_online = session.is_online
        if entry.op == "link":
            session.set_link(self.now, self._resolve_link(entry.arg))
        session.advance_state(self.now)
        if entry.op == "open_conversation":
            self._emit_read_receipts(session)
        if not was_online and session.is_online:
            self._flush(session)

    def _flush(self, session: DeviceSession) -> None:
        queued: List[QueuedProbe] = list(session.offline_queue)
        if not queued:
            return
        emissions = session.flush_offline_queue(
            self.now,
            self.rng("proc"),
            stranger=self.scenario.attacker.is_stranger,
            extra_delay=self.mitigations.receipt_delay_noise,
        )
        self.log.append(
            self.now, f"victim:{session.index}", "backlog_flush", {"count": len(queued)}
        )
        device_key: Optional[int] = session.index if self.policy.per_device_receipts else None
        for item in queued:
            self._after_delivery(item.probe, session, True)
        for emission in emissions:
            self._schedule_receipt_return(
                emission.depart_at,
                list(emission.probe_ids),
                session,
                device_key,
                ReceiptKind.DEVICE_ACK,
            )

    def _emit_read_receipts(self, session: DeviceSession) -> None:
        if not self._read_receipts:
            return
        unread = self._unread.get(session.index) or []
        if not unread:
            return
        self._unread[session.index] = []
        policy = session.profile.read_stacking
        depart = self.now + 50  # fixed UI-to-wire latency for read receipts
        device_key: Optional[int] = session.index if self.policy.per_device_receipts else None
        if policy == StackingPolicy.SEPARATE:
            for i, pid in enumerate(unread):
                self._schedule_receipt_return(
                    depart + 2 * i, [pid], session, device_key, ReceiptKind.READ_ACK
                )
            return
        if policy == StackingPolicy.STACKED:
            ordered = unread
        elif policy == StackingPolicy.STACKED_REVERSED:
            ordered = list(reversed(unread))
        else:
            ordered = list(unread)
            self.rng("stack").shuffle(ordered)
        self._schedule_receipt_return(depart, ordered, session, device_key, ReceiptKind.READ_ACK)

    def _finalize_states(self) -> None:
        for session in self.sessions.values():
            session.advance_state(self.scenario.duration_ms)

    # -- run ---------------------------------------------------------------------

    def run(self) -> SimulationRun:
        self._plan_probes()
        self._plan_directory_polls()
        self._plan_pokes()
        while self._heap:
            t, _, fn = heapq.heappop(self._heap)
            self.now = max(self.now, t)
            fn()
        duration_s = self.scenario.duration_ms / 1000.0
        battery_deltas = {}
        for idx, session in sorted(self.sessions.items()):
            before = session.battery_pct
            drain_battery(session, session.rx_bytes, duration_s)
            battery_deltas[idx] = session.battery_pct - before

        samples = sorted(
            self.samples.values(), key=lambda s: (s.send_at, s.probe_id, _key(s.device_index))
        )
        ground_truth = {
            "duration_ms": self.scenario.duration_ms,
            "devices": {
                str(idx): {
                    "profile": session.profile.name,
                    "states": [
                        {"start_ms": a, "end_ms": b, "state": label}
                        for a, b, label in session.ground_truth_segments(self.scenario.duration_ms)
                    ],
                    "links": [{"t_ms": t, "link": name} for t, name in session.link_log],
                }
                for idx, session in sorted(self.sessions.items())
            },
        }
        summary = self._summary(battery_deltas)
        return SimulationRun(
            scenario=self.scenario,
            event_log=self.log,
            receipts=self.receipts,
            samples=samples,
            sessions=self.sessions,
            directory_snapshots=self.directory_snapshots,
            ground_truth=ground_truth,
            summary=summary,
        )

    def _summary(self, battery_deltas: Dict[int, float]) -> dict:
        device_acks = [r for r in self.receipts if r.kind == ReceiptKind.DEVICE_ACK]
        per_device = {}
        for idx, session in sorted(self.sessions.items()):
            acks = [r for r in device_acks if r.device_index == idx]
            per_device[str(idx)] = {
                "profile": session.profile.name,
                "rx_bytes": session.rx_bytes,
                "battery_delta_pct": round(battery_deltas[idx], 4),
                "device_ack_events": len(acks),
                "device_acked_probes": sum(len(r.probe_ids) for r in acks),
            }
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "policy": self.policy.name,
            "duration_ms": self.scenario.duration_ms,
            "probes_sent": self._probe_seq,
            "probes_rejected": sum(1 for s in self.samples.values() if s.rejected),
            "server_ack_events": sum(1 for r in self.receipts if r.kind == ReceiptKind.SERVER_ACK),
            "device_ack_events": len(device_acks),
            "read_ack_events": sum(1 for r in self.receipts if r.kind == ReceiptKind.READ_ACK),
            "notifications": self.log.count("notification"),
            "ui_artifacts": self.log.count("ui_artifact"),
            "per_device": per_device,
        }


def _ms(value: float) -> int:
    return max(0, round(value))


def _key(device_index: Optional[int]) -> int:
    return -1 if device_index is None else device_index


def _default_state(profile) -> ActivityState:
    for candidate in (ActivityState.SCREEN_ON, ActivityState.TAB_ACTIVE):
        if candidate in profile.delay_by_state:
            return candidate
    return next(iter(profile.delay_by_state))


def run_scenario(scenario: Scenario, catalog: Optional[Catalog] = None) -> SimulationRun:
    return Simulator(scenario, catalog).run()


def run_schedule(
    schedule: ProbeSchedule,
    limiter: SenderRateLimiter,
    scenario: Scenario,
    catalog: Optional[Catalog] = None,
) -> List[RttSample]:
    """Run one probe schedule against a scenario's victim and collect samples.

    Convenience wrapper: replaces the scenario's attacker schedule/limiter,
    runs the full loop and returns the sample stream.
    """
    scn = copy.deepcopy(scenario)
    scn.attacker.schedules = [schedule]
    scn.attacker.limiter = limiter
    return Simulator(scn, catalog).run().samples

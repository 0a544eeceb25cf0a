"""Victim-side device sessions: activity-state machine, state-dependent
receipt processing delays, offline queueing with receipt stacking, and the
linear battery model.

A session's *actual* state timeline (script plus automatic transitions) is
recorded in ``state_log`` and serves as the ground truth that attacker-side
inference is judged against.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from .netmodel import AccessLink, LatencyDistribution, LinkTech
from .protocol import ENVELOPE_OVERHEAD_BYTES, ProbeAction


class ActivityState(str, Enum):
    APP_FOREGROUND = "AppForeground"
    APP_BACKGROUND_TRANSIENT = "AppBackgroundTransient"
    SCREEN_ON = "ScreenOn"
    SCREEN_OFF = "ScreenOff"
    DEEP_SLEEP = "DeepSleep"
    OFFLINE = "Offline"
    TAB_ACTIVE = "TabActive"
    TAB_BACKGROUND = "TabBackground"


#: Phone states whose mean delays must be ordered foreground < on < off <= sleep.
PHONE_STATES = (
    ActivityState.APP_FOREGROUND,
    ActivityState.SCREEN_ON,
    ActivityState.SCREEN_OFF,
    ActivityState.DEEP_SLEEP,
)


class StackingPolicy(str, Enum):
    SEPARATE = "separate"
    STACKED = "stacked"
    STACKED_REVERSED = "stacked_reversed"
    STACKED_RANDOM = "stacked_random"


@dataclass(frozen=True)
class SleepDynamics:
    """Standby behaviour: how long after the last activity the device falls
    into deep sleep, and whether incoming probes keep it awake."""

    idle_threshold_s: float
    probe_resets_idle: bool


@dataclass(frozen=True)
class BatteryRates:
    """Endpoints of the linear drain model, in percent per hour.

    ``attack_pct_per_h`` is the drain at the reference inbound byte rate;
    between idle and that point the drain interpolates linearly in the
    achieved byte rate and is clamped above it.
    """

    idle_pct_per_h: float = 0.9
    attack_pct_per_h: float = 15.0
    reference_bytes_per_s: float = 3_700_000.0


@dataclass(frozen=True)
class PlatformProfile:
    """Receipt-relevant behaviour of one app/platform combination."""

    name: str
    app: str
    platform: str
    delay_by_state: Dict[ActivityState, LatencyDistribution]
    sleep: SleepDynamics
    stacking: StackingPolicy
    read_stacking: StackingPolicy
    transient_duration_s: float = 30.0
    battery: BatteryRates = BatteryRates()
    stranger_delay_override: Optional[Dict[ActivityState, LatencyDistribution]] = None

    def delay_for(self, state: ActivityState, stranger: bool = False) -> LatencyDistribution:
        if stranger and self.stranger_delay_override and state in self.stranger_delay_override:
            return self.stranger_delay_override[state]
        try:
            return self.delay_by_state[state]
        except KeyError:
            raise ValueError(f"profile {self.name} has no delay for state {state.value}")

    def supports(self, state: ActivityState) -> bool:
        return state in self.delay_by_state or state == ActivityState.OFFLINE


def derive_deep_sleep(screen_off: LatencyDistribution) -> LatencyDistribution:
    """Deep sleep as a slower, noisier variant of the screen-off delay."""
    return replace(
        screen_off,
        mean_ms=screen_off.mean_ms * 1.5,
        stddev_ms=screen_off.stddev_ms * 2.0,
    )


class ScriptError(ValueError):
    """State script violates ordering or references an unsupported state."""


@dataclass(frozen=True)
class ScriptEntry:
    """One scripted change: ``op`` is state/link/offline/online/open_conversation."""

    t_ms: int
    op: str
    arg: Optional[str] = None


@dataclass
class QueuedProbe:
    probe: ProbeAction
    arrived_at: int
    ack: bool  # whether this probe earns a receipt once delivered


@dataclass
class ReceiptEmission:
    """A receipt departing the device: one or more probe ids at ``depart_at``."""

    probe_ids: Tuple[str, ...]
    depart_at: int


# Wire spacing between receipts flushed back-to-back on one connection.
FLUSH_SPACING_MS = 2


@dataclass
class DeviceSession:
    """One registered device with its activity-state machine.

    The session is owned by a single simulation loop; methods mutate it in
    place and return whatever needs scheduling.
    """

    index: int
    profile: PlatformProfile
    link: AccessLink
    state: ActivityState
    script: List[ScriptEntry] = field(default_factory=list)
    battery_pct: float = 100.0
    rx_bytes: int = 0
    offline_queue: List[QueuedProbe] = field(default_factory=list)
    state_log: List[Tuple[int, ActivityState]] = field(default_factory=list)
    link_log: List[Tuple[int, str]] = field(default_factory=list)
    registered_at_ms: int = 0
    removed_at_ms: Optional[int] = None

    _script_pos: int = 0
    _entered_state_at: int = 0
    _idle_anchor: int = 0

    def __post_init__(self) -> None:
        last_t = -1
        for entry in self.script:
            if entry.t_ms < last_t:
                raise ScriptError(
                    f"device {self.index}: script entry at {entry.t_ms} ms is out of order"
                )
            last_t = entry.t_ms
        self.state_log.append((0, self.state))
        self.link_log.append((0, self.link.tech.value))

    # -- state machine -----------------------------------------------------

    @property
    def is_online(self) -> bool:
        return self.state != ActivityState.OFFLINE and not self.link.is_offline

    def _set_state(self, t: int, new_state: ActivityState) -> None:
        if new_state == self.state:
            return
        self.state = new_state
        self._entered_state_at = t
        self._idle_anchor = t
        self.state_log.append((t, new_state))

    def _auto_deadline(self) -> Optional[Tuple[int, ActivityState]]:
        if self.state == ActivityState.APP_BACKGROUND_TRANSIENT:
            t = self._entered_state_at + int(self.profile.transient_duration_s * 1000)
            return t, ActivityState.SCREEN_ON
        if self.state == ActivityState.SCREEN_OFF:
            if ActivityState.DEEP_SLEEP not in self.profile.delay_by_state:
                return None
            t = self._idle_anchor + int(self.profile.sleep.idle_threshold_s * 1000)
            return t, ActivityState.DEEP_SLEEP
        return None

    def advance_state(self, now: int) -> ActivityState:
        """Apply all scripted and automatic transitions due by ``now``.

        Transitions are replayed in timestamp order so the ground-truth log
        carries exact transition times even when the session is touched
        lazily.  Returns the state at ``now``.
        """
        while True:
            nxt: Optional[Tuple[int, int, object]] = None  # (t, priority, action)
            auto = self._auto_deadline()
            if auto is not None and auto[0] <= now:
                nxt = (auto[0], 0, auto[1])
            if self._script_pos < len(self.script):
                entry = self.script[self._script_pos]
                if entry.t_ms <= now and (nxt is None or (entry.t_ms, 1) < (nxt[0], nxt[1])):
                    nxt = (entry.t_ms, 1, entry)
            if nxt is None:
                return self.state
            t, _, action = nxt
            if isinstance(action, ActivityState):
                self._set_state(t, action)
            else:
                self._apply_entry(t, action)
                self._script_pos += 1

    def _apply_entry(self, t: int, entry: ScriptEntry) -> None:
        if entry.op == "state":
            state = ActivityState(entry.arg)
            if state not in self.profile.delay_by_state and state != ActivityState.OFFLINE:
                raise ScriptError(
                    f"device {self.index}: profile {self.profile.name} does not support "
                    f"state {state.value}"
                )
            self._set_state(t, state)
        elif entry.op == "offline":
            self._set_state(t, ActivityState.OFFLINE)
        elif entry.op == "online":
            state = ActivityState(entry.arg) if entry.arg else self._default_online_state()
            self._set_state(t, state)
        elif entry.op == "link":
            # Link swaps are applied by the scenario layer (it owns the link
            # catalog); sessions only record them for the ground truth.
            self.link_log.append((t, str(entry.arg)))
        elif entry.op == "open_conversation":
            pass  # handled by the simulator (read receipts)
        else:
            raise ScriptError(f"device {self.index}: unknown script op {entry.op!r}")

    def _default_online_state(self) -> ActivityState:
        for candidate in (ActivityState.SCREEN_ON, ActivityState.TAB_ACTIVE):
            if candidate in self.profile.delay_by_state:
                return candidate
        return next(iter(self.profile.delay_by_state))

    def set_link(self, t: int, link: AccessLink) -> None:
        self.link = link

    def note_probe_activity(self, now: int) -> None:
        """Incoming traffic postpones deep sleep on profiles that reset idle."""
        if self.profile.sleep.probe_resets_idle and self.state == ActivityState.SCREEN_OFF:
            self._idle_anchor = now

    # -- receipt processing --------------------------------------------------

    def process_incoming(
        self,
        probe: ProbeAction,
        now: int,
        rng: random.Random,
        ack: bool,
        stranger: bool = False,
        extra_delay: Optional[LatencyDistribution] = None,
    ) -> List[ReceiptEmission]:
        """Deliver one probe to this device at ``now``.

        Offline sessions queue the probe for later flushing; online sessions
        account the received bytes and, when ``ack`` is set, emit a device
        ack after the state-dependent processing delay (plus ``extra_delay``
        noise when a receipt-delay countermeasure is active).
        """
        self.advance_state(now)
        if not self.is_online:
            self.offline_queue.append(QueuedProbe(probe, now, ack))
            return []
        self.rx_bytes += probe.payload_bytes + ENVELOPE_OVERHEAD_BYTES
        self.note_probe_activity(now)
        if not ack:
            return []
        delay = self.profile.delay_for(self.state, stranger).sample(rng)
        if extra_delay is not None:
            delay += extra_delay.sample(rng)
        depart = now + max(1, round(delay))
        return [ReceiptEmission(probe_ids=(probe.id,), depart_at=depart)]

    def flush_offline_queue(
        self,
        now: int,
        rng: random.Random,
        stranger: bool = False,
        extra_delay: Optional[LatencyDistribution] = None,
    ) -> List[ReceiptEmission]:
        """Drain the queue after coming online, per the stacking policy.

        The whole backlog is fetched and processed as one batch: received
        bytes are accounted now, and receipts leave after a single sampled
        processing delay (separate receipts keep arrival order with a small
        wire spacing).
        """
        if not self.offline_queue:
            return []
        queued = list(self.offline_queue)
        self.offline_queue.clear()
        for item in queued:
            self.rx_bytes += item.probe.payload_bytes + ENVELOPE_OVERHEAD_BYTES
        self.note_probe_activity(now)
        ack_ids = [item.probe.id for item in queued if item.ack]
        if not ack_ids:
            return []
        delay = self.profile.delay_for(self.state, stranger).sample(rng)
        if extra_delay is not None:
            delay += extra_delay.sample(rng)
        depart = now + max(1, round(delay))
        policy = self.profile.stacking
        if policy == StackingPolicy.SEPARATE:
            return [
                ReceiptEmission(probe_ids=(pid,), depart_at=depart + i * FLUSH_SPACING_MS)
                for i, pid in enumerate(ack_ids)
            ]
        if policy == StackingPolicy.STACKED:
            ordered = list(ack_ids)
        elif policy == StackingPolicy.STACKED_REVERSED:
            ordered = list(reversed(ack_ids))
        else:  # STACKED_RANDOM: seeded uniform shuffle
            ordered = list(ack_ids)
            rng.shuffle(ordered)
        return [ReceiptEmission(probe_ids=tuple(ordered), depart_at=depart)]

    # -- resources ----------------------------------------------------------

    def ground_truth_segments(self, end_ms: int) -> List[Tuple[int, int, str]]:
        """State log as [start, end) segments covering [0, end_ms)."""
        segments: List[Tuple[int, int, str]] = []
        for i, (t, state) in enumerate(self.state_log):
            end = self.state_log[i + 1][0] if i + 1 < len(self.state_log) else end_ms
            if end > t:
                segments.append((t, end, state.value))
        return segments


def drain_battery(
    session: DeviceSession,
    bytes_processed: int,
    elapsed_s: float,
    rates: Optional[BatteryRates] = None,
) -> float:
    """Apply the linear drain model and return the new battery percentage.

    Drain per hour runs from the idle rate at zero traffic to the attack
    rate at (or above) the reference byte rate.
    """
    if elapsed_s < 0:
        raise ValueError("elapsed_s must be >= 0")
    rates = rates or session.profile.battery
    if elapsed_s == 0:
        return session.battery_pct
    byte_rate = bytes_processed / elapsed_s
    load = min(1.0, byte_rate / rates.reference_bytes_per_s)
    pct_per_h = rates.idle_pct_per_h + (rates.attack_pct_per_h - rates.idle_pct_per_h) * load
    session.battery_pct = max(0.0, session.battery_pct - pct_per_h * elapsed_s / 3600.0)
    return session.battery_pct

"""Attacker-side reconstruction from receipt observations: online/offline
intervals, activity-state classification, receipt-stacking fingerprints,
device-directory tracking and the server-to-victim RTT estimate.

Everything here consumes only what the attacker can observe (RTT samples,
receipt events, directory snapshots); ground truth enters solely through
test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from statistics import median
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .devices import ActivityState, PlatformProfile, StackingPolicy
from .prober import RttSample
from .protocol import DirectoryIntegrityError, ProbeAction, ReceiptEvent, ReceiptKind

LABEL_ONLINE = "Online"
LABEL_OFFLINE = "Offline"
LABEL_UNKNOWN = "Unknown"


@dataclass(frozen=True)
class TimelineSegment:
    start_ms: int
    end_ms: int
    label: str
    confidence: float = 1.0

    def to_dict(self) -> dict:
        return {
            "start_ms": self.start_ms,
            "end_ms": self.end_ms,
            "label": self.label,
            "confidence": round(self.confidence, 4),
        }


@dataclass
class InferredTimeline:
    """Per-device reconstruction: chronologically ordered, non-overlapping
    segments with a 0..1 confidence each."""

    per_device: Dict[Optional[int], List[TimelineSegment]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            str(idx): [seg.to_dict() for seg in segs]
            for idx, segs in sorted(self.per_device.items(), key=lambda kv: str(kv[0]))
        }


# -- online/offline detection ------------------------------------------------


def detect_online_intervals(
    samples: Sequence[RttSample], gap_threshold_ms: int
) -> List[TimelineSegment]:
    """Segment one device's sample stream into online/offline intervals.

    The device counts as offline across any span where consecutive ack
    arrivals are separated by strictly more than ``gap_threshold_ms``; a
    backlog flush shows up as a burst of acks whose arrival instant marks
    the reconnect.  Returns a single Unknown segment when no ack was ever
    observed.
    """
    if not samples:
        return [TimelineSegment(0, 0, LABEL_UNKNOWN, 0.0)]
    first_send = min(s.send_at for s in samples)
    last_seen = max(max(s.send_at, s.device_ack_at or 0, s.server_ack_at or 0) for s in samples)
    arrivals = sorted(s.device_ack_at for s in samples if s.device_ack_at is not None)
    if not arrivals:
        return [TimelineSegment(first_send, last_seen, LABEL_UNKNOWN, 0.0)]

    segments: List[TimelineSegment] = []
    span_start = first_send
    online_since = arrivals[0]
    if arrivals[0] - first_send > gap_threshold_ms:
        segments.append(TimelineSegment(first_send, arrivals[0], LABEL_OFFLINE))
    else:
        online_since = span_start
    prev = arrivals[0]
    for arrival in arrivals[1:]:
        if arrival - prev > gap_threshold_ms:
            segments.append(TimelineSegment(online_since, prev, LABEL_ONLINE))
            segments.append(TimelineSegment(prev, arrival, LABEL_OFFLINE))
            online_since = arrival
        prev = arrival
    segments.append(TimelineSegment(online_since, prev, LABEL_ONLINE))
    if last_seen - prev > gap_threshold_ms:
        segments.append(TimelineSegment(prev, last_seen, LABEL_OFFLINE))
    return segments


# -- activity-state classification --------------------------------------------


class ClassifierMethod(str, Enum):
    THRESHOLD_BANDS = "threshold_bands"
    TWO_COMPONENT_MIXTURE = "two_component_mixture"


@dataclass
class StateClassifierModel:
    """Banded RTT classifier with a median prefilter.

    ``bands`` maps a label to an inclusive-exclusive (low_ms, high_ms)
    window; bands must not overlap.  The mixture method fits two components
    to the data first and derives the two bands from the crossover.
    """

    method: ClassifierMethod = ClassifierMethod.THRESHOLD_BANDS
    bands: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    smoothing_window: int = 5

    def __post_init__(self) -> None:
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be an odd integer >= 1")
        ordered = sorted(self.bands.items(), key=lambda kv: (kv[1][0] + kv[1][1]) / 2)
        for (_, a), (_, b) in zip(ordered, ordered[1:]):
            if a[1] > b[0]:
                raise ValueError(f"bands {a} and {b} overlap")

    def label_for(self, value: float) -> str:
        for label, (low, high) in self.bands.items():
            if low <= value < high:
                return label
        return LABEL_UNKNOWN


def build_threshold_bands(
    profile: PlatformProfile,
    states: Optional[Sequence[ActivityState]] = None,
    rtt_offset_ms: float = 0.0,
) -> Dict[str, Tuple[float, float]]:
    """Bands separated at the midpoints between the profile's state means.

    ``rtt_offset_ms`` shifts all boundaries by a known network floor; the
    outermost bands extend to zero and infinity.
    """
    if states is None:
        states = [s for s in profile.delay_by_state]
    means = sorted(
        ((profile.delay_by_state[s].mean, s) for s in states), key=lambda pair: pair[0]
    )
    bands: Dict[str, Tuple[float, float]] = {}
    for i, (mean, state) in enumerate(means):
        low = 0.0 if i == 0 else (means[i - 1][0] + mean) / 2 + rtt_offset_ms
        high = math.inf if i == len(means) - 1 else (mean + means[i + 1][0]) / 2 + rtt_offset_ms
        bands[state.value] = (low, high)
    return bands


def median_filter(values: Sequence[float], window: int) -> List[float]:
    """Centered running median; the window shrinks symmetrically at edges."""
    if window == 1:
        return list(values)
    half = window // 2
    out: List[float] = []
    n = len(values)
    for i in range(n):
        k = min(half, i, n - 1 - i)
        out.append(median(values[i - k : i + k + 1]))
    return out


def fit_two_component_bands(values: Sequence[float], labels=("LowRtt", "HighRtt")):
    """1-D two-Gaussian EM fit; returns bands split at the posterior crossover."""
    vs = sorted(values)
    if len(vs) < 4:
        raise ValueError("need at least 4 samples to fit a mixture")
    mu = [vs[len(vs) // 4], vs[3 * len(vs) // 4]]
    var = [max(1.0, (vs[-1] - vs[0]) / 4.0) ** 2] * 2
    pi = [0.5, 0.5]
    for _ in range(200):
        resp = []
        for v in vs:
            dens = [
                pi[k] * math.exp(-0.5 * (v - mu[k]) ** 2 / var[k]) / math.sqrt(var[k])
                for k in range(2)
            ]
            total = sum(dens) or 1e-300
            resp.append([d / total for d in dens])
        new_mu = []
        new_var = []
        new_pi = []
        for k in range(2):
            w = sum(r[k] for r in resp)
            if w < 1e-9:
                w = 1e-9
            m = sum(r[k] * v for r, v in zip(resp, vs)) / w
            s2 = sum(r[k] * (v - m) ** 2 for r, v in zip(resp, vs)) / w
            new_mu.append(m)
            new_var.append(max(s2, 1.0))
            new_pi.append(w / len(vs))
        shift = max(abs(a - b) for a, b in zip(mu, new_mu))
        mu, var, pi = new_mu, new_var, new_pi
        if shift < 1e-6:
            break
    order = sorted(range(2), key=lambda k: mu[k])
    lo, hi = mu[order[0]], mu[order[1]]
    # Boundary: equal weighted densities between the two fitted components.
    sd_lo, sd_hi = math.sqrt(var[order[0]]), math.sqrt(var[order[1]])
    boundary = (lo * sd_hi + hi * sd_lo) / (sd_lo + sd_hi)
    return {labels[0]: (0.0, boundary), labels[1]: (boundary, math.inf)}


def classify_states(
    samples: Sequence[RttSample],
    model: StateClassifierModel,
    profile_hint: Optional[PlatformProfile] = None,
) -> List[TimelineSegment]:
    """Label each acked sample by RTT band and merge runs into segments.

    The RTT series is median-filtered before banding; per-segment confidence
    is the fraction of *raw* samples inside the segment's band.  Samples
    outside every band yield Unknown segments rather than a guessed state.
    """
    acked = [s for s in samples if s.device_ack_at is not None]
    acked.sort(key=lambda s: s.send_at)
    if len(acked) < model.smoothing_window:
        raise ValueError(
            f"need at least smoothing_window={model.smoothing_window} acked samples"
        )
    bands = model.bands
    if model.method == ClassifierMethod.TWO_COMPONENT_MIXTURE:
        if profile_hint is not None:
            labels = _closest_state_labels(profile_hint)
        else:
            labels = ("LowRtt", "HighRtt")
        bands = fit_two_component_bands([float(s.device_rtt_ms) for s in acked], labels)
        model = StateClassifierModel(
            method=model.method, bands=bands, smoothing_window=model.smoothing_window
        )
    if not bands:
        raise ValueError("threshold classifier needs a non-empty band map")

    raw = [float(s.device_rtt_ms) for s in acked]
    filtered = median_filter(raw, model.smoothing_window)
    labels_per_sample = [model.label_for(v) for v in filtered]

    segments: List[TimelineSegment] = []
    run_start = 0
    for i in range(1, len(acked) + 1):
        if i == len(acked) or labels_per_sample[i] != labels_per_sample[run_start]:
            label = labels_per_sample[run_start]
            start = acked[run_start].send_at
            end = acked[i].send_at if i < len(acked) else acked[-1].send_at
            if label == LABEL_UNKNOWN:
                conf = 0.0
            else:
                low, high = model.bands[label]
                in_band = sum(1 for v in raw[run_start:i] if low <= v < high)
                conf = in_band / (i - run_start)
            segments.append(TimelineSegment(start, max(end, start), label, conf))
            run_start = i
    return segments


def _closest_state_labels(profile: PlatformProfile) -> Tuple[str, str]:
    means = sorted(profile.delay_by_state.items(), key=lambda kv: kv[1].mean)
    return (means[0][0].value, means[-1][0].value)


def per_sample_labels(
    samples: Sequence[RttSample], model: StateClassifierModel
) -> List[Tuple[int, str]]:
    """(send_at, label) per acked sample; convenience for accuracy scoring."""
    acked = sorted(
        (s for s in samples if s.device_ack_at is not None), key=lambda s: s.send_at
    )
    raw = [float(s.device_rtt_ms) for s in acked]
    filtered = median_filter(raw, model.smoothing_window)
    return [(s.send_at, model.label_for(v)) for s, v in zip(acked, filtered)]


# -- platform fingerprinting ---------------------------------------------------


#: Receipt-handling matrix: (app, platform) -> (delivery stacking, read stacking).
RECEIPT_MATRIX: Dict[Tuple[str, str], Tuple[StackingPolicy, StackingPolicy]] = {
    ("WhatsApp", "Android"): (StackingPolicy.SEPARATE, StackingPolicy.STACKED),
    ("WhatsApp", "iOS"): (StackingPolicy.SEPARATE, StackingPolicy.STACKED_REVERSED),
    ("WhatsApp", "Web"): (StackingPolicy.STACKED, StackingPolicy.STACKED),
    ("WhatsApp", "Windows"): (StackingPolicy.STACKED, StackingPolicy.STACKED),
    ("WhatsApp", "macOS"): (StackingPolicy.STACKED_REVERSED, StackingPolicy.STACKED_REVERSED),
    ("Signal", "Android"): (StackingPolicy.SEPARATE, StackingPolicy.STACKED),
    ("Signal", "iOS"): (StackingPolicy.SEPARATE, StackingPolicy.STACKED_RANDOM),
    ("Signal", "Desktop"): (StackingPolicy.STACKED, StackingPolicy.STACKED_REVERSED),
}


@dataclass(frozen=True)
class PlatformFingerprint:
    """Observed stacking/ordering plus every matrix row consistent with it."""

    observed: Optional[StackingPolicy]
    candidates: frozenset
    indeterminate: bool = False

    def to_dict(self) -> dict:
        return {
            "observed": self.observed.value if self.observed else None,
            "indeterminate": self.indeterminate,
            "candidates": sorted(f"{app}/{plat}" for app, plat in self.candidates),
        }


def classify_stacking(
    flush_events: Sequence[ReceiptEvent], sent_order: Sequence[str]
) -> Optional[StackingPolicy]:
    """Classify one reconnection backlog's receipts.

    Returns None (indeterminate) when the backlog holds fewer than two
    probes.  A randomized order is only ever inferred from three or more
    ids, since two ids cannot distinguish reversed from random.
    """
    ids: List[str] = [pid for ev in flush_events for pid in ev.probe_ids]
    if len(ids) < 2:
        return None
    if len(flush_events) > 1:
        return StackingPolicy.SEPARATE
    order = {pid: i for i, pid in enumerate(sent_order)}
    ranks = [order[pid] for pid in ids if pid in order]
    if len(ranks) != len(ids):
        raise ValueError("flush contains probe ids missing from sent_order")
    if ranks == sorted(ranks):
        return StackingPolicy.STACKED
    if ranks == sorted(ranks, reverse=True):
        return StackingPolicy.STACKED_REVERSED
    return StackingPolicy.STACKED_RANDOM


def fingerprint_platform(
    flush_events: Sequence[ReceiptEvent],
    sent_order: Sequence[str],
    matrix: Optional[Mapping[Tuple[str, str], Tuple[StackingPolicy, StackingPolicy]]] = None,
    receipt_kind: str = "delivery",
) -> PlatformFingerprint:
    """Match a reconnection backlog against the receipt-handling matrix.

    The candidate set contains exactly the rows consistent with the
    observation; a random-order row is consistent with any single stacked
    receipt (it could emit any permutation), while deterministic rows match
    only their own observable.
    """
    matrix = RECEIPT_MATRIX if matrix is None else matrix
    column = 0 if receipt_kind == "delivery" else 1
    observed = classify_stacking(flush_events, sent_order)
    if observed is None:
        return PlatformFingerprint(None, frozenset(matrix.keys()), indeterminate=True)
    n_ids = sum(len(ev.probe_ids) for ev in flush_events)
    candidates = set()
    for row, policies in matrix.items():
        policy = policies[column]
        if policy == observed:
            candidates.add(row)
        elif policy == StackingPolicy.STACKED_RANDOM and observed in (
            StackingPolicy.STACKED,
            StackingPolicy.STACKED_REVERSED,
        ):
            # A shuffled batch can land in natural or reversed order; with
            # only two ids it always does.
            candidates.add(row)
    return PlatformFingerprint(observed, frozenset(candidates))


def backlog_flush_events(
    receipts: Sequence[ReceiptEvent],
    samples: Sequence[RttSample],
    device_index,
    late_threshold_ms: int,
    burst_gap_ms: int = 200,
    extend_threshold_ms: Optional[int] = None,
) -> List[List[ReceiptEvent]]:
    """Extract reconnection backlogs from one device's receipt stream.

    The sender knows its own send times, so an ack's age identifies it: an
    event whose oldest probe waited longer than ``late_threshold_ms`` seeds
    a flush, and arrival-adjacent events above ``extend_threshold_ms``
    (default a third of the seed threshold, i.e. one probe interval for the
    canonical 3x gap threshold) belong to the same backlog - that covers
    the newest queued probe, which is only marginally overdue.  Prompt acks
    for probes sent after the reconnect stay out even when they land right
    next to the flush.
    """
    if extend_threshold_ms is None:
        extend_threshold_ms = max(1, late_threshold_ms // 3)
    send_at = {s.probe_id: s.send_at for s in samples}
    candidates: List[Tuple[ReceiptEvent, bool]] = []
    for event in receipts:
        if event.kind != ReceiptKind.DEVICE_ACK or event.device_index != device_index:
            continue
        delays = [
            event.observed_at - send_at[pid] for pid in event.probe_ids if pid in send_at
        ]
        if not delays:
            continue
        age = max(delays)
        if age > extend_threshold_ms:
            candidates.append((event, age > late_threshold_ms))
    candidates.sort(key=lambda pair: pair[0].observed_at)
    bursts: List[List[ReceiptEvent]] = []
    current: List[ReceiptEvent] = []
    current_seeded = False
    for event, seeds in candidates:
        if current and event.observed_at - current[-1].observed_at > burst_gap_ms:
            if current_seeded:
                bursts.append(current)
            current, current_seeded = [], False
        current.append(event)
        current_seeded = current_seeded or seeds
    if current and current_seeded:
        bursts.append(current)
    return bursts


# -- device directory tracking -------------------------------------------------


class DirectoryEventKind(str, Enum):
    DEVICE_ADDED = "device_added"
    DEVICE_REMOVED = "device_removed"


@dataclass(frozen=True)
class DirectoryEvent:
    time_ms: int
    kind: DirectoryEventKind
    index: int
    is_newest: bool = False  # index above every previously seen one

    def to_dict(self) -> dict:
        return {
            "time_ms": self.time_ms,
            "kind": self.kind.value,
            "index": self.index,
            "is_newest": self.is_newest,
        }


def track_directory_events(
    snapshots: Sequence[Tuple[int, Sequence[int]]]
) -> List[DirectoryEvent]:
    """Diff a chronological series of directory snapshots into add/remove
    events, flagging additions whose index exceeds everything seen before
    (newer or potentially just temporary sessions)."""
    events: List[DirectoryEvent] = []
    seen: set = set()
    prev: Optional[set] = None
    for t, indices in snapshots:
        current = set(indices)
        if prev is not None:
            for idx in sorted(current - prev):
                if idx in seen:
                    raise DirectoryIntegrityError(
                        f"device index {idx} reappeared at {t} ms; indices are never reused"
                    )
                events.append(
                    DirectoryEvent(
                        t,
                        DirectoryEventKind.DEVICE_ADDED,
                        idx,
                        is_newest=idx > max(seen, default=-1),
                    )
                )
            for idx in sorted(prev - current):
                events.append(DirectoryEvent(t, DirectoryEventKind.DEVICE_REMOVED, idx))
        seen |= current
        prev = current
    return events


# -- geolocation arithmetic ------------------------------------------------------


def estimate_server_to_victim_rtt(sample: RttSample) -> Optional[int]:
    """Server-to-victim RTT share: total device RTT minus the sender-to-server
    RTT.  Coarse-geolocation feature; bucketing into latency bands is up to
    the caller.  None when the device never acked."""
    if sample.device_ack_at is None or sample.server_ack_at is None:
        return None
    return sample.device_rtt_ms - sample.server_rtt_ms


# -- within-state level shifts ----------------------------------------------------


@dataclass(frozen=True)
class LevelShift:
    time_ms: int
    delta_ms: float


def detect_level_shifts(
    times: Sequence[int],
    values: Sequence[float],
    min_shift_ms: float,
    window: int = 8,
) -> List[LevelShift]:
    """Locate sustained RTT level changes inside a stationary stretch.

    Scans median differences over sliding pre/post windows and refines each
    detection with an exact two-mean least-squares split, which pins the
    change point to within about one sample for shifts well above the
    noise floor.  Used to spot access-technology handovers that shift the
    RTT floor without changing the activity state.
    """
    n = len(values)
    if n < 2 * window:
        return []
    stats: List[float] = [0.0] * n
    for i in range(window, n - window + 1):
        pre = median(values[i - window : i])
        post = median(values[i : i + window])
        stats[i] = post - pre
    shifts: List[LevelShift] = []
    i = window
    while i <= n - window:
        if abs(stats[i]) >= min_shift_ms:
            # Group contiguous over-threshold stats with one sign; keep peak.
            j = i
            peak = i
            while j <= n - window and abs(stats[j]) >= min_shift_ms and (
                stats[j] > 0
            ) == (stats[i] > 0):
                if abs(stats[j]) > abs(stats[peak]):
                    peak = j
                j += 1
            refined = _refine_split(values, peak, window)
            shifts.append(LevelShift(times[refined], stats[peak]))
            i = j
        else:
            i += 1
    return shifts


def _refine_split(values: Sequence[float], center: int, window: int) -> int:
    lo = max(1, center - window)
    hi = min(len(values) - 1, center + window)
    best, best_sse = center, math.inf
    for s in range(lo, hi + 1):
        left = values[max(0, s - 2 * window) : s]
        right = values[s : min(len(values), s + 2 * window)]
        if not left or not right:
            continue
        ml = sum(left) / len(left)
        mr = sum(right) / len(right)
        sse = sum((v - ml) ** 2 for v in left) + sum((v - mr) ** 2 for v in right)
        if sse < best_sse:
            best, best_sse = s, sse
    return best

"""Paired baseline/mitigated scenario evaluation.

Runs the same scenario twice under the same seed, once with all
countermeasures off and once with the requested configuration, and scores
the attacker-side metrics against the simulator's ground truth.
"""

from __future__ import annotations

import copy
from typing import Dict, List, Optional, Tuple

from .catalog import Catalog, load_catalog
from .devices import ActivityState
from .inference import (
    LABEL_OFFLINE,
    LABEL_ONLINE,
    LABEL_UNKNOWN,
    RECEIPT_MATRIX,
    StateClassifierModel,
    backlog_flush_events,
    build_threshold_bands,
    detect_online_intervals,
    fingerprint_platform,
    per_sample_labels,
)
from .mitigation import MitigationConfig, harmonized_matrix
from .prober import RttSample, split_by_device
from .protocol import ReceiptKind
from .scenario import Scenario
from .simulator import SimulationRun, Simulator


def find_flush_bursts(run: SimulationRun, device_index, late_threshold_ms: Optional[int] = None) -> List[list]:
    """Backlog flush bursts for one device, with at least two probes each."""
    if late_threshold_ms is None:
        sends = sorted({s.send_at for s in run.samples})
        gaps = sorted(b - a for a, b in zip(sends, sends[1:]) if b > a)
        interval = gaps[len(gaps) // 2] if gaps else 1000
        late_threshold_ms = 3 * interval
    bursts = backlog_flush_events(run.receipts, run.samples, device_index, late_threshold_ms)
    return [b for b in bursts if sum(len(e.probe_ids) for e in b) >= 2]


def sent_order_of(samples: List[RttSample]) -> List[str]:
    return sorted({s.probe_id for s in samples})


def state_accuracy(
    run: SimulationRun,
    device_index: int,
    smoothing_window: int = 5,
    bands: Optional[dict] = None,
) -> Optional[float]:
    """Per-sample agreement between banded classification and ground truth.

    None when the device produced fewer acked samples than the smoothing
    window (nothing observable to classify).
    """
    session = run.sessions[device_index]
    stream = [s for s in run.samples if s.device_index == device_index]
    acked = [s for s in stream if s.device_ack_at is not None]
    if len(acked) < smoothing_window:
        return None
    if bands is None:
        truth_states = {
            seg["state"]
            for seg in run.ground_truth["devices"][str(device_index)]["states"]
            if seg["state"] != ActivityState.OFFLINE.value
        }
        states = [s for s in session.profile.delay_by_state if s.value in truth_states]
        if len(states) < 2:
            states = list(session.profile.delay_by_state)
        bands = build_threshold_bands(session.profile, states=states)
    model = StateClassifierModel(bands=bands, smoothing_window=smoothing_window)
    labels = per_sample_labels(acked, model)
    truth = [
        (seg["start_ms"], seg["end_ms"], seg["state"])
        for seg in run.ground_truth["devices"][str(device_index)]["states"]
    ]
    hits = 0
    total = 0
    for t, label in labels:
        actual = _label_at(truth, t)
        if actual is None or actual == ActivityState.OFFLINE.value:
            continue
        total += 1
        if label == actual:
            hits += 1
    return hits / total if total else None


def _label_at(segments: List[Tuple[int, int, str]], t: int) -> Optional[str]:
    for start, end, label in segments:
        if start <= t < end:
            return label
    return None


def online_detect_error(run: SimulationRun, device_index: int) -> Optional[float]:
    """Fraction of probe instants whose online/offline call disagrees with
    the ground truth.  None when the stream is entirely unobservable."""
    stream = [s for s in run.samples if s.device_index == device_index]
    if not stream:
        return None
    sends = sorted({s.send_at for s in stream})
    gaps = sorted(b - a for a, b in zip(sends, sends[1:]) if b > a)
    interval = gaps[len(gaps) // 2] if gaps else 1000
    segments = detect_online_intervals(stream, 3 * interval)
    if all(seg.label == LABEL_UNKNOWN for seg in segments):
        return None
    truth = [
        (seg["start_ms"], seg["end_ms"], seg["state"])
        for seg in run.ground_truth["devices"][str(device_index)]["states"]
    ]
    wrong = 0
    for t in sends:
        actual_online = _label_at(truth, t) != ActivityState.OFFLINE.value
        detected = _detected_at(segments, t)
        detected_online = detected == LABEL_ONLINE
        if detected is None or detected == LABEL_UNKNOWN:
            detected_online = False
        if detected_online != actual_online:
            wrong += 1
    return wrong / len(sends)


def _detected_at(segments, t: int) -> Optional[str]:
    for seg in segments:
        if seg.start_ms <= t <= seg.end_ms:
            return seg.label
    return None


def fingerprint_metrics(run: SimulationRun, config: MitigationConfig) -> dict:
    """Fingerprint every device that flushed a backlog during the run."""
    matrix = RECEIPT_MATRIX
    if config.harmonized_stacking is not None:
        matrix = harmonized_matrix(RECEIPT_MATRIX, config.harmonized_stacking)
    sent_order = sent_order_of(run.samples)
    results = {}
    for idx, session in sorted(run.sessions.items()):
        bursts = find_flush_bursts(run, idx)
        if not bursts:
            continue
        largest = max(bursts, key=lambda b: sum(len(e.probe_ids) for e in b))
        fp = fingerprint_platform(largest, sent_order, matrix=matrix)
        true_row = (session.profile.app, session.profile.platform)
        results[str(idx)] = {
            "observed": fp.observed.value if fp.observed else None,
            "candidates": sorted(f"{a}/{p}" for a, p in fp.candidates),
            "true_row_in_candidates": true_row in fp.candidates,
            "informative": true_row in fp.candidates and len(fp.candidates) < len(matrix),
        }
    return results


def run_metrics(run: SimulationRun, config: MitigationConfig) -> dict:
    duration_s = run.scenario.duration_ms / 1000.0
    observable = sum(1 for s in run.samples if s.device_ack_at is not None)
    accuracies = {}
    online_errors = {}
    for idx, session in sorted(run.sessions.items()):
        if len(session.profile.delay_by_state) >= 2:
            acc = state_accuracy(run, idx)
            if acc is not None:
                accuracies[str(idx)] = round(acc, 4)
        err = online_detect_error(run, idx)
        if err is not None:
            online_errors[str(idx)] = round(err, 4)
    total_rx = sum(s.rx_bytes for s in run.sessions.values())
    return {
        "observable_samples": observable,
        "state_accuracy": accuracies,
        "state_accuracy_mean": (
            round(sum(accuracies.values()) / len(accuracies), 4) if accuracies else None
        ),
        "online_detect_error": online_errors,
        "fingerprint": fingerprint_metrics(run, config),
        "exhaustion_mb_per_h": round(total_rx * 3600.0 / duration_s / 1_000_000.0, 4),
        "notifications": run.notification_count,
        "device_ack_events": run.summary["device_ack_events"],
    }


def evaluate_mitigation(
    scenario: Scenario, config: MitigationConfig, catalog: Optional[Catalog] = None
) -> dict:
    """Run (baseline, mitigated) under one seed and report both metric sets."""
    catalog = catalog or load_catalog()
    base_scn = copy.deepcopy(scenario)
    base_scn.mitigations = MitigationConfig()
    mit_scn = copy.deepcopy(scenario)
    mit_scn.mitigations = config

    baseline_run = Simulator(base_scn, catalog).run()
    mitigated_run = Simulator(mit_scn, catalog).run()

    baseline = run_metrics(baseline_run, MitigationConfig())
    mitigated = run_metrics(mitigated_run, config)
    return {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "baseline": baseline,
        "mitigated": mitigated,
        "state_accuracy_baseline": baseline["state_accuracy_mean"],
        "state_accuracy_mitigated": mitigated["state_accuracy_mean"],
        "online_detect_error": mitigated["online_detect_error"],
        "fingerprint_success": any(
            d["informative"] for d in mitigated["fingerprint"].values()
        ),
        "exhaustion_mb_per_h": mitigated["exhaustion_mb_per_h"],
    }

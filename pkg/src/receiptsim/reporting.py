"""Trace persistence and report emission.

A run writes attacker observables (samples, receipts, directory snapshots)
and ground truth to separate files; report formats derive segment CSVs and
scatter-plot data from them.  All writers are deterministic: fixed key
order, no wall-clock timestamps.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from .inference import (
    InferredTimeline,
    StateClassifierModel,
    TimelineSegment,
    build_threshold_bands,
    classify_states,
    detect_online_intervals,
    per_sample_labels,
)
from .prober import RttSample, split_by_device, write_samples_csv, write_samples_jsonl
from .protocol import ReceiptEvent
from .simulator import SimulationRun

REPORT_FORMATS = ("summary-json", "segments-csv", "plotdata-csv")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run_outputs(run: SimulationRun, out_dir) -> Dict[str, Path]:
    """Persist one run; returns the map of artifact name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out / "events.jsonl",
        "receipts": out / "receipts.jsonl",
        "samples_jsonl": out / "samples.jsonl",
        "samples_csv": out / "samples.csv",
        "ground_truth": out / "ground_truth.json",
        "summary": out / "summary.json",
        "directory": out / "directory_snapshots.json",
    }
    with open(paths["events"], "w", encoding="utf-8") as fh:
        for record in run.event_log.records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    with open(paths["receipts"], "w", encoding="utf-8") as fh:
        for receipt in run.receipts:
            fh.write(
                json.dumps(
                    {
                        "kind": receipt.kind.value,
                        "probe_ids": list(receipt.probe_ids),
                        "device_index": receipt.device_index,
                        "observed_at": receipt.observed_at,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    write_samples_jsonl(run.samples, paths["samples_jsonl"])
    write_samples_csv(run.samples, paths["samples_csv"])
    _dump_json(run.ground_truth, paths["ground_truth"])
    _dump_json(run.summary, paths["summary"])
    _dump_json(
        [{"t_ms": t, "indices": list(indices)} for t, indices in run.directory_snapshots],
        paths["directory"],
    )
    return paths


def read_receipts_jsonl(path) -> List[ReceiptEvent]:
    from .protocol import ReceiptKind

    events: List[ReceiptEvent] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            events.append(
                ReceiptEvent(
                    kind=ReceiptKind(d["kind"]),
                    probe_ids=tuple(d["probe_ids"]),
                    device_index=d.get("device_index"),
                    observed_at=int(d["observed_at"]),
                )
            )
    return events


def default_timeline(
    run: SimulationRun,
    gap_threshold_ms: Optional[int] = None,
    smoothing_window: int = 5,
) -> InferredTimeline:
    """Evaluation-mode analysis: band classifiers built from each device's
    known profile, applied to the run's observable samples."""
    interval = _probe_interval_ms(run)
    gap = gap_threshold_ms if gap_threshold_ms is not None else 3 * interval
    timeline = InferredTimeline()
    for device_index, stream in sorted(
        split_by_device(run.samples).items(), key=lambda kv: _devkey(kv[0])
    ):
        segs: List[TimelineSegment] = list(detect_online_intervals(stream, gap))
        session = run.sessions.get(device_index) if device_index is not None else None
        acked = [s for s in stream if s.device_ack_at is not None]
        if session is not None and len(acked) >= smoothing_window:
            model = StateClassifierModel(
                bands=build_threshold_bands(session.profile),
                smoothing_window=smoothing_window,
            )
            segs.extend(classify_states(stream, model))
        timeline.per_device[device_index] = segs
    return timeline


def _probe_interval_ms(run: SimulationRun) -> int:
    sends = sorted({s.send_at for s in run.samples})
    if len(sends) < 2:
        return 1000
    gaps = [b - a for a, b in zip(sends, sends[1:]) if b > a]
    gaps.sort()
    return gaps[len(gaps) // 2] if gaps else 1000


def _devkey(idx) -> int:
    return -1 if idx is None else idx


def write_report(run: SimulationRun, out_dir, fmt: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "summary-json":
        path = out / "summary.json"
        _dump_json(run.summary, path)
        return path
    if fmt == "segments-csv":
        path = out / "segments.csv"
        timeline = default_timeline(run)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["device_index", "start_ms", "end_ms", "label", "confidence"])
            for device_index, segs in sorted(
                timeline.per_device.items(), key=lambda kv: _devkey(kv[0])
            ):
                for seg in segs:
                    writer.writerow(
                        [
                            "" if device_index is None else device_index,
                            seg.start_ms,
                            seg.end_ms,
                            seg.label,
                            f"{seg.confidence:.4f}",
                        ]
                    )
        return path
    if fmt == "plotdata-csv":
        path = out / "plotdata.csv"
        _write_plotdata(run, path)
        return path
    raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")


def _write_plotdata(run: SimulationRun, path: Path) -> None:
    """(t, rtt, ground_truth_label, inferred_label) rows per acked sample."""
    truth = {
        int(idx): [(s["start_ms"], s["end_ms"], s["state"]) for s in dev["states"]]
        for idx, dev in run.ground_truth["devices"].items()
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_index", "t_ms", "rtt_ms", "ground_truth_label", "inferred_label"])
        for device_index, stream in sorted(
            split_by_device(run.samples).items(), key=lambda kv: _devkey(kv[0])
        ):
            acked = [s for s in stream if s.device_ack_at is not None]
            if not acked:
                continue
            session = run.sessions.get(device_index) if device_index is not None else None
            labels: Dict[int, str] = {}
            if session is not None and len(acked) >= 5:
                model = StateClassifierModel(
                    bands=build_threshold_bands(session.profile), smoothing_window=5
                )
                labels = dict(per_sample_labels(acked, model))
            for s in acked:
                truth_key = device_index if device_index is not None else -1
                writer.writerow(
                    [
                        "" if device_index is None else device_index,
                        s.send_at,
                        s.device_rtt_ms,
                        _truth_label(truth.get(truth_key, []), s.send_at),
                        labels.get(s.send_at, ""),
                    ]
                )


def _truth_label(segments, t: int) -> str:
    for start, end, label in segments:
        if start <= t < end:
            return label
    return ""

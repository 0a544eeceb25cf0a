"""Attacker-side probing: schedules, sender-path rate limiting and the raw
RTT sample streams collected from receipts.

Samples are serialized as JSONL (one sample per line) and CSV with the
columns probe_id, device_index, send_at, server_rtt_ms, device_rtt_ms,
rejected.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from .protocol import ProbeKind

MIN_INTERVAL_MS = 50


@dataclass(frozen=True)
class ProbeSchedule:
    """A stream of probes of one kind: either a fixed ``interval_ms`` or a
    fractional ``rate_per_s`` (used by exhaustion plans), over ``duration_s``
    starting at ``start_at_ms``."""

    kind: ProbeKind
    duration_s: float
    interval_ms: Optional[int] = None
    rate_per_s: Optional[float] = None
    payload_bytes: int = 0
    start_at_ms: int = 0
    ref_valid: Optional[bool] = None  # default derived from kind

    def __post_init__(self) -> None:
        if (self.interval_ms is None) == (self.rate_per_s is None):
            raise ValueError("exactly one of interval_ms or rate_per_s must be set")
        if self.interval_ms is not None and self.interval_ms < MIN_INTERVAL_MS:
            raise ValueError(f"interval_ms must be >= {MIN_INTERVAL_MS}")
        if self.rate_per_s is not None and self.rate_per_s * MIN_INTERVAL_MS > 1000.0:
            raise ValueError(f"rate_per_s implies an interval below {MIN_INTERVAL_MS} ms")
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if self.payload_bytes < 0:
            raise ValueError("payload_bytes must be >= 0")

    @property
    def effective_ref_valid(self) -> bool:
        if self.ref_valid is not None:
            return self.ref_valid
        return self.kind != ProbeKind.INVALID_REF_REACTION

    def injection_times(self) -> List[int]:
        """Ideal send instants (ms), before any sender-side rate limiting."""
        duration_ms = self.duration_s * 1000.0
        times: List[int] = []
        if self.interval_ms is not None:
            n = int(duration_ms // self.interval_ms)
            if duration_ms % self.interval_ms:
                n += 1
            times = [self.start_at_ms + i * self.interval_ms for i in range(n)]
        else:
            assert self.rate_per_s is not None
            n = int(self.duration_s * self.rate_per_s + 1e-9)
            times = [self.start_at_ms + int(i * 1000.0 / self.rate_per_s) for i in range(n)]
        return times


class LimiterModel(str, Enum):
    NONE = "none"
    QUEUE_ABOVE_RATE = "queue_above_rate"


@dataclass
class SenderRateLimiter:
    """Token bucket in front of the sender's uplink.

    ``NONE`` never delays.  ``QUEUE_ABOVE_RATE`` queues FIFO so the
    long-run departure rate never exceeds the sustained threshold, while
    short bursts up to ``burst_allowance`` pass through untouched.
    """

    model: LimiterModel = LimiterModel.NONE
    sustained_threshold_per_s: float = 1.0
    burst_allowance: int = 30

    @classmethod
    def none(cls) -> "SenderRateLimiter":
        return cls(model=LimiterModel.NONE)

    @classmethod
    def queue_above_rate(cls, threshold_per_s: float, burst: int) -> "SenderRateLimiter":
        return cls(
            model=LimiterModel.QUEUE_ABOVE_RATE,
            sustained_threshold_per_s=threshold_per_s,
            burst_allowance=burst,
        )

    def departure_times(self, injection_times: Sequence[int]) -> List[int]:
        if self.model == LimiterModel.NONE:
            return list(injection_times)
        rate = self.sustained_threshold_per_s / 1000.0  # tokens per ms
        tokens = float(self.burst_allowance)
        clock = injection_times[0] if injection_times else 0
        departures: List[int] = []
        for t in injection_times:
            ready = max(t, departures[-1] if departures else t)
            tokens = min(self.burst_allowance, tokens + (ready - clock) * rate)
            clock = ready
            if tokens >= 1.0:
                tokens -= 1.0
                departures.append(ready)
            else:
                wait_ms = (1.0 - tokens) / rate
                depart = ready + int(wait_ms + 0.999999)  # ceil to whole ms
                tokens = min(self.burst_allowance, tokens + (depart - clock) * rate) - 1.0
                clock = depart
                departures.append(depart)
        return departures


def default_limiter_for(policy_name: str) -> SenderRateLimiter:
    # Sustained throughput cap with modest burst room on the rate-limited
    # service; the others let high-frequency streams through untouched.
    if policy_name == "signal_like":
        return SenderRateLimiter.queue_above_rate(threshold_per_s=1.0, burst=30)
    return SenderRateLimiter.none()


@dataclass
class RttSample:
    """Send/ack timestamps for one (probe, device) pair, all in ms.

    ``device_index`` is None for account-synchronized receipts; ``rejected``
    carries the server's rejection reason when the probe never left the
    sending queue ('payload', 'max_edits', 'blocked').
    """

    probe_id: str
    device_index: Optional[int]
    send_at: int
    server_ack_at: Optional[int] = None
    device_ack_at: Optional[int] = None
    rejected: Optional[str] = None

    @property
    def server_rtt_ms(self) -> Optional[int]:
        if self.server_ack_at is None:
            return None
        return self.server_ack_at - self.send_at

    @property
    def device_rtt_ms(self) -> Optional[int]:
        if self.device_ack_at is None:
            return None
        return self.device_ack_at - self.send_at

    def to_dict(self) -> dict:
        return {
            "probe_id": self.probe_id,
            "device_index": self.device_index,
            "send_at": self.send_at,
            "server_ack_at": self.server_ack_at,
            "device_ack_at": self.device_ack_at,
            "rejected": self.rejected,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RttSample":
        return cls(
            probe_id=d["probe_id"],
            device_index=d.get("device_index"),
            send_at=int(d["send_at"]),
            server_ack_at=d.get("server_ack_at"),
            device_ack_at=d.get("device_ack_at"),
            rejected=d.get("rejected"),
        )


def write_samples_jsonl(samples: Iterable[RttSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_samples_jsonl(path) -> List[RttSample]:
    out: List[RttSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RttSample.from_dict(json.loads(line)))
    return out


CSV_COLUMNS = ["probe_id", "device_index", "send_at", "server_rtt_ms", "device_rtt_ms", "rejected"]


def write_samples_csv(samples: Iterable[RttSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for s in samples:
            writer.writerow(
                [
                    s.probe_id,
                    "" if s.device_index is None else s.device_index,
                    s.send_at,
                    "" if s.server_rtt_ms is None else s.server_rtt_ms,
                    "" if s.device_rtt_ms is None else s.device_rtt_ms,
                    s.rejected or "",
                ]
            )


def read_samples_csv(path) -> List[RttSample]:
    out: List[RttSample] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            send_at = int(row["send_at"])
            server_rtt = row.get("server_rtt_ms") or None
            device_rtt = row.get("device_rtt_ms") or None
            out.append(
                RttSample(
                    probe_id=row["probe_id"],
                    device_index=int(row["device_index"]) if row.get("device_index") else None,
                    send_at=send_at,
                    server_ack_at=send_at + int(server_rtt) if server_rtt else None,
                    device_ack_at=send_at + int(device_rtt) if device_rtt else None,
                    rejected=row.get("rejected") or None,
                )
            )
    return out


def split_by_device(samples: Iterable[RttSample]) -> dict:
    """Group samples into per-device streams, each sorted by send time."""
    streams: dict = {}
    for s in samples:
        streams.setdefault(s.device_index, []).append(s)
    for stream in streams.values():
        stream.sort(key=lambda s: (s.send_at, s.probe_id))
    return streams

"""Latency model for the two-server message path.

A message travels sender -> sender's messaging server -> receiver's
messaging server -> receiver; receipts take the reverse path.  When both
accounts are pinned to the same messaging server the inter-server hop
disappears.  Edge nodes are kept as opaque labels: they act as entry
points only and their latency share is folded into the access legs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

from .protocol import AccountId


class DistKind(str, Enum):
    CONSTANT = "constant"
    NORMAL = "normal"
    LOGNORMAL = "lognormal"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class LatencyDistribution:
    """Sampling spec for one latency term, truncated below at ``min_ms``."""

    kind: DistKind
    mean_ms: float = 0.0
    stddev_ms: float = 0.0
    table: Tuple[float, ...] = ()
    min_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.min_ms < 0:
            raise ValueError("min_ms must be >= 0")
        if self.kind == DistKind.EMPIRICAL and not self.table:
            raise ValueError("empirical distribution needs a non-empty table")
        if self.kind == DistKind.LOGNORMAL and self.mean_ms <= 0:
            raise ValueError("lognormal mean must be > 0")
        if self.stddev_ms < 0:
            raise ValueError("stddev_ms must be >= 0")

    @classmethod
    def constant(cls, value_ms: float) -> "LatencyDistribution":
        if value_ms < 0:
            raise ValueError("constant latency must be >= 0")
        return cls(DistKind.CONSTANT, mean_ms=value_ms)

    @classmethod
    def normal(cls, mean_ms: float, stddev_ms: float, min_ms: float = 0.0) -> "LatencyDistribution":
        return cls(DistKind.NORMAL, mean_ms=mean_ms, stddev_ms=stddev_ms, min_ms=min_ms)

    @classmethod
    def lognormal(cls, mean_ms: float, stddev_ms: float, min_ms: float = 0.0) -> "LatencyDistribution":
        return cls(DistKind.LOGNORMAL, mean_ms=mean_ms, stddev_ms=stddev_ms, min_ms=min_ms)

    @classmethod
    def empirical(cls, table: Sequence[float], min_ms: float = 0.0) -> "LatencyDistribution":
        if not table:
            raise ValueError("empirical distribution needs a non-empty table")
        return cls(DistKind.EMPIRICAL, mean_ms=sum(table) / len(table), table=tuple(table), min_ms=min_ms)

    @property
    def mean(self) -> float:
        return self.mean_ms

    def sample(self, rng: random.Random) -> float:
        if self.kind == DistKind.CONSTANT:
            value = self.mean_ms
        elif self.kind == DistKind.NORMAL:
            value = rng.gauss(self.mean_ms, self.stddev_ms)
        elif self.kind == DistKind.LOGNORMAL:
            # Moment-matched underlying parameters for the requested
            # arithmetic mean/stddev.
            ratio = (self.stddev_ms / self.mean_ms) ** 2
            sigma2 = math.log1p(ratio)
            mu = math.log(self.mean_ms) - sigma2 / 2.0
            value = rng.lognormvariate(mu, math.sqrt(sigma2))
        else:
            value = self.table[rng.randrange(len(self.table))]
        return max(value, self.min_ms)


class LinkTech(str, Enum):
    WIFI = "wifi"
    LTE = "lte"
    LAN = "lan"
    OFFLINE = "offline"


# A lost transmission is retried after a fixed timeout.
RETRANSMIT_DELAY_MS = 1000.0


@dataclass(frozen=True)
class AccessLink:
    """Last-mile link of one endpoint.

    ``jitter_scale`` widens or narrows the spread around each direction's
    mean without moving it, so two links can share a mean but differ in
    stability (variance scales with the square of the factor).  A non-zero
    ``loss_probability`` produces occasional outliers: each lost attempt
    adds a fixed retransmit delay before the packet gets through.
    """

    tech: LinkTech
    up: LatencyDistribution
    down: LatencyDistribution
    jitter_scale: float = 1.0
    loss_probability: float = 0.0

    def __post_init__(self) -> None:
        if self.jitter_scale < 0:
            raise ValueError("jitter_scale must be >= 0")
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must be in [0, 1)")

    @property
    def is_offline(self) -> bool:
        return self.tech == LinkTech.OFFLINE

    def _leg(self, dist: LatencyDistribution, rng: random.Random) -> float:
        delay = 0.0
        if self.loss_probability > 0.0:
            while rng.random() < self.loss_probability:
                delay += RETRANSMIT_DELAY_MS
        raw = dist.sample(rng)
        value = dist.mean + (raw - dist.mean) * self.jitter_scale
        return delay + max(value, dist.min_ms)

    def sample_up(self, rng: random.Random) -> float:
        return self._leg(self.up, rng)

    def sample_down(self, rng: random.Random) -> float:
        return self._leg(self.down, rng)


class PinStrategy(str, Enum):
    KEEP_COOKIE = "keep_cookie"
    RANDOM = "random"


@dataclass
class ServerTopology:
    """Messaging-server labels, inter-server latencies and routing pins."""

    messaging_servers: Tuple[str, ...]
    edge_nodes: Tuple[str, ...] = ()
    hop_latency: Dict[Tuple[str, str], LatencyDistribution] = field(default_factory=dict)
    default_hop: LatencyDistribution = field(
        default_factory=lambda: LatencyDistribution.normal(40.0, 3.0, min_ms=10.0)
    )
    routing_pins: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.messaging_servers:
            raise ValueError("topology needs at least one messaging server")
        for account, label in self.routing_pins.items():
            if label not in self.messaging_servers:
                raise ValueError(f"pin for {account} names unknown server {label!r}")

    def hop(self, a: str, b: str) -> LatencyDistribution:
        # Latencies are symmetric unless an explicit (a, b) override exists.
        if (a, b) in self.hop_latency:
            return self.hop_latency[(a, b)]
        if (b, a) in self.hop_latency:
            return self.hop_latency[(b, a)]
        return self.default_hop

    def pin_of(self, account: AccountId) -> Optional[str]:
        return self.routing_pins.get(account.value)

    def update_routing_pin(
        self, account: AccountId, strategy: PinStrategy, rng: random.Random
    ) -> str:
        """Resolve (and store) the messaging server for an account.

        The cookie strategy keeps an existing pin; a fresh account gets a
        uniformly random server either way, mirroring the empty-cookie
        first connection.
        """
        current = self.routing_pins.get(account.value)
        if strategy == PinStrategy.KEEP_COOKIE and current is not None:
            return current
        label = self.messaging_servers[rng.randrange(len(self.messaging_servers))]
        self.routing_pins[account.value] = label
        return label


@dataclass(frozen=True)
class Endpoint:
    """An account attached to the network through an access link."""

    account: AccountId
    link: AccessLink


class Unreachable(Exception):
    """The destination endpoint has no connectivity."""


def sample_path_delay(
    src: Endpoint,
    dst: Endpoint,
    topology: ServerTopology,
    rng: random.Random,
) -> Optional[float]:
    """One-way delay src -> (server) -> (server) -> dst in milliseconds.

    Returns None when either endpoint is offline (the message would be
    queued rather than delivered).  Deterministic for a fixed seed and
    call order.
    """
    if src.link.is_offline or dst.link.is_offline:
        return None
    src_pin = topology.pin_of(src.account)
    dst_pin = topology.pin_of(dst.account)
    if src_pin is None or dst_pin is None:
        raise ValueError("both endpoints must be pinned to a messaging server")
    delay = src.link.sample_up(rng)
    if src_pin != dst_pin:
        delay += topology.hop(src_pin, dst_pin).sample(rng)
    delay += dst.link.sample_down(rng)
    return delay


# Messaging-server location codes observed for the largest deployment.
DEFAULT_MESSAGING_SERVERS: Tuple[str, ...] = (
    "odn",
    "cln",
    "lla",
    "frc",
    "atn",
    "nao",
    "rva",
    "vll",
)


def default_topology() -> ServerTopology:
    return ServerTopology(messaging_servers=DEFAULT_MESSAGING_SERVERS)

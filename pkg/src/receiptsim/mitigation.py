"""Countermeasure configuration and the paired baseline/mitigated
evaluation harness.

Each switch is independently toggleable; the all-off configuration is the
identity transform and must leave every attacker-side metric bit-identical
to the unmitigated run under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

from .catalog import parse_latency
from .devices import PlatformProfile, StackingPolicy
from .netmodel import LatencyDistribution
from .prober import SenderRateLimiter
from .protocol import MessengerPolicy


@dataclass(frozen=True)
class MitigationConfig:
    """Countermeasure switches applied on top of a baseline policy.

    * ``restrict_to_contacts``: drop messages from unknown senders before
      delivery, so strangers get no receipts at all.
    * ``receipt_delay_noise``: additive random delay on every device-ack
      departure (client-side).
    * ``strict_validation``: the receiving client discards invalid-reference
      and out-of-window probes without acknowledging them.
    * ``sender_rate_limit``: server-side override of the sender limiter.
    * ``receiver_flood_threshold_per_min``: inbound message rate that makes
      the victim client raise a UI notification and temporarily block the
      sender.
    * ``synchronized_receipts``: devices sync before acking, so each probe
      produces exactly one receipt.
    * ``harmonized_stacking``: force every platform onto one stacking
      behaviour, destroying the fingerprinting observable.
    """

    restrict_to_contacts: bool = False
    receipt_delay_noise: Optional[LatencyDistribution] = None
    strict_validation: bool = False
    sender_rate_limit: Optional[SenderRateLimiter] = None
    receiver_flood_threshold_per_min: Optional[int] = None
    flood_block_duration_s: float = 900.0
    synchronized_receipts: bool = False
    harmonized_stacking: Optional[StackingPolicy] = None

    @property
    def is_baseline(self) -> bool:
        return self == MitigationConfig()

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "MitigationConfig":
        if not raw:
            return cls()
        noise = raw.get("receipt_delay_noise")
        limiter = raw.get("sender_rate_limit")
        return cls(
            restrict_to_contacts=bool(raw.get("restrict_to_contacts", False)),
            receipt_delay_noise=parse_latency(noise) if noise else None,
            strict_validation=bool(raw.get("strict_validation", False)),
            sender_rate_limit=(
                SenderRateLimiter.queue_above_rate(
                    float(limiter["threshold_per_s"]), int(limiter.get("burst", 30))
                )
                if limiter
                else None
            ),
            receiver_flood_threshold_per_min=raw.get("receiver_flood_threshold_per_min"),
            flood_block_duration_s=float(raw.get("flood_block_duration_s", 900.0)),
            synchronized_receipts=bool(raw.get("synchronized_receipts", False)),
            harmonized_stacking=(
                StackingPolicy(raw["harmonized_stacking"])
                if raw.get("harmonized_stacking")
                else None
            ),
        )


def uniform_noise(max_s: float) -> LatencyDistribution:
    """Uniform 0..max_s receipt delay noise, expressed as an empirical grid."""
    steps = 256
    table = [i * max_s * 1000.0 / (steps - 1) for i in range(steps)]
    return LatencyDistribution.empirical(table)


def apply_mitigations(
    policy: MessengerPolicy,
    profiles: Dict[str, PlatformProfile],
    config: MitigationConfig,
) -> Tuple[MessengerPolicy, Dict[str, PlatformProfile]]:
    """Transform a policy/profile set according to the mitigation switches.

    Runtime-only switches (noise, flood threshold, limiter override) are
    consumed by the simulator directly from the config.
    """
    if config.strict_validation:
        policy = replace(policy, strict_validation=True, invalid_ref_acked=False)
    if config.restrict_to_contacts:
        policy = replace(policy, restrict_to_contacts=True)
    if config.synchronized_receipts:
        policy = replace(policy, per_device_receipts=False)
    if config.harmonized_stacking is not None:
        profiles = {
            name: replace(profile, stacking=config.harmonized_stacking)
            for name, profile in profiles.items()
        }
    return policy, profiles


def harmonized_matrix(
    matrix: Dict[Tuple[str, str], Tuple[StackingPolicy, StackingPolicy]],
    forced: StackingPolicy,
) -> Dict[Tuple[str, str], Tuple[StackingPolicy, StackingPolicy]]:
    """The receipt matrix as it looks once every client stacks identically."""
    return {row: (forced, forced) for row in matrix}

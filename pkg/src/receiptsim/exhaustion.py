"""Resource-exhaustion attack modeling: traffic arithmetic and simulated
runs that drive a victim device's data counter and battery.

MB means 10^6 bytes everywhere, matching how consumable-data figures are
usually quoted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .catalog import Catalog, load_catalog
from .mitigation import MitigationConfig
from .prober import ProbeSchedule, SenderRateLimiter, default_limiter_for
from .protocol import (
    ENVELOPE_OVERHEAD_BYTES,
    MessengerPolicy,
    ProbeKind,
    REACTION_KINDS,
)
from .scenario import AttackerSpec, AttackerType, DeviceSpec, Scenario, TopologySpec, VictimSpec

MB = 1_000_000.0


class PlanError(ValueError):
    """The exhaustion plan violates a server-side limit."""


@dataclass(frozen=True)
class ExhaustionPlan:
    """A sustained large-payload probe stream against one victim."""

    policy: MessengerPolicy
    kind: ProbeKind
    payload_bytes: int
    rate_per_s: float
    duration_s: float

    def validate(self) -> None:
        if self.kind == ProbeKind.DELETE:
            raise PlanError("deletes carry no payload and cannot inflate traffic")
        limit = self.policy.payload_limit(self.kind)
        if self.payload_bytes > limit:
            raise PlanError(
                f"payload {self.payload_bytes} B exceeds the {self.policy.name} "
                f"limit of {limit} B for {self.kind.value}"
            )
        if self.rate_per_s < 0 or self.duration_s < 0:
            raise PlanError("rate and duration must be >= 0")


@dataclass(frozen=True)
class TrafficPrediction:
    bytes_per_s: float
    mb_per_h: float


def predict_traffic(plan: ExhaustionPlan) -> TrafficPrediction:
    """Closed-form victim traffic: rate x (payload + envelope overhead)."""
    plan.validate()
    bytes_per_s = plan.rate_per_s * (plan.payload_bytes + ENVELOPE_OVERHEAD_BYTES)
    return TrafficPrediction(bytes_per_s=bytes_per_s, mb_per_h=bytes_per_s * 3600.0 / MB)


def rate_for_mb_per_h(mb_per_h: float, payload_bytes: int) -> float:
    """Probe rate whose payload stream alone reaches the given volume."""
    return mb_per_h * MB / 3600.0 / payload_bytes


@dataclass
class ExhaustionResult:
    victim_rx_bytes: int
    battery_delta_pct: float
    ui_notifications: int
    predicted: TrafficPrediction
    probes_sent: int
    device_ack_events: int = 0

    def to_dict(self) -> dict:
        return {
            "victim_rx_bytes": self.victim_rx_bytes,
            "battery_delta_pct": round(self.battery_delta_pct, 4),
            "ui_notifications": self.ui_notifications,
            "predicted_bytes_per_s": round(self.predicted.bytes_per_s, 3),
            "predicted_mb_per_h": round(self.predicted.mb_per_h, 3),
            "probes_sent": self.probes_sent,
            "device_ack_events": self.device_ack_events,
        }


def run_exhaustion(
    plan: ExhaustionPlan,
    profile_name: str,
    catalog: Optional[Catalog] = None,
    seed: int = 0,
    link_name: str = "wifi",
    limiter: Optional[SenderRateLimiter] = None,
    mitigations: Optional[MitigationConfig] = None,
) -> ExhaustionResult:
    """Simulate the plan against a single screen-off victim device.

    The victim sits on standby for the whole run; received bytes and the
    linear battery model produce the reported deltas.  Reaction plans stay
    invisible, so the notification count is part of the result for
    stealth auditing.
    """
    plan.validate()
    if plan.kind not in REACTION_KINDS:
        raise PlanError("exhaustion plans must use stealthy reaction probes")
    if plan.duration_s == 0:
        return ExhaustionResult(0, 0.0, 0, predict_traffic(plan), 0)
    catalog = catalog or load_catalog()
    schedule = ProbeSchedule(
        kind=plan.kind,
        duration_s=plan.duration_s,
        rate_per_s=plan.rate_per_s,
        payload_bytes=plan.payload_bytes,
    )
    scenario = Scenario(
        name=f"exhaustion-{plan.policy.name}-{profile_name}",
        seed=seed,
        policy_name=plan.policy.name,
        duration_ms=max(1, int(plan.duration_s * 1000)),
        attacker=AttackerSpec(
            kind=AttackerType.SPOOKY_STRANGER,
            schedules=[schedule],
            limiter=limiter if limiter is not None else default_limiter_for(plan.policy.name),
        ),
        victim=VictimSpec(
            account="victim",
            devices=[
                DeviceSpec(
                    index=plan.policy.main_device_index,
                    profile_name=profile_name,
                    link_name=link_name,
                    start_state=None,
                )
            ],
        ),
        topology=TopologySpec(attacker_pin=None, victim_pin=None),
        mitigations=mitigations or MitigationConfig(),
    )
    # Standby victim: screen off for the whole run.
    from .devices import ActivityState

    scenario.victim.devices[0].start_state = ActivityState.SCREEN_OFF

    from .simulator import Simulator

    run = Simulator(scenario, catalog).run()
    session = run.sessions[plan.policy.main_device_index]
    battery_delta = session.battery_pct - 100.0
    return ExhaustionResult(
        victim_rx_bytes=session.rx_bytes,
        battery_delta_pct=battery_delta,
        ui_notifications=run.notification_count,
        predicted=predict_traffic(plan),
        probes_sent=run.summary["probes_sent"],
        device_ack_events=run.summary["device_ack_events"],
    )

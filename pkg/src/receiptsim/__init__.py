"""receiptsim: a discrete-event simulator and analysis toolkit for the
delivery-receipt side channel of multi-device end-to-end-encrypted
messengers."""

from .catalog import Catalog, load_catalog
from .devices import (
    ActivityState,
    BatteryRates,
    DeviceSession,
    PlatformProfile,
    SleepDynamics,
    StackingPolicy,
    drain_battery,
)
from .exhaustion import ExhaustionPlan, predict_traffic, rate_for_mb_per_h, run_exhaustion
from .inference import (
    InferredTimeline,
    PlatformFingerprint,
    RECEIPT_MATRIX,
    StateClassifierModel,
    TimelineSegment,
    build_threshold_bands,
    classify_states,
    detect_online_intervals,
    estimate_server_to_victim_rtt,
    fingerprint_platform,
    track_directory_events,
)
from .mitigation import MitigationConfig, apply_mitigations, uniform_noise
from .mitigation_eval import evaluate_mitigation
from .netmodel import (
    AccessLink,
    Endpoint,
    LatencyDistribution,
    LinkTech,
    PinStrategy,
    ServerTopology,
    default_topology,
    sample_path_delay,
)
from .prober import ProbeSchedule, RttSample, SenderRateLimiter, split_by_device
from .protocol import (
    AccountId,
    DeviceDirectory,
    MessengerPolicy,
    ProbeAction,
    ProbeKind,
    ReceiptDecision,
    ReceiptEvent,
    ReceiptKind,
    StealthContext,
    elicits_receipt,
    fanout,
    is_stealthy,
    policy_by_name,
)
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario
from .simulator import SimulationRun, Simulator, run_scenario, run_schedule

__version__ = "0.1.0"

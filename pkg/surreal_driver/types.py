from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from .errors import ConfigError


class AtomicAction(str, Enum):
    STOP = "stop"
    MAINTAIN_SPEED = "maintain_speed"
    ACCELERATE = "accelerate"
    DECELERATE = "decelerate"
    LANE_CHANGE_LEFT = "lane_change_left"
    LANE_CHANGE_RIGHT = "lane_change_right"

    @property
    def is_lane_change(self) -> bool:
        return self in (AtomicAction.LANE_CHANGE_LEFT, AtomicAction.LANE_CHANGE_RIGHT)


class SignalState(str, Enum):
    RED = "red"
    YELLOW = "yellow"
    GREEN = "green"


# red -> green -> yellow -> red
NEXT_SIGNAL_STATE = {
    SignalState.RED: SignalState.GREEN,
    SignalState.GREEN: SignalState.YELLOW,
    SignalState.YELLOW: SignalState.RED,
}


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class BehaviorProfile:
    p_run_red: float = 0.05
    p_abrupt_lane_change: float = 0.02
    desired_speed: float = 11.0
    following_gap: float = 8.0
    # uniform +/- spread applied to desired_speed per NPC at spawn
    speed_jitter: float = 2.0

    def __post_init__(self):
        _check(0.0 <= self.p_run_red <= 1.0, "p_run_red must be in [0, 1]")
        _check(0.0 <= self.p_abrupt_lane_change <= 1.0, "p_abrupt_lane_change must be in [0, 1]")
        _check(self.desired_speed >= 0, "desired_speed must be >= 0")
        _check(self.following_gap > 0, "following_gap must be > 0")
        _check(self.speed_jitter >= 0, "speed_jitter must be >= 0")


@dataclass
class PedestrianProfile:
    p_jaywalk: float = 0.005
    walking_speed: float = 1.4
    lane_width: float = 3.5
    cooldown: float = 20.0

    def __post_init__(self):
        _check(0.0 <= self.p_jaywalk <= 1.0, "p_jaywalk must be in [0, 1]")
        _check(self.walking_speed > 0, "walking_speed must be > 0")
        _check(self.lane_width > 0, "lane_width must be > 0")
        _check(self.cooldown >= 0, "cooldown must be >= 0")


@dataclass
class SimConfig:
    dt: float = 0.1
    v_max: float = 15.0
    accel: float = 2.0
    decel: float = 4.0
    lane_change_duration: int = 20
    episode_duration: float = 300.0
    seed: int = 0
    decision_interval: int = 5
    npc_count: int = 12
    horizon: float = 100.0
    vehicle_length: float = 4.0
    respawn_on_collision: bool = True
    include_npc_collisions: bool = False

    def __post_init__(self):
        _check(self.dt > 0, "dt must be > 0")
        _check(self.accel > 0 and self.decel > 0, "accel and decel must be > 0")
        _check(self.v_max > 0, "v_max must be > 0")
        _check(self.lane_change_duration >= 1, "lane_change_duration must be >= 1 tick")
        _check(self.episode_duration > 0, "episode_duration must be > 0")
        _check(self.decision_interval >= 1, "decision_interval must be >= 1 tick")
        _check(self.npc_count >= 0, "npc_count must be >= 0")
        _check(self.horizon > 0, "horizon must be > 0")
        _check(self.vehicle_length > 0, "vehicle_length must be > 0")

    def ticks_for(self, seconds: float) -> int:
        return int(round(seconds / self.dt))


@dataclass
class SafetyConfig:
    mandatory_stop_distance: float = 10.0
    advisory_decel_distance: float = 20.0
    min_moving_gap: float = 1.0
    intersection_slow_speed: float = 5.0
    red_light_stop: bool = True
    red_light_margin: float = 2.0
    energy_advisory: bool = False
    decel: float = 4.0
    dt: float = 0.1

    def __post_init__(self):
        _check(
            self.mandatory_stop_distance < self.advisory_decel_distance,
            "mandatory_stop_distance must be < advisory_decel_distance",
        )
        _check(self.min_moving_gap > 0, "min_moving_gap must be > 0")
        _check(self.decel > 0 and self.dt > 0, "decel and dt must be > 0")
        _check(self.red_light_margin >= 0, "red_light_margin must be >= 0")


@dataclass
class AgentConfig:
    max_attempts: int = 3
    failure_budget: int = 20
    memory_capacity: int = 5
    guideline_max: int = 20

    def __post_init__(self):
        _check(self.max_attempts >= 1, "max_attempts must be >= 1")
        _check(self.failure_budget >= 1, "failure_budget must be >= 1")
        _check(self.memory_capacity >= 1, "memory_capacity must be >= 1")
        _check(self.guideline_max >= 1, "guideline_max must be >= 1")


@dataclass
class PolicyTable:
    """Knobs of the scripted reasoner's priority rules."""

    desired_speed: float = 12.0
    speed_tolerance: float = 1.0
    obey_mandatory: bool = True
    obey_advisories: bool = True
    use_memory: bool = True
    use_guidelines: bool = True
    # margins of a driver that has no safety criteria to lean on
    naive_stop_gap: float = 6.0
    naive_red_distance: float = 8.0
    following_margin: float = 12.0
    signal_margin: float = 3.0
    reaction_time: float = 0.5
    braking_decel: float = 4.0
    lane_change_front_margin: float = 15.0
    lane_change_rear_margin: float = 10.0
    caution_speed_factor: float = 0.7
    smooth_speed_factor: float = 0.85
    guided_slow_distance: float = 30.0
    # advisories slow the car down to this speed, not to a standstill
    advisory_speed: float = 5.0

    def __post_init__(self):
        _check(self.desired_speed > 0, "desired_speed must be > 0")
        _check(self.speed_tolerance >= 0, "speed_tolerance must be >= 0")
        _check(self.braking_decel > 0, "braking_decel must be > 0")
        _check(self.reaction_time >= 0, "reaction_time must be >= 0")
        _check(self.advisory_speed >= 0, "advisory_speed must be >= 0")
        _check(0 < self.caution_speed_factor <= 1, "caution_speed_factor must be in (0, 1]")
        _check(0 < self.smooth_speed_factor <= 1, "smooth_speed_factor must be in (0, 1]")


@dataclass
class ReasonerConfig:
    kind: Literal["scripted", "remote"] = "scripted"
    endpoint: Optional[str] = None
    model: str = "gpt-4"
    timeout: float = 30.0
    max_reply_length: int = 4000
    temperature: float = 0.0

    def __post_init__(self):
        _check(self.kind in ("scripted", "remote"), f"unknown reasoner kind: {self.kind}")
        _check(self.kind != "remote" or bool(self.endpoint), "remote reasoner requires an endpoint")
        _check(self.timeout > 0, "timeout must be > 0")
        _check(self.max_reply_length > 0, "max_reply_length must be > 0")


@dataclass
class CoachThresholds:
    stop_frequency: float = 0.1
    speed_change_frequency: float = 0.2
    override_rate: float = 0.2
    collision_count: int = 0
    coach_warmup: int = 1

    def __post_init__(self):
        _check(self.stop_frequency >= 0 and self.speed_change_frequency >= 0, "frequencies must be >= 0")
        _check(0 <= self.override_rate <= 1, "override_rate must be in [0, 1]")
        _check(self.collision_count >= 0, "collision_count must be >= 0")
        _check(self.coach_warmup >= 0, "coach_warmup must be >= 0")


@dataclass
class AppConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    npc: BehaviorProfile = field(default_factory=BehaviorProfile)
    pedestrians: PedestrianProfile = field(default_factory=PedestrianProfile)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    policy: PolicyTable = field(default_factory=PolicyTable)
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)
    coach: CoachThresholds = field(default_factory=CoachThresholds)


# --- perception -----------------------------------------------------------

@dataclass(frozen=True)
class LeadVehicle:
    distance: float
    speed: float


@dataclass(frozen=True)
class PedestrianSighting:
    distance: float
    crossing: bool


@dataclass(frozen=True)
class SignalSighting:
    state: SignalState
    distance: float


@dataclass(frozen=True)
class LanePosition:
    lane_id: str
    has_left_neighbor: bool
    has_right_neighbor: bool


@dataclass(frozen=True)
class LaneGaps:
    """Bumper-to-bumper gaps on one neighbour lane; None means no vehicle within the horizon."""

    rear: Optional[float] = None
    front: Optional[float] = None
    rear_speed: Optional[float] = None


@dataclass(frozen=True)
class AtomicScene:
    tick: int
    ego_speed: float
    lane_position: LanePosition
    destination_distance: float
    lead_vehicle: Optional[LeadVehicle] = None
    nearest_pedestrian: Optional[PedestrianSighting] = None
    signal: Optional[SignalSighting] = None
    intersection_distance: Optional[float] = None
    left_gaps: Optional[LaneGaps] = None
    right_gaps: Optional[LaneGaps] = None
    lane_changing: bool = False
    route_hint: Optional[Literal["left", "right"]] = None


# --- safety ---------------------------------------------------------------

@dataclass(frozen=True)
class Advisory:
    tag: str
    action: AtomicAction


@dataclass(frozen=True)
class SafetyVerdict:
    mandatory: Optional[AtomicAction] = None
    advisories: Tuple[Advisory, ...] = ()
    triggered_rules: Tuple[str, ...] = ()

    @property
    def is_empty(self) -> bool:
        return self.mandatory is None and not self.advisories


# --- agent ----------------------------------------------------------------

@dataclass(frozen=True)
class DecisionRecord:
    tick: int
    scene_digest: str
    proposed: AtomicAction
    final: AtomicAction
    overridden: bool
    rationale: str
    reasoner_failed: bool = False
    degraded: bool = False
    attempts: int = 1


@dataclass(frozen=True)
class Demonstration:
    situation: str
    reasoning: str
    action: AtomicAction


# --- world ----------------------------------------------------------------

@dataclass(frozen=True)
class CollisionEvent:
    tick: int
    sim_time: float
    participants: Tuple[str, str]
    ego_involved: bool
    relative_position: Literal["leading", "lateral", "pedestrian"]


# --- coach ----------------------------------------------------------------

@dataclass(frozen=True)
class Guideline:
    id: str
    text: str
    source_finding: str
    created_at: int


@dataclass(frozen=True)
class EpisodeMetrics:
    stop_frequency: float
    speed_change_frequency: float
    override_rate: float
    collision_count: int


@dataclass(frozen=True)
class Finding:
    tag: str
    value: float
    threshold: float


@dataclass(frozen=True)
class Assessment:
    quality: Literal["Good", "Bad"]
    metrics: EpisodeMetrics
    reasons: Tuple[Finding, ...] = ()


# --- harness --------------------------------------------------------------

@dataclass(frozen=True)
class ConditionSpec:
    id: Literal["A", "B", "C", "D"]
    safety_enabled: bool
    memory_enabled: bool
    guidelines_enabled: bool
    label: str = ""


@dataclass
class TickRecord:
    tick: int
    sim_time: float
    lane_id: str
    offset: float
    speed: float
    advance: float
    decision: bool
    proposed: AtomicAction
    final: AtomicAction
    overridden: bool
    reasoner_failed: bool
    degraded: bool
    rationale: str
    collisions: List[CollisionEvent]
    scene: Dict
    memory: List[Dict]


@dataclass
class TraceHeader:
    schema_version: int
    build_version: str
    seed: int
    condition: str
    config_digest: str
    start_time: float
    duration: float
    reasoner: str
    config: Dict
    network: Dict
    guidelines: List[Dict] = field(default_factory=list)
    demonstrations: List[Dict] = field(default_factory=list)
    command_schema_version: int = 1
    scene_schema_version: int = 1


@dataclass
class TraceFooter:
    total_distance: float
    total_time: float
    collisions: List[CollisionEvent]
    destinations_reached: int
    aborted: bool = False
    abort_reason: str = ""


@dataclass
class EpisodeTrace:
    header: TraceHeader
    records: List[TickRecord]
    footer: TraceFooter


@dataclass
class ConditionResult:
    condition: str
    label: str
    collisions: int
    distance: float
    time: float
    seeds: int
    aborted: int
    rate_by_distance: float
    rate_by_time: float


@dataclass
class MetricsReport:
    conditions: List[ConditionResult]
    # (baseline id, improved id) -> (by distance %, by time %)
    reductions: Dict[Tuple[str, str], Tuple[Optional[float], Optional[float]]]
    errors: List[str] = field(default_factory=list)

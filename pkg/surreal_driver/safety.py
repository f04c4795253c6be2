"""Two-tier safety criteria: a mandatory override tier and an advisory tier."""

from typing import List, Tuple

from .types import Advisory, AtomicAction, AtomicScene, SafetyConfig, SafetyVerdict, SignalState

MOVING_SPEED = 0.1

EMPTY_VERDICT = SafetyVerdict()


def criteria_text(cfg: SafetyConfig) -> str:
    """The criteria as they are stated to the driver in its system prompt."""
    return "\n".join([
        "Mandatory safety rules (these are enforced and override your decision):",
        f"- Stop if a vehicle or a crossing pedestrian is within {cfg.mandatory_stop_distance:g} meters ahead.",
        "- Stop at a red traffic light.",
        "Recommended safety rules:",
        f"- Decelerate when nearing vehicles or pedestrians within {cfg.advisory_decel_distance:g} meters.",
        f"- Slow down to {cfg.intersection_slow_speed:g} m/s or less when approaching intersections.",
        f"- Keep a minimum distance of {cfg.min_moving_gap:g} meter from moving cars.",
        "- Save energy by avoiding unnecessary speed changes.",
    ])


def braking_envelope(speed: float, cfg: SafetyConfig) -> float:
    """Distance needed to stop from `speed`, plus one tick of travel and the stop-line margin."""
    return speed * speed / (2 * cfg.decel) + speed * cfg.dt + cfg.red_light_margin


def evaluate_safety(scene: AtomicScene, cfg: SafetyConfig) -> SafetyVerdict:
    rules: List[str] = []
    advisories: List[Advisory] = []

    def advise(tag: str, action: AtomicAction) -> None:
        advisories.append(Advisory(tag, action))
        rules.append(tag)

    lead = scene.lead_vehicle
    pedestrian = scene.nearest_pedestrian
    signal = scene.signal

    if lead is not None and lead.distance < cfg.mandatory_stop_distance:
        rules.append("stop.lead_vehicle")
    if pedestrian is not None and pedestrian.crossing and pedestrian.distance < cfg.mandatory_stop_distance:
        rules.append("stop.pedestrian")
    if (
        cfg.red_light_stop
        and signal is not None
        and signal.state == SignalState.RED
        and signal.distance <= braking_envelope(scene.ego_speed, cfg)
    ):
        rules.append("stop.red_signal")
    mandatory = AtomicAction.STOP if rules else None

    if lead is not None and lead.distance < cfg.advisory_decel_distance:
        advise("slow.lead_vehicle", AtomicAction.DECELERATE)
    if pedestrian is not None and pedestrian.distance < cfg.advisory_decel_distance:
        advise("slow.pedestrian", AtomicAction.DECELERATE)
    if (
        scene.intersection_distance is not None
        and scene.intersection_distance < cfg.advisory_decel_distance
        and scene.ego_speed > cfg.intersection_slow_speed
    ):
        advise("slow.intersection", AtomicAction.DECELERATE)
    if signal is not None and signal.state == SignalState.YELLOW and signal.distance < cfg.advisory_decel_distance:
        advise("slow.yellow_signal", AtomicAction.DECELERATE)
    if lead is not None and lead.speed > MOVING_SPEED and lead.distance < cfg.min_moving_gap:
        advise("gap.min_moving", AtomicAction.DECELERATE)
    for side, gaps in (("left", scene.left_gaps), ("right", scene.right_gaps)):
        if gaps is None:
            continue
        tight_front = gaps.front is not None and gaps.front < cfg.min_moving_gap
        tight_rear = (
            gaps.rear is not None
            and gaps.rear < cfg.min_moving_gap
            and (gaps.rear_speed or 0.0) > MOVING_SPEED
        )
        if tight_front or tight_rear:
            advise(f"gap.adjacent_{side}", AtomicAction.MAINTAIN_SPEED)
    if cfg.energy_advisory and scene.ego_speed > MOVING_SPEED:
        advise("energy.smooth", AtomicAction.MAINTAIN_SPEED)

    return SafetyVerdict(mandatory=mandatory, advisories=tuple(advisories), triggered_rules=tuple(rules))


def enforce(verdict: SafetyVerdict, proposed: AtomicAction) -> Tuple[AtomicAction, bool]:
    """Apply tier 1. Advisories never override; they only inform the reasoner."""
    if verdict.mandatory is not None:
        return verdict.mandatory, proposed != verdict.mandatory
    return proposed, False


def render_safety_text(verdict: SafetyVerdict) -> str:
    if verdict.is_empty:
        return "No safety rule is triggered."
    lines = []
    if verdict.mandatory is not None:
        triggered = ", ".join(r for r in verdict.triggered_rules if r.startswith("stop."))
        lines.append(f"MANDATORY: {verdict.mandatory.value} ({triggered}).")
    for advisory in verdict.advisories:
        lines.append(f"Recommended: {advisory.action.value} ({advisory.tag}).")
    return "\n".join(lines)

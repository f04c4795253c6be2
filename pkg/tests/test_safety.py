import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surreal_driver.errors import ConfigError
from surreal_driver.safety import (
    EMPTY_VERDICT,
    braking_envelope,
    criteria_text,
    enforce,
    evaluate_safety,
    render_safety_text,
)
from surreal_driver.types import (
    Advisory,
    AtomicAction,
    AtomicScene,
    LaneGaps,
    LanePosition,
    LeadVehicle,
    PedestrianSighting,
    SafetyConfig,
    SafetyVerdict,
    SignalSighting,
    SignalState,
)

CRITERIA = SafetyConfig()


def scene(speed=10.0, **kwargs):
    return AtomicScene(
        tick=0,
        ego_speed=speed,
        lane_position=LanePosition("L", False, False),
        destination_distance=100.0,
        **kwargs,
    )


distances = st.floats(min_value=0.0, max_value=150.0, allow_nan=False)
speeds = st.floats(min_value=0.0, max_value=15.0, allow_nan=False)
scenes = st.builds(
    scene,
    speed=speeds,
    lead_vehicle=st.none() | st.builds(LeadVehicle, distance=distances, speed=speeds),
    nearest_pedestrian=st.none() | st.builds(PedestrianSighting, distance=distances, crossing=st.booleans()),
    signal=st.none() | st.builds(SignalSighting, state=st.sampled_from(SignalState), distance=distances),
    intersection_distance=st.none() | distances,
    left_gaps=st.none() | st.builds(
        LaneGaps, rear=st.none() | distances, front=st.none() | distances, rear_speed=st.none() | speeds
    ),
)


def test_close_lead_vehicle_forces_stop():
    """Test the mandatory stop for a vehicle 7 m ahead"""
    verdict = evaluate_safety(scene(lead_vehicle=LeadVehicle(7.0, 0.0)), CRITERIA)

    assert verdict.mandatory == AtomicAction.STOP
    assert "stop.lead_vehicle" in verdict.triggered_rules
    assert Advisory("slow.lead_vehicle", AtomicAction.DECELERATE) in verdict.advisories
    assert enforce(verdict, AtomicAction.ACCELERATE) == (AtomicAction.STOP, True)
    assert enforce(verdict, AtomicAction.STOP) == (AtomicAction.STOP, False)


def test_red_light_braking_envelope():
    """Test the red-light stop against the braking envelope at 10 m/s"""
    assert braking_envelope(10.0, CRITERIA) == pytest.approx(15.5)

    at_edge = evaluate_safety(scene(signal=SignalSighting(SignalState.RED, 15.5)), CRITERIA)
    beyond = evaluate_safety(scene(signal=SignalSighting(SignalState.RED, 15.6)), CRITERIA)
    no_rule = evaluate_safety(
        scene(signal=SignalSighting(SignalState.RED, 15.5)), SafetyConfig(red_light_stop=False)
    )

    assert at_edge.mandatory == AtomicAction.STOP
    assert "stop.red_signal" in at_edge.triggered_rules
    assert beyond.mandatory is None
    assert no_rule.mandatory is None


def test_waiting_pedestrian_only_advises():
    """Test that a pedestrian at the curb slows the ego but does not stop it"""
    verdict = evaluate_safety(scene(nearest_pedestrian=PedestrianSighting(5.0, False)), CRITERIA)

    assert verdict.mandatory is None
    assert [a.tag for a in verdict.advisories] == ["slow.pedestrian"]


def test_advisories_never_override():
    """Test that advisory rules leave the proposed action in place"""
    verdict = evaluate_safety(
        scene(
            lead_vehicle=LeadVehicle(15.0, 5.0),
            intersection_distance=12.0,
            signal=SignalSighting(SignalState.YELLOW, 18.0),
            left_gaps=LaneGaps(front=0.5),
        ),
        SafetyConfig(energy_advisory=True),
    )

    assert verdict.mandatory is None
    assert [a.tag for a in verdict.advisories] == [
        "slow.lead_vehicle",
        "slow.intersection",
        "slow.yellow_signal",
        "gap.adjacent_left",
        "energy.smooth",
    ]
    for action in AtomicAction:
        assert enforce(verdict, action) == (action, False)


@given(scenes)
def test_every_scene_gets_a_verdict(s):
    """Test that the criteria are total and every advisory is listed among the triggered rules"""
    verdict = evaluate_safety(s, CRITERIA)

    assert verdict.mandatory in (None, AtomicAction.STOP)
    assert (verdict.mandatory is not None) == any(r.startswith("stop.") for r in verdict.triggered_rules)
    for advisory in verdict.advisories:
        assert advisory.tag in verdict.triggered_rules
        assert advisory.action != AtomicAction.STOP


def check_tier_one(s, proposed):
    verdict = evaluate_safety(s, CRITERIA)
    final, overridden = enforce(verdict, proposed)
    if verdict.mandatory is not None:
        assert final == AtomicAction.STOP
        assert overridden == (proposed != AtomicAction.STOP)
    else:
        assert (final, overridden) == (proposed, False)


@settings(max_examples=1_000, deadline=None)
@given(s=scenes, proposed=st.sampled_from(AtomicAction))
def test_triggered_stop_wins_over_any_action(s, proposed):
    """Test that a triggered stop rule replaces each of the six actions and nothing else is touched"""
    check_tier_one(s, proposed)


@pytest.mark.slow
@settings(max_examples=10_000, deadline=None)
@given(s=scenes, proposed=st.sampled_from(AtomicAction))
def test_triggered_stop_wins_over_any_action_at_length(s, proposed):
    """Test the stop override over ten thousand generated scenes"""
    check_tier_one(s, proposed)


@given(near=distances, far=distances, speed=speeds)
def test_stopping_is_monotone_in_distance(near, far, speed):
    """Test that a hazard that forces a stop still forces it when closer"""
    near, far = sorted((near, far))
    for make in (
        lambda d: scene(speed, lead_vehicle=LeadVehicle(d, 0.0)),
        lambda d: scene(speed, nearest_pedestrian=PedestrianSighting(d, True)),
        lambda d: scene(speed, signal=SignalSighting(SignalState.RED, d)),
    ):
        if evaluate_safety(make(far), CRITERIA).mandatory is not None:
            assert evaluate_safety(make(near), CRITERIA).mandatory is not None


@given(slow=speeds, fast=speeds, distance=distances)
def test_red_light_stop_is_monotone_in_speed(slow, fast, distance):
    """Test that a faster ego stops at least as early for a red light"""
    slow, fast = sorted((slow, fast))
    red = SignalSighting(SignalState.RED, distance)
    if evaluate_safety(scene(slow, signal=red), CRITERIA).mandatory is not None:
        assert evaluate_safety(scene(fast, signal=red), CRITERIA).mandatory is not None


def test_render_safety_text():
    """Test the verdict as shown to the driver"""
    verdict = evaluate_safety(scene(lead_vehicle=LeadVehicle(7.0, 0.0)), CRITERIA)

    assert render_safety_text(EMPTY_VERDICT) == "No safety rule is triggered."
    assert render_safety_text(verdict) == (
        "MANDATORY: stop (stop.lead_vehicle).\n"
        "Recommended: decelerate (slow.lead_vehicle)."
    )
    assert SafetyVerdict().is_empty


def test_criteria_text_uses_configured_distances():
    """Test that the stated criteria follow the configuration"""
    text = criteria_text(SafetyConfig(mandatory_stop_distance=8.0, advisory_decel_distance=25.0))

    assert "within 8 meters ahead" in text
    assert "within 25 meters" in text


def test_invalid_safety_config():
    """Test that the mandatory distance must lie inside the advisory distance"""
    with pytest.raises(ConfigError):
        SafetyConfig(mandatory_stop_distance=20.0, advisory_decel_distance=20.0)

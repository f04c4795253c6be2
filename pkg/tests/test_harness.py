from dataclasses import replace
from statistics import mean
from unittest.mock import MagicMock

import pytest

from surreal_driver.agent import AgentContext, decide
from surreal_driver.coach import GuidelineStore, episode_metrics, merge_guidelines
from surreal_driver.errors import IncompatibleTraceError, ReasonerUnavailable
from surreal_driver.harness import (
    CONDITIONS,
    coach_episode,
    collision_rates,
    collision_totals,
    condition,
    counted_collisions,
    make_reasoner,
    percent_reduction,
    replay,
    run_ablation_suite,
    run_episode,
)
from surreal_driver import harness
from surreal_driver.reasoners import RemoteReasoner, load_demonstrations
from surreal_driver.safety import EMPTY_VERDICT, evaluate_safety
from surreal_driver.trace import read_trace, trace_to_text, write_trace
from surreal_driver.types import (
    AgentConfig,
    AppConfig,
    AtomicAction,
    AtomicScene,
    BehaviorProfile,
    CoachThresholds,
    CollisionEvent,
    Guideline,
    LanePosition,
    LeadVehicle,
    PedestrianProfile,
    ReasonerConfig,
    SimConfig,
)

from traces import make_trace, stopping_trace


@pytest.fixture(scope="module")
def minute_trace():
    """One minute of the full framework on seed 1."""
    return run_episode(condition("D"), seed=1, duration=60.0)


def always(action):
    def reasoner(ctx):
        return action, "scripted for the test"
    return reasoner


def unreachable(ctx):
    raise ReasonerUnavailable("connection refused")


# --- episodes -------------------------------------------------------------

def test_episode_records_every_tick(minute_trace):
    """Test the trace shape of a one-minute episode"""
    trace = minute_trace

    assert len(trace.records) == 600
    assert [r.tick for r in trace.records] == list(range(600))
    assert trace.header.condition == "D"
    assert trace.header.seed == 1
    assert trace.header.reasoner == "scripted"
    assert trace.footer.total_time == pytest.approx(60.0)
    assert trace.footer.total_distance == pytest.approx(sum(r.advance for r in trace.records))
    assert trace.footer.collisions == [c for r in trace.records for c in r.collisions]
    assert all(r.decision == (r.tick % 5 == 0) for r in trace.records)


def test_episode_is_deterministic():
    """Test that one seed and condition produce an identical trace"""
    first = run_episode(condition("A"), seed=3, duration=20.0)
    second = run_episode(condition("A"), seed=3, duration=20.0)

    assert trace_to_text(first) == trace_to_text(second)


def test_conditions_switch_components():
    """Test that memory and guidelines only reach the conditions that use them"""
    store = merge_guidelines(GuidelineStore(), [Guideline("g0-collisions", "Keep your distance.", "collisions", 0)])
    b = run_episode(condition("B"), seed=2, duration=5.0)
    c = run_episode(condition("C"), seed=2, duration=5.0, guidelines=store)
    d = run_episode(condition("D"), seed=2, duration=5.0, guidelines=store)

    assert all(r.memory == [] for r in b.records)
    assert all(r.memory for r in c.records)
    assert c.header.guidelines == []
    assert [g["text"] for g in d.header.guidelines] == ["Keep your distance."]


def test_unknown_condition():
    """Test that condition ids are validated"""
    assert condition("d") is CONDITIONS["D"]
    with pytest.raises(ValueError, match="unknown condition"):
        condition("E")
    with pytest.raises(ValueError):
        run_episode(CONDITIONS["A"], seed=0, duration=0.0)


def test_remote_reasoner_is_built_from_config():
    """Test that a remote reasoner only gets safety criteria when the condition has them"""
    config = AppConfig(reasoner=ReasonerConfig(kind="remote", endpoint="http://llm.test/v1/chat/completions"))

    with_criteria, name = make_reasoner(config, condition("B"))
    without, _ = make_reasoner(config, condition("A"))

    assert name == "remote"
    assert isinstance(with_criteria, RemoteReasoner)
    assert with_criteria.criteria is not None
    assert without.criteria is None
    with_criteria.close()
    without.close()


def test_unreachable_reasoner_aborts_the_episode():
    """Test the consecutive failure budget"""
    config = AppConfig(sim=SimConfig(npc_count=0), agent=AgentConfig(failure_budget=3))

    trace = run_episode(condition("B"), seed=0, duration=10.0, reasoner=unreachable, config=config)

    assert trace.footer.aborted
    assert trace.footer.abort_reason == "reasoner failed 3 consecutive decisions"
    assert len(trace.records) == 11
    decisions = [r for r in trace.records if r.decision]
    assert all(r.reasoner_failed and r.final == AtomicAction.STOP for r in decisions)


def test_safety_shield_separates_a_from_b():
    """Test a vehicle 7 m ahead: A keeps the proposal, B stops"""
    scene = AtomicScene(
        tick=0,
        ego_speed=8.0,
        lane_position=LanePosition("L", False, False),
        destination_distance=200.0,
        lead_vehicle=LeadVehicle(7.0, 0.0),
    )
    config = AppConfig()
    finals = {}
    for cid in ("A", "B"):
        spec = CONDITIONS[cid]
        verdict = evaluate_safety(scene, config.safety) if spec.safety_enabled else EMPTY_VERDICT
        ctx = AgentContext(scene, safety=verdict)
        record = decide(ctx, always(AtomicAction.ACCELERATE), config.safety if spec.safety_enabled else None)
        finals[cid] = record

    assert finals["A"].final == finals["A"].proposed == AtomicAction.ACCELERATE
    assert finals["B"].final == AtomicAction.STOP
    assert finals["B"].overridden


# --- replay ---------------------------------------------------------------

def test_replay_reproduces_a_stored_trace(tmp_path, minute_trace):
    """Test replaying a trace read back from disk"""
    path = tmp_path / "episode.jsonl"
    write_trace(minute_trace, path)

    result = replay(read_trace(path))

    assert result.ok
    assert result.mode == "full"
    assert result.ticks_checked == 600


def test_replay_reports_the_first_divergence(tmp_path, minute_trace):
    """Test that a tampered record is found"""
    path = tmp_path / "episode.jsonl"
    write_trace(minute_trace, path)
    trace = read_trace(path)
    original = trace.records[100].speed
    trace.records[100] = replace(trace.records[100], speed=original + 1.0)

    result = replay(trace)

    assert not result.ok
    assert result.divergence_tick == 100
    assert result.field == "speed"
    assert result.expected == original + 1.0
    assert result.actual == original


def test_replay_of_other_reasoners_checks_the_world(minute_trace):
    """Test that recorded proposals drive a world-only replay"""
    trace = replace(minute_trace, header=replace(minute_trace.header, reasoner="custom"))

    result = replay(trace)

    assert result.ok
    assert result.mode == "world"


def test_replay_refuses_other_builds(minute_trace):
    """Test the build-version check"""
    trace = replace(minute_trace, header=replace(minute_trace.header, build_version="0.0.0"))

    with pytest.raises(IncompatibleTraceError, match="0.0.0"):
        replay(trace)


def test_replay_refuses_other_command_formats(minute_trace):
    """Test that the command and scene formats are recorded and checked"""
    assert minute_trace.header.command_schema_version == 1
    assert minute_trace.header.scene_schema_version == 1

    trace = replace(minute_trace, header=replace(minute_trace.header, command_schema_version=2))

    with pytest.raises(IncompatibleTraceError, match="command schema 2"):
        replay(trace)


# --- metrics --------------------------------------------------------------

def test_collision_rates_per_meter_and_second():
    """Test three collisions over 600 m and 300 s"""
    trace = make_trace([AtomicAction.MAINTAIN_SPEED] * 3000, speeds=[2.0] * 3000, collision_ticks=(10, 900, 2000))

    per_meter, per_second = collision_rates(trace)

    assert trace.footer.total_distance == pytest.approx(600.0)
    assert per_meter == pytest.approx(0.005)
    assert per_second == pytest.approx(0.01)


def test_collision_rates_are_pooled():
    """Test that rates pool totals rather than averaging per-episode rates"""
    slow = make_trace([AtomicAction.MAINTAIN_SPEED] * 1000, speeds=[1.0] * 1000, collision_ticks=(5,))
    fast = make_trace([AtomicAction.MAINTAIN_SPEED] * 1000, speeds=[9.0] * 1000)
    both = make_trace(
        [AtomicAction.MAINTAIN_SPEED] * 2000, speeds=[1.0] * 1000 + [9.0] * 1000, collision_ticks=(5,)
    )

    assert collision_totals([slow, fast])[0] == 1
    assert collision_rates([slow, fast])[0] == pytest.approx(collision_rates(both)[0])
    assert collision_rates([slow, fast])[0] == pytest.approx(1 / 1000.0)


def test_npc_collisions_are_excluded_by_default():
    """Test the ego-only collision count"""
    trace = make_trace([AtomicAction.MAINTAIN_SPEED] * 10, collision_ticks=(3,))
    trace.footer.collisions.append(CollisionEvent(6, 0.6, ("npc-01", "npc-02"), False, "leading"))

    assert counted_collisions(trace) == 1
    assert counted_collisions(trace, include_npc=True) == 2


def test_zero_denominators_are_errors():
    """Test that empty traces have no rate"""
    with pytest.raises(ValueError, match="positive distance"):
        collision_rates(make_trace([]))
    with pytest.raises(ValueError):
        collision_rates(make_trace([AtomicAction.STOP] * 10, speeds=[0.0] * 10))


@pytest.mark.parametrize("baseline, improved, expected", [
    (0.01453958, 0.002757353, 81.04),
    (0.01, 0.01, 0.0),
    (0.01, 0.005, 50.0),
])
def test_percent_reduction(baseline, improved, expected):
    """Test the relative reduction between two rates"""
    assert percent_reduction(baseline, improved) == pytest.approx(expected, abs=0.01)


def test_percent_reduction_needs_a_baseline():
    """Test a zero baseline"""
    with pytest.raises(ValueError):
        percent_reduction(0.0, 0.001)


# --- coaching -------------------------------------------------------------

def test_coach_episode_merges_guidelines():
    """Test that a bad episode grows the store"""
    assessment, store = coach_episode(stopping_trace(), GuidelineStore(), AppConfig(), episode_index=4)

    assert assessment.quality == "Bad"
    assert [g.text for g in store.guidelines] == ["Maintain a consistent and safe speed."]
    assert store.guidelines[0].created_at == 4


def test_failing_remote_coach_falls_back_to_rules():
    """Test that remote coach trouble keeps the rule-based guidelines"""
    remote = MagicMock()
    remote.advise = MagicMock(side_effect=ReasonerUnavailable("coach endpoint returned 503"))

    assessment, store = coach_episode(stopping_trace(), GuidelineStore(), AppConfig(), remote=remote)

    remote.advise.assert_called_once()
    assert [g.source_finding for g in store.guidelines] == ["excessive_stopping"]


def test_good_episode_skips_the_remote_coach():
    """Test that the remote coach is only asked about bad episodes"""
    remote = MagicMock()

    assessment, store = coach_episode(stopping_trace(onsets=2), GuidelineStore(), AppConfig(), remote=remote)

    assert assessment.quality == "Good"
    remote.advise.assert_not_called()
    assert len(store) == 0


# --- ablation -------------------------------------------------------------

def test_benign_world_has_no_collisions():
    """Test that a world without adversarial behaviour yields zero rates for every condition"""
    config = AppConfig(
        sim=SimConfig(npc_count=0),
        npc=BehaviorProfile(p_run_red=0.0, p_abrupt_lane_change=0.0),
        pedestrians=PedestrianProfile(p_jaywalk=0.0),
    )
    seen = []

    report = run_ablation_suite([0], duration=60.0, config=config, progress=lambda cid, seed: seen.append(cid))

    assert [r.condition for r in report.conditions] == ["A", "B", "C", "D"]
    for result in report.conditions:
        assert result.collisions == 0
        assert result.rate_by_distance == 0.0
        assert result.rate_by_time == 0.0
        assert result.distance > 0
    assert report.reductions[("A", "D")] == (None, None)
    assert seen == ["A", "B", "C"]


def test_ablation_needs_seeds():
    """Test that an empty seed list is refused"""
    with pytest.raises(ValueError, match="seed"):
        run_ablation_suite([])


def test_every_condition_sees_the_same_demonstrations(monkeypatch):
    """Test that the ablation hands its demonstrations to all four conditions"""
    demonstrations = load_demonstrations()
    seen = {}

    def recording(spec, seed, duration, **kwargs):
        trace = run_episode(spec, seed, duration, **kwargs)
        seen[spec.id] = trace.header.demonstrations
        return trace

    monkeypatch.setattr(harness, "run_episode", recording)
    config = AppConfig(sim=SimConfig(npc_count=0), coach=CoachThresholds(coach_warmup=0))

    run_ablation_suite([0], duration=1.0, config=config, demonstrations=demonstrations)

    assert sorted(seen) == ["A", "B", "C", "D"]
    assert all(recorded == seen["D"] for recorded in seen.values())
    assert len(seen["A"]) == len(demonstrations) > 0


@pytest.mark.slow
def test_ablation_ordering():
    """Test that each component lowers the collision rate over twenty seeds"""
    report = run_ablation_suite(list(range(20)), duration=300.0, demonstrations=load_demonstrations(), workers=4)
    rates = {r.condition: r.rate_by_distance for r in report.conditions}

    assert rates["A"] > rates["B"] > rates["C"] >= rates["D"]
    assert rates["D"] <= 0.5 * rates["A"]


@pytest.mark.slow
def test_coaching_does_not_add_stops():
    """Test that guidelines from an episode do not make the next run on that seed stop more often"""
    config = AppConfig()
    before, after = [], []
    for seed in range(20):
        first = run_episode(condition("D"), seed, 120.0, config=config)
        _, store = coach_episode(first, GuidelineStore(), config)
        second = run_episode(condition("D"), seed, 120.0, config=config, guidelines=store)
        before.append(episode_metrics(first).stop_frequency)
        after.append(episode_metrics(second).stop_frequency)

    assert mean(after) <= mean(before)

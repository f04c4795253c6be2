"""Episode runner, collision-rate metrics, the four-condition ablation suite and trace replay."""

import json
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import __version__
from .agent import COMMAND_SCHEMA_VERSION, AgentContext, Reasoner, decide
from .coach import GuidelineStore, assess_episode, generate_guidelines, merge_guidelines
from .config import config_from_dict
from .errors import IncompatibleTraceError, ReasonerUnavailable, SurrealDriverError
from .memory import MemoryBuffer
from .network import RoadNetwork, default_town, network_from_dict
from .perception import SCENE_SCHEMA_VERSION, observe
from .reasoners import RemoteCoach, RemoteReasoner, ScriptedReasoner, policy_for_condition
from .safety import EMPTY_VERDICT, enforce, evaluate_safety
from .trace import TRACE_SCHEMA_VERSION, check_header, config_digest, jsonable, record_line
from .types import (
    AppConfig,
    Assessment,
    AtomicAction,
    ConditionResult,
    ConditionSpec,
    Demonstration,
    EpisodeTrace,
    Guideline,
    MetricsReport,
    TickRecord,
    TraceFooter,
    TraceHeader,
)
from .world import assign_next_destination, has_arrived, new_world, step

logger = logging.getLogger(__name__)

CONDITIONS: Dict[str, ConditionSpec] = {
    "A": ConditionSpec("A", False, False, False, "w/o safety criteria, w/o short-term memory, w/o long-term guidelines"),
    "B": ConditionSpec("B", True, False, False, "w/ safety criteria, w/o short-term memory, w/o long-term guidelines"),
    "C": ConditionSpec("C", True, True, False, "w/ safety criteria, w/ short-term memory, w/o long-term guidelines"),
    "D": ConditionSpec("D", True, True, True, "Full framework"),
}

REDUCTION_PAIRS = (("A", "B"), ("B", "C"), ("C", "D"), ("A", "D"))

# warm-up seeds are kept clear of the scored seeds
WARMUP_SEED_OFFSET = 1_000_003


def condition(condition_id: str) -> ConditionSpec:
    try:
        return CONDITIONS[condition_id.upper()]
    except KeyError:
        raise ValueError(f"unknown condition {condition_id!r}, expected one of {', '.join(CONDITIONS)}")


def make_reasoner(config: AppConfig, spec: ConditionSpec) -> Tuple[Reasoner, str]:
    if config.reasoner.kind == "remote":
        criteria = config.safety if spec.safety_enabled else None
        return RemoteReasoner(config.reasoner, criteria), "remote"
    return ScriptedReasoner(policy_for_condition(config.policy, spec)), "scripted"


# --- episode --------------------------------------------------------------

def run_episode(
    spec: ConditionSpec,
    seed: int,
    duration: Optional[float] = None,
    reasoner: Optional[Reasoner] = None,
    config: Optional[AppConfig] = None,
    guidelines: Optional[GuidelineStore] = None,
    demonstrations: Sequence[Demonstration] = (),
    network: Optional[RoadNetwork] = None,
    reasoner_name: Optional[str] = None,
) -> EpisodeTrace:
    """Run one lock-step episode: observe, decide at cadence, enforce, step, record."""
    config = config or AppConfig()
    duration = config.sim.episode_duration if duration is None else duration
    if duration <= 0:
        raise ValueError("duration must be > 0")
    sim = replace(config.sim, seed=seed, episode_duration=duration)
    config = replace(config, sim=sim)
    network = network or default_town()

    owned = None
    if reasoner is None:
        reasoner, reasoner_name = make_reasoner(config, spec)
        owned = reasoner
    reasoner_name = reasoner_name or getattr(reasoner, "__name__", type(reasoner).__name__)

    if not spec.guidelines_enabled or guidelines is None:
        guidelines = GuidelineStore(max_size=config.agent.guideline_max)
    demonstrations = tuple(demonstrations)
    safety_cfg = config.safety if spec.safety_enabled else None

    header = TraceHeader(
        schema_version=TRACE_SCHEMA_VERSION,
        build_version=__version__,
        seed=seed,
        condition=spec.id,
        config_digest=config_digest(config),
        start_time=0.0,
        duration=duration,
        reasoner=reasoner_name,
        config=jsonable(config),
        network=network.to_dict(),
        guidelines=[asdict(g) for g in guidelines.guidelines],
        demonstrations=jsonable(list(demonstrations)),
        command_schema_version=COMMAND_SCHEMA_VERSION,
        scene_schema_version=SCENE_SCHEMA_VERSION,
    )
    logger.info("episode start: condition %s seed %d, %.1f s, %s reasoner", spec.id, seed, duration, reasoner_name)

    world = new_world(network, sim, config.npc, config.pedestrians, seed)
    memory = MemoryBuffer(config.agent.memory_capacity)
    empty_memory = memory
    held = AtomicAction.MAINTAIN_SPEED
    failures = 0
    records: List[TickRecord] = []
    collisions = []
    aborted, abort_reason = False, ""

    try:
        for _ in range(sim.ticks_for(duration)):
            tick = world.tick
            scene = observe(world, sim.horizon)
            verdict = evaluate_safety(scene, config.safety) if spec.safety_enabled else EMPTY_VERDICT
            is_decision = tick % sim.decision_interval == 0
            if is_decision:
                ctx = AgentContext(
                    scene=scene,
                    memory=memory if spec.memory_enabled else empty_memory,
                    guidelines=guidelines,
                    safety=verdict,
                    demonstrations=demonstrations,
                )
                decision = decide(ctx, reasoner, safety_cfg, config.agent.max_attempts)
                if spec.memory_enabled:
                    memory = memory.push(decision)
                failures = failures + 1 if decision.reasoner_failed else 0
                proposed, final = decision.proposed, decision.final
                overridden, degraded = decision.overridden, decision.degraded
                rationale, failed = decision.rationale, decision.reasoner_failed
                held = final
            else:
                proposed = held
                final, overridden = enforce(verdict, held) if spec.safety_enabled else (held, False)
                degraded, rationale, failed = False, "", False

            world, events = step(world, final, sim)
            degraded = degraded or world.last_degraded
            if final.is_lane_change:
                # lane changes are one-shot; keep the speed afterwards
                held = AtomicAction.MAINTAIN_SPEED
            collisions.extend(events)

            ego = world.ego
            records.append(
                TickRecord(
                    tick=tick,
                    sim_time=world.sim_time,
                    lane_id=ego.lane_id,
                    offset=ego.offset,
                    speed=ego.speed,
                    advance=world.last_advance,
                    decision=is_decision,
                    proposed=proposed,
                    final=final,
                    overridden=overridden,
                    reasoner_failed=failed,
                    degraded=degraded,
                    rationale=rationale,
                    collisions=list(events),
                    scene=jsonable(scene),
                    memory=memory.snapshot() if spec.memory_enabled else [],
                )
            )

            if has_arrived(world):
                world.destinations_reached += 1
                assign_next_destination(world)

            if failures >= config.agent.failure_budget:
                aborted = True
                abort_reason = f"reasoner failed {failures} consecutive decisions"
                logger.warning("episode aborted at tick %d: %s", tick, abort_reason)
                break
    finally:
        if owned is not None and hasattr(owned, "close"):
            owned.close()

    footer = TraceFooter(
        total_distance=sum(r.advance for r in records),
        total_time=records[-1].sim_time if records else 0.0,
        collisions=collisions,
        destinations_reached=world.destinations_reached,
        aborted=aborted,
        abort_reason=abort_reason,
    )
    logger.info(
        "episode end: condition %s seed %d, %.1f m, %d collision(s), %d destination(s)",
        spec.id, seed, footer.total_distance, sum(1 for c in collisions if c.ego_involved), footer.destinations_reached,
    )
    return EpisodeTrace(header, records, footer)


# --- metrics --------------------------------------------------------------

def counted_collisions(trace: EpisodeTrace, include_npc: Optional[bool] = None) -> int:
    if include_npc is None:
        include_npc = bool(trace.header.config.get("sim", {}).get("include_npc_collisions", False))
    return sum(1 for c in trace.footer.collisions if include_npc or c.ego_involved)


def collision_totals(traces: EpisodeTrace | Iterable[EpisodeTrace], include_npc: Optional[bool] = None) -> Tuple[int, float, float]:
    if isinstance(traces, EpisodeTrace):
        traces = [traces]
    count, distance, time = 0, 0.0, 0.0
    for trace in traces:
        count += counted_collisions(trace, include_npc)
        distance += trace.footer.total_distance
        time += trace.footer.total_time
    return count, distance, time


def collision_rates(traces: EpisodeTrace | Iterable[EpisodeTrace], include_npc: Optional[bool] = None) -> Tuple[float, float]:
    """Pooled (per meter, per second) collision rates over one or more traces."""
    count, distance, time = collision_totals(traces, include_npc)
    if distance <= 0 or time <= 0:
        raise ValueError(f"collision rates need positive distance and time, got {distance} m and {time} s")
    return count / distance, count / time


def percent_reduction(baseline: float, improved: float) -> float:
    if baseline <= 0:
        raise ValueError("baseline rate must be > 0")
    return 100.0 * (1.0 - improved / baseline)


# --- coaching -------------------------------------------------------------

def episode_guidelines(
    trace: EpisodeTrace,
    assessment: Assessment,
    store: GuidelineStore,
    episode_index: int = 0,
    remote: Optional[RemoteCoach] = None,
) -> List[Guideline]:
    """Rule-based guidelines for the episode, replaced by the remote coach's advice on a Bad episode."""
    new: List[Guideline] = generate_guidelines(assessment, episode_index)
    if remote is not None and assessment.quality == "Bad":
        try:
            _, new = remote.advise(trace, assessment, store, episode_index)
        except SurrealDriverError as e:
            logger.warning("remote coach failed, using rule-based guidelines: %s", e)
    return new


def coach_episode(
    trace: EpisodeTrace,
    store: GuidelineStore,
    config: AppConfig,
    episode_index: int = 0,
    remote: Optional[RemoteCoach] = None,
) -> Tuple[Assessment, GuidelineStore]:
    """Assess an episode and merge the resulting guidelines into the store."""
    assessment = assess_episode(trace, config.coach)
    new = episode_guidelines(trace, assessment, store, episode_index, remote)
    return assessment, merge_guidelines(store, new)


# --- ablation -------------------------------------------------------------

def _run_cell(
    condition_id: str, seed: int, duration: float, config: AppConfig, demonstrations: Sequence[Demonstration]
) -> EpisodeTrace:
    return run_episode(CONDITIONS[condition_id], seed, duration, config=config, demonstrations=demonstrations)


def _run_guided_chain(
    seeds: Sequence[int],
    duration: float,
    config: AppConfig,
    demonstrations: Sequence[Demonstration],
    errors: List[str],
    remote_coach: Optional[RemoteCoach] = None,
) -> List[EpisodeTrace]:
    spec = CONDITIONS["D"]
    store = GuidelineStore(max_size=config.agent.guideline_max)
    episode = 0
    first = seeds[0] if seeds else 0
    for w in range(config.coach.coach_warmup):
        try:
            warm = run_episode(spec, first + WARMUP_SEED_OFFSET * (w + 1), duration, config=config,
                               guidelines=store, demonstrations=demonstrations)
            _, store = coach_episode(warm, store, config, episode, remote_coach)
        except SurrealDriverError as e:
            errors.append(f"D/warm-up {w}: {e}")
        episode += 1

    traces = []
    for seed in seeds:
        try:
            trace = run_episode(spec, seed, duration, config=config, guidelines=store, demonstrations=demonstrations)
        except SurrealDriverError as e:
            errors.append(f"D/seed {seed}: {e}")
            continue
        traces.append(trace)
        _, store = coach_episode(trace, store, config, episode, remote_coach)
        episode += 1
    return traces


def summarize_condition(spec: ConditionSpec, traces: Sequence[EpisodeTrace], errors: List[str]) -> ConditionResult:
    count, distance, time = collision_totals(traces)
    if traces and (distance <= 0 or time <= 0):
        errors.append(f"{spec.id}: no distance or time driven, rates reported as 0")
    return ConditionResult(
        condition=spec.id,
        label=spec.label,
        collisions=count,
        distance=distance,
        time=time,
        seeds=len(traces),
        aborted=sum(1 for t in traces if t.footer.aborted),
        rate_by_distance=count / distance if distance > 0 else 0.0,
        rate_by_time=count / time if time > 0 else 0.0,
    )


def pairwise_reductions(results: Dict[str, ConditionResult]) -> Dict[Tuple[str, str], Tuple[Optional[float], Optional[float]]]:
    reductions = {}
    for base, improved in REDUCTION_PAIRS:
        if base not in results or improved not in results:
            continue
        b, i = results[base], results[improved]
        reductions[(base, improved)] = (
            percent_reduction(b.rate_by_distance, i.rate_by_distance) if b.rate_by_distance > 0 else None,
            percent_reduction(b.rate_by_time, i.rate_by_time) if b.rate_by_time > 0 else None,
        )
    return reductions


def run_ablation_suite(
    seeds: Sequence[int],
    duration: Optional[float] = None,
    config: Optional[AppConfig] = None,
    demonstrations: Sequence[Demonstration] = (),
    workers: int = 1,
    remote_coach: Optional[RemoteCoach] = None,
    progress: Optional[Callable[[str, int], None]] = None,
) -> MetricsReport:
    """Run conditions A-D over paired seeds and aggregate pooled collision rates."""
    if not seeds:
        raise ValueError("at least one seed is required")
    config = config or AppConfig()
    duration = config.sim.episode_duration if duration is None else duration
    demonstrations = list(demonstrations)
    errors: List[str] = []
    traces: Dict[str, List[EpisodeTrace]] = {cid: [] for cid in CONDITIONS}
    cells = [(cid, seed) for cid in ("A", "B", "C") for seed in seeds]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {
                executor.submit(_run_cell, cid, seed, duration, config, demonstrations): (cid, seed)
                for cid, seed in cells
            }
            done: Dict[Tuple[str, int], EpisodeTrace] = {}
            for future in as_completed(futures):
                cid, seed = futures[future]
                try:
                    done[(cid, seed)] = future.result()
                except SurrealDriverError as e:
                    errors.append(f"{cid}/seed {seed}: {e}")
                if progress:
                    progress(cid, seed)
        for cell in cells:
            if cell in done:
                traces[cell[0]].append(done[cell])
    else:
        for cid, seed in cells:
            try:
                traces[cid].append(_run_cell(cid, seed, duration, config, demonstrations))
            except SurrealDriverError as e:
                errors.append(f"{cid}/seed {seed}: {e}")
            if progress:
                progress(cid, seed)

    traces["D"] = _run_guided_chain(seeds, duration, config, demonstrations, errors, remote_coach)

    results = {cid: summarize_condition(CONDITIONS[cid], traces[cid], errors) for cid in CONDITIONS}
    for trace in (t for ts in traces.values() for t in ts):
        if trace.footer.aborted:
            errors.append(f"{trace.header.condition}/seed {trace.header.seed}: aborted ({trace.footer.abort_reason})")
    return MetricsReport(
        conditions=[results[cid] for cid in CONDITIONS],
        reductions=pairwise_reductions(results),
        errors=errors,
    )


# --- replay ---------------------------------------------------------------

# fields that depend only on the world and the enforced action
WORLD_FIELDS = ("tick", "sim_time", "lane_id", "offset", "speed", "advance", "final", "collisions")


@dataclass
class ReplayResult:
    ok: bool
    mode: str
    ticks_checked: int
    divergence_tick: Optional[int] = None
    field: Optional[str] = None
    expected: object = None
    actual: object = None
    message: str = ""


class RecordedReasoner:
    """Feeds back the proposals recorded in a trace, keyed by tick."""

    def __init__(self, records: Sequence[TickRecord]):
        self.decisions = {r.tick: r for r in records if r.decision}

    def __call__(self, ctx: AgentContext) -> Tuple[AtomicAction, str]:
        record = self.decisions.get(ctx.scene.tick)
        if record is None or record.reasoner_failed:
            raise ReasonerUnavailable(f"no recorded proposal for tick {ctx.scene.tick}")
        return record.proposed, record.rationale


def _first_difference(expected: Dict, actual: Dict, keys: Iterable[str]) -> Optional[str]:
    for key in keys:
        if json.dumps(expected.get(key), sort_keys=True) != json.dumps(actual.get(key), sort_keys=True):
            return key
    return None


def replay(trace: EpisodeTrace) -> ReplayResult:
    """Re-simulate a trace from its header and report the first divergence.

    Scripted traces are compared byte-wise. Other traces replay the recorded proposals
    and only the world evolution is compared.
    """
    header = trace.header
    check_header(header, require_build=True)
    if (header.command_schema_version, header.scene_schema_version) != (COMMAND_SCHEMA_VERSION, SCENE_SCHEMA_VERSION):
        raise IncompatibleTraceError(
            f"trace uses command schema {header.command_schema_version} and scene schema "
            f"{header.scene_schema_version}, this build expects {COMMAND_SCHEMA_VERSION} and {SCENE_SCHEMA_VERSION}"
        )
    config = config_from_dict(header.config)
    network = network_from_dict(header.network)
    spec = CONDITIONS[header.condition]
    guidelines = GuidelineStore(tuple(Guideline(**g) for g in header.guidelines), config.agent.guideline_max)
    demonstrations = [
        Demonstration(d["situation"], d["reasoning"], AtomicAction(d["action"])) for d in header.demonstrations
    ]

    full = header.reasoner == "scripted"
    if full:
        reasoner: Reasoner = ScriptedReasoner(policy_for_condition(config.policy, spec))
    else:
        reasoner = RecordedReasoner(trace.records)
    mode = "full" if full else "world"

    fresh = run_episode(
        spec, header.seed, header.duration, reasoner=reasoner, config=config, guidelines=guidelines,
        demonstrations=demonstrations, network=network, reasoner_name=header.reasoner,
    )

    for n, (expected, actual) in enumerate(zip(trace.records, fresh.records)):
        if full and record_line(expected) == record_line(actual):
            continue
        e, a = jsonable(expected), jsonable(actual)
        keys = sorted(e) if full else WORLD_FIELDS
        key = _first_difference(e, a, keys)
        if key is not None:
            return ReplayResult(False, mode, n + 1, expected.tick, key, e.get(key), a.get(key),
                                f"divergence at tick {expected.tick} in {key!r}")
    if len(trace.records) != len(fresh.records):
        tick = min(len(trace.records), len(fresh.records))
        return ReplayResult(False, mode, tick, tick, "records", len(trace.records), len(fresh.records),
                            f"record count differs: {len(trace.records)} recorded, {len(fresh.records)} replayed")

    e, a = jsonable(trace.footer), jsonable(fresh.footer)
    footer_keys = sorted(e) if full else ("total_distance", "total_time", "collisions", "destinations_reached")
    key = _first_difference(e, a, footer_keys)
    if key is not None:
        return ReplayResult(False, mode, len(trace.records), None, f"footer.{key}", e.get(key), a.get(key),
                            f"footer differs in {key!r}")
    return ReplayResult(True, mode, len(trace.records), message="trace verified")

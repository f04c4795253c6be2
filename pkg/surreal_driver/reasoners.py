"""Decision backends: the scripted priority-rule policy, the remote chat reasoner and the prompt they share."""

import json
import logging
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import httpx

from .agent import ACTION_SCHEMA, AgentContext, first_json_object, parse_action_reply
from .coach import (
    COLLISIONS,
    EXCESSIVE_STOPPING,
    HIGH_OVERRIDE_RATE,
    UNSTEADY_SPEED,
    GuidelineStore,
    normalize_text,
    render_guidelines_text,
)
from .env import SURREAL_LLM_API_KEY
from .errors import DemonstrationError, ParseError, ReasonerUnavailable
from .memory import render_memory_text
from .perception import render_scene_text
from .safety import MOVING_SPEED, criteria_text, render_safety_text
from .types import (
    Assessment,
    AtomicAction,
    ConditionSpec,
    DecisionRecord,
    Demonstration,
    EpisodeTrace,
    Guideline,
    PolicyTable,
    ReasonerConfig,
    SafetyConfig,
    SignalState,
)

logger = logging.getLogger(__name__)

SYSTEM_ROLE = (
    "You are an experienced human driver controlling the ego vehicle in a city. "
    "Think the way expert drivers do: look around, reason about the situation, then act."
)

_CAUTION_FINDINGS = frozenset({COLLISIONS, HIGH_OVERRIDE_RATE})
_SMOOTHING_FINDINGS = frozenset({EXCESSIVE_STOPPING, UNSTEADY_SPEED})
_LEAD_TAGS = frozenset({"slow.lead_vehicle", "gap.min_moving"})


# --- scripted policy ------------------------------------------------------

def policy_for_condition(base: PolicyTable, condition: ConditionSpec) -> PolicyTable:
    return replace(
        base,
        obey_mandatory=condition.safety_enabled,
        obey_advisories=condition.safety_enabled,
        use_memory=condition.memory_enabled,
        use_guidelines=condition.guidelines_enabled,
    )


def stopping_gap(speed: float, other_speed: float, policy: PolicyTable, margin: float, react: bool = True) -> float:
    """Distance needed to shed the closing speed on an obstacle moving at other_speed, plus a margin."""
    closing = max(0.0, speed * speed - other_speed * other_speed) / (2 * policy.braking_decel)
    return closing + (speed * policy.reaction_time if react else 0.0) + margin


def _naive_hazard(ctx: AgentContext, policy: PolicyTable) -> Tuple[Optional[AtomicAction], str]:
    """What a driver without safety criteria notices: only hazards that are already close."""
    scene = ctx.scene
    lead = scene.lead_vehicle
    pedestrian = scene.nearest_pedestrian
    if lead is not None and lead.distance < policy.naive_stop_gap:
        return AtomicAction.STOP, "vehicle right ahead"
    if pedestrian is not None and pedestrian.crossing and pedestrian.distance < policy.naive_stop_gap:
        return AtomicAction.STOP, "pedestrian right ahead"
    return None, ""


def _traffic_rule(ctx: AgentContext, policy: PolicyTable) -> Optional[Tuple[AtomicAction, str]]:
    """Car following and signal handling every driver does.

    A driver with safety criteria allows for its reaction time and keeps the wider
    following and signal margins; one without brakes on its naive margins alone.
    """
    scene = ctx.scene
    v = scene.ego_speed
    careful = policy.obey_advisories

    lead = scene.lead_vehicle
    if lead is not None:
        margin = policy.following_margin if careful else policy.naive_stop_gap
        needed = stopping_gap(v, lead.speed, policy, margin, react=careful)
        if lead.distance < needed and (lead.speed < v or lead.distance < margin):
            if v > MOVING_SPEED:
                return AtomicAction.DECELERATE, "keeping a safe distance to the vehicle ahead"
            return AtomicAction.MAINTAIN_SPEED, "waiting behind the vehicle ahead"

    signal = scene.signal
    if signal is None:
        return None
    if signal.state == SignalState.RED:
        margin = policy.signal_margin if careful else policy.naive_red_distance
        if signal.distance < stopping_gap(v, 0.0, policy, margin, react=careful):
            if v > MOVING_SPEED:
                return (AtomicAction.DECELERATE if careful else AtomicAction.STOP), "red light ahead"
            return AtomicAction.MAINTAIN_SPEED, "waiting at the red light"
    elif signal.state == SignalState.YELLOW:
        can_stop = v <= MOVING_SPEED or signal.distance > stopping_gap(v, 0.0, policy, 0.0)
        if v > MOVING_SPEED and can_stop and signal.distance < stopping_gap(v, 0.0, policy, policy.following_margin):
            return AtomicAction.DECELERATE, "yellow light, stopping before the line"
        # a careful driver that can still stop does not speed up into a yellow light
        hold = policy.guided_slow_distance if careful else policy.following_margin
        if can_stop and signal.distance < hold:
            if v <= MOVING_SPEED:
                return AtomicAction.MAINTAIN_SPEED, "waiting at the yellow light"
            return AtomicAction.MAINTAIN_SPEED, "yellow light ahead, not speeding up"
    return None


def _digest_distance(digest: str, key: str) -> Optional[float]:
    for part in digest.split():
        name, _, value = part.partition("=")
        if name == key:
            try:
                return float(value)
            except ValueError:
                return None
    return None


def _remembered_hazard(record: DecisionRecord, policy: PolicyTable) -> bool:
    """A stop, an override, or a pedestrian or tight lead seen in the recorded scene."""
    if record.overridden or record.final == AtomicAction.STOP:
        return True
    pedestrian = _digest_distance(record.scene_digest, "ped")
    lead = _digest_distance(record.scene_digest, "lead")
    return (pedestrian is not None and pedestrian < policy.guided_slow_distance) or (
        lead is not None and lead < policy.following_margin
    )


def _target_speed(ctx: AgentContext, policy: PolicyTable) -> Tuple[float, List[str]]:
    target = policy.desired_speed
    notes = []
    if policy.use_memory and any(_remembered_hazard(r, policy) for r in ctx.memory.records):
        target *= policy.caution_speed_factor
        notes.append("recent hazard")
    findings = ctx.guidelines.findings if policy.use_guidelines else frozenset()
    if findings & _CAUTION_FINDINGS:
        target *= policy.caution_speed_factor
        notes.append("guideline: keep extra distance")
    if findings & _SMOOTHING_FINDINGS:
        target *= policy.smooth_speed_factor
        notes.append("guideline: steady speed")
    return target, notes


def _guided_slowdown(ctx: AgentContext, policy: PolicyTable) -> Optional[str]:
    """Early, gentle slowing that guidelines ask for, so hard stops become rare."""
    if not (policy.use_guidelines and ctx.guidelines.findings):
        return None
    scene = ctx.scene
    v = scene.ego_speed
    if v <= MOVING_SPEED:
        return None
    signal = scene.signal
    if signal is not None and signal.state != SignalState.GREEN and signal.distance < policy.guided_slow_distance:
        return f"{signal.state.value} light ahead, slowing early"
    lead = scene.lead_vehicle
    if lead is not None and lead.distance < policy.guided_slow_distance and lead.speed < v - policy.speed_tolerance:
        return "slower vehicle ahead, slowing early"
    return None


def _lane_change(ctx: AgentContext, policy: PolicyTable) -> Optional[Tuple[AtomicAction, str]]:
    scene = ctx.scene
    side = scene.route_hint
    if side is None or scene.lane_changing:
        return None
    if policy.use_memory and ctx.memory.records and ctx.memory.records[-1].final.is_lane_change:
        return None
    if policy.obey_advisories and f"gap.adjacent_{side}" in ctx.safety.triggered_rules:
        return None
    gaps = scene.left_gaps if side == "left" else scene.right_gaps
    if gaps is None:
        return None
    careful = policy.obey_advisories
    front_margin = policy.lane_change_front_margin if careful else policy.naive_stop_gap
    if gaps.front is not None and gaps.front <= front_margin:
        return None
    # without safety criteria nobody checks the mirror
    if careful and gaps.rear is not None:
        rear_speed = gaps.rear_speed or 0.0
        # the follower needs room to brake down to our speed
        needed = max(
            policy.lane_change_rear_margin,
            stopping_gap(rear_speed, scene.ego_speed, policy, policy.naive_stop_gap),
        )
        if gaps.rear <= needed:
            return None
    action = AtomicAction.LANE_CHANGE_LEFT if side == "left" else AtomicAction.LANE_CHANGE_RIGHT
    return action, f"route needs the {side} lane and the gap is clear"


def scripted_reason(ctx: AgentContext, policy: PolicyTable) -> Tuple[AtomicAction, str]:
    """Deterministic priority rules: mandatory hint, advisories, car following, route lane change, then speed tracking."""
    scene = ctx.scene
    verdict = ctx.safety
    v = scene.ego_speed

    if policy.obey_mandatory and verdict.mandatory is not None:
        rules = ", ".join(r for r in verdict.triggered_rules if r.startswith("stop."))
        return verdict.mandatory, f"mandatory safety rule ({rules})"
    if not policy.obey_mandatory:
        action, why = _naive_hazard(ctx, policy)
        if action is not None:
            return action, why

    if policy.obey_advisories and v > MOVING_SPEED:
        lead = scene.lead_vehicle
        opening = lead is not None and lead.speed >= v
        pedestrian = scene.nearest_pedestrian
        # past the point of stopping, a yellow light is cleared rather than braked for
        committed = scene.signal is not None and scene.signal.distance <= stopping_gap(v, 0.0, policy, 0.0)
        # a crossing pedestrian and a yellow light are slowed for at any speed; the rest only above advisory_speed
        urgent = {"slow.yellow_signal"} | ({"slow.pedestrian"} if pedestrian is not None and pedestrian.crossing else set())
        slow = [
            a for a in verdict.advisories
            if a.action == AtomicAction.DECELERATE
            and (v > policy.advisory_speed or a.tag in urgent)
            and not (a.tag in _LEAD_TAGS and opening)
            and not (a.tag == "slow.yellow_signal" and committed)
        ]
        if slow:
            return AtomicAction.DECELERATE, f"recommended: {slow[0].tag}"

    rule = _traffic_rule(ctx, policy)
    if rule is not None:
        return rule

    why = _guided_slowdown(ctx, policy)
    if why is not None:
        return AtomicAction.DECELERATE, why

    change = _lane_change(ctx, policy)
    if change is not None:
        return change

    target, notes = _target_speed(ctx, policy)
    suffix = f" ({'; '.join(notes)})" if notes else ""
    tolerance = policy.speed_tolerance
    if policy.obey_advisories and any(a.tag == "energy.smooth" for a in verdict.advisories):
        tolerance *= 2
    if v < target - tolerance:
        recent = ctx.memory.records[-2:] if policy.use_memory else ()
        if len(recent) == 2 and all(r.final == AtomicAction.ACCELERATE for r in recent):
            return AtomicAction.MAINTAIN_SPEED, "holding speed after accelerating" + suffix
        return AtomicAction.ACCELERATE, f"below target speed {target:.1f} m/s" + suffix
    if v > target + tolerance:
        return AtomicAction.DECELERATE, f"above target speed {target:.1f} m/s" + suffix
    return AtomicAction.MAINTAIN_SPEED, "at target speed" + suffix


@dataclass(frozen=True)
class ScriptedReasoner:
    policy: PolicyTable = field(default_factory=PolicyTable)

    def __call__(self, ctx: AgentContext) -> Tuple[AtomicAction, str]:
        return scripted_reason(ctx, self.policy)


# --- prompt ---------------------------------------------------------------

@dataclass(frozen=True)
class PromptDocument:
    system: str
    demonstrations: str
    guidelines: str
    memory: str
    scene: str
    output_instructions: str

    def sections(self) -> List[Tuple[str, str]]:
        return [
            ("Role", self.system),
            ("Examples from expert drivers", self.demonstrations),
            ("Driving guidelines", self.guidelines),
            ("Recent actions", self.memory),
            ("Current situation", self.scene),
            ("Answer format", self.output_instructions),
        ]

    def render(self) -> str:
        return "\n\n".join(f"## {title}\n{body}" for title, body in self.sections())

    def messages(self) -> List[Dict[str, str]]:
        user = "\n\n".join(f"## {title}\n{body}" for title, body in self.sections()[1:])
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": user},
        ]


def render_demonstration(demo: Demonstration) -> str:
    return f"Situation: {demo.situation}\nReasoning: {demo.reasoning}\nAction: {demo.action.value}"


def build_prompt(
    ctx: AgentContext,
    demos: Optional[Sequence[Demonstration]] = None,
    schema: str = ACTION_SCHEMA,
    criteria: Optional[SafetyConfig] = None,
) -> PromptDocument:
    """Assemble the chain-of-thought prompt. `demos=None` uses the demonstrations carried by the context."""
    demos = ctx.demonstrations if demos is None else demos
    system = SYSTEM_ROLE
    if criteria is not None:
        system += "\n\n" + criteria_text(criteria)
    system += "\n\nAvailable actions: " + ", ".join(a.value for a in AtomicAction) + "."

    scene = render_scene_text(ctx.scene)
    if criteria is not None:
        scene += "\n" + render_safety_text(ctx.safety)

    return PromptDocument(
        system=system,
        demonstrations="\n\n".join(render_demonstration(d) for d in demos),
        guidelines=render_guidelines_text(ctx.guidelines),
        memory=render_memory_text(ctx.memory),
        scene=scene,
        output_instructions=(
            "Reason step by step about the situation, then answer with one JSON object:\n" + schema
        ),
    )


# --- demonstrations -------------------------------------------------------

def default_demonstrations_path() -> Path:
    return Path(str(resources.files("surreal_driver") / "data" / "demonstrations.json"))


def load_demonstrations(path: Optional[str | Path] = None) -> List[Demonstration]:
    """Load a JSON array of {situation, reasoning, action} objects, preserving order."""
    path = Path(path) if path is not None else default_demonstrations_path()
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DemonstrationError(f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise DemonstrationError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, list):
        raise DemonstrationError(f"{path} must contain a JSON array")

    demos = []
    for index, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise DemonstrationError("entry must be an object", index)
        for key in ("situation", "reasoning", "action"):
            value = entry.get(key)
            if not isinstance(value, str) or not value.strip():
                raise DemonstrationError(f"{key!r} must be a nonempty string", index)
        try:
            action = AtomicAction(entry["action"])
        except ValueError:
            raise DemonstrationError(f"unknown action {entry['action']!r}", index)
        demos.append(Demonstration(entry["situation"], entry["reasoning"], action))
    return demos


# --- remote chat transport ------------------------------------------------

class ChatClient:
    """One chat-completions request per call, bearer auth from the environment."""

    def __init__(self, cfg: ReasonerConfig, api_key: Optional[str] = None, client: Optional[httpx.Client] = None):
        if not cfg.endpoint:
            raise ReasonerUnavailable("no endpoint configured for the remote reasoner")
        self.cfg = cfg
        headers = {"Content-Type": "application/json"}
        key = api_key if api_key is not None else SURREAL_LLM_API_KEY
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(timeout=cfg.timeout)
        self.client.headers.update(headers)

    def close(self) -> None:
        self.client.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def complete(self, messages: List[Dict[str, str]]) -> str:
        """Send one chat request. The whole exchange, body included, must finish within `cfg.timeout`."""
        body = {"model": self.cfg.model, "messages": messages, "temperature": self.cfg.temperature}
        deadline = time.monotonic() + self.cfg.timeout
        try:
            with self.client.stream("POST", self.cfg.endpoint, json=body, timeout=self.cfg.timeout) as response:
                response.raise_for_status()
                chunks = []
                for chunk in response.iter_bytes():
                    if time.monotonic() > deadline:
                        raise ReasonerUnavailable(f"reasoner timed out after {self.cfg.timeout}s: reply still arriving")
                    chunks.append(chunk)
        except httpx.TimeoutException as e:
            raise ReasonerUnavailable(f"reasoner timed out after {self.cfg.timeout}s: {e}")
        except httpx.HTTPStatusError as e:
            raise ReasonerUnavailable(f"reasoner returned HTTP {e.response.status_code}")
        except httpx.HTTPError as e:
            raise ReasonerUnavailable(f"reasoner unreachable: {e}")

        try:
            content = json.loads(b"".join(chunks))["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise ParseError(f"unexpected reply shape: {e!r}")
        if not isinstance(content, str):
            raise ParseError("reply content is not text")
        return content[: self.cfg.max_reply_length]


class RemoteReasoner:
    def __init__(
        self,
        cfg: ReasonerConfig,
        criteria: Optional[SafetyConfig] = None,
        api_key: Optional[str] = None,
        client: Optional[httpx.Client] = None,
    ):
        self.chat = ChatClient(cfg, api_key=api_key, client=client)
        self.criteria = criteria

    def close(self) -> None:
        self.chat.close()

    def __call__(self, ctx: AgentContext) -> Tuple[AtomicAction, str]:
        prompt = build_prompt(ctx, criteria=self.criteria)
        reply = self.chat.complete(prompt.messages())
        logger.debug("reasoner reply at tick %d: %s", ctx.scene.tick, reply)
        return parse_action_reply(reply)


def remote_reason(
    ctx: AgentContext,
    cfg: ReasonerConfig,
    criteria: Optional[SafetyConfig] = None,
) -> Tuple[AtomicAction, str]:
    reasoner = RemoteReasoner(cfg, criteria)
    try:
        return reasoner(ctx)
    finally:
        reasoner.close()


# --- LLM-backed coach -----------------------------------------------------

COACH_SCHEMA = '{"quality": "Good" | "Bad", "guidelines": ["<short driving rule>", ...]}'


def build_coach_messages(trace: EpisodeTrace, assessment: Assessment, store: GuidelineStore) -> List[Dict[str, str]]:
    m = assessment.metrics
    overrides = [r for r in trace.records if r.decision and r.overridden][-10:]
    lines = [
        f"Episode length: {trace.footer.total_time:.1f} s, distance {trace.footer.total_distance:.1f} m.",
        f"Stops per second: {m.stop_frequency:.3f}",
        f"Speed direction changes per second: {m.speed_change_frequency:.3f}",
        f"Safety override rate: {m.override_rate:.3f}",
        f"Collisions: {m.collision_count}",
        "Findings: " + (", ".join(f.tag for f in assessment.reasons) or "none"),
        "Recent safety overrides:",
        *(f"- tick {r.tick}: proposed {r.proposed.value}, enforced {r.final.value}" for r in overrides),
        "Existing guidelines:",
        render_guidelines_text(store),
    ]
    return [
        {
            "role": "system",
            "content": (
                "You are a driving coach. Review the driver's last episode, judge whether the driving "
                "was Good or Bad, and write new short guidelines that would improve it."
            ),
        },
        {"role": "user", "content": "\n".join(lines) + "\n\nAnswer with one JSON object:\n" + COACH_SCHEMA},
    ]


def parse_coach_reply(text: str, episode_index: int, source_finding: str) -> Tuple[str, List[Guideline]]:
    reply = first_json_object(text)
    quality = reply.get("quality")
    if quality not in ("Good", "Bad"):
        raise ParseError(f"quality must be Good or Bad, got {quality!r}")
    raw = reply.get("guidelines", [])
    if not isinstance(raw, list):
        raise ParseError("guidelines must be a list")
    guidelines = [
        Guideline(f"llm{episode_index}-{i}", item.strip(), source_finding, episode_index)
        for i, item in enumerate(raw)
        if isinstance(item, str) and normalize_text(item)
    ]
    return quality, guidelines


class RemoteCoach:
    """CoachAgent backed by the chat endpoint. Metrics and findings still come from the rule-based assessment."""

    def __init__(self, cfg: ReasonerConfig, api_key: Optional[str] = None, client: Optional[httpx.Client] = None):
        self.chat = ChatClient(cfg, api_key=api_key, client=client)

    def close(self) -> None:
        self.chat.close()

    def advise(
        self, trace: EpisodeTrace, assessment: Assessment, store: GuidelineStore, episode_index: int = 0
    ) -> Tuple[str, List[Guideline]]:
        source = assessment.reasons[0].tag if assessment.reasons else "coach"
        reply = self.chat.complete(build_coach_messages(trace, assessment, store))
        return parse_coach_reply(reply, episode_index, source)

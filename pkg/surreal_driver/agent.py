"""DriverAgent: context assembly, one decision per call, safety enforcement and the action command codec."""

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

from .coach import GuidelineStore
from .errors import ParseError, ReasonerUnavailable
from .memory import MemoryBuffer
from .perception import scene_digest
from .safety import EMPTY_VERDICT, enforce, evaluate_safety
from .types import AtomicAction, AtomicScene, DecisionRecord, Demonstration, SafetyConfig, SafetyVerdict

logger = logging.getLogger(__name__)

COMMAND_SCHEMA_VERSION = 1
FALLBACK_RATIONALE = "fallback"

ACTION_SCHEMA = (
    '{"action": "<one of: ' + ", ".join(a.value for a in AtomicAction) + '>", '
    '"rationale": "<one sentence explaining the choice>"}'
)


@dataclass(frozen=True)
class AgentContext:
    scene: AtomicScene
    memory: MemoryBuffer = field(default_factory=MemoryBuffer)
    guidelines: GuidelineStore = field(default_factory=GuidelineStore)
    safety: SafetyVerdict = EMPTY_VERDICT
    demonstrations: Tuple[Demonstration, ...] = ()


# A reasoner maps a context to (proposed action, rationale). It may raise
# ParseError or ReasonerUnavailable; decide() owns retries and the fallback.
Reasoner = Callable[[AgentContext], Tuple[AtomicAction, str]]


def encode_action(action: AtomicAction, rationale: str = "") -> str:
    return json.dumps({"action": action.value, "rationale": rationale}, ensure_ascii=False)


def _normalize_action_name(name: str) -> str:
    spaced = re.sub(r"(?<=[a-z0-9])(?=[A-Z])", "_", name.strip())
    return re.sub(r"[\s\-]+", "_", spaced).lower()


def first_json_object(text: str) -> Dict[str, Any]:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    raise ParseError("no JSON object found in reply")


def parse_action_reply(text: str | bytes) -> Tuple[AtomicAction, str]:
    """Extract (action, rationale) from the first well-formed JSON object in a reasoner reply."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        raise ParseError(f"reply must be text, got {type(text).__name__}")
    command = first_json_object(text)
    if "action" not in command:
        raise ParseError("missing \"action\" key")
    name = command["action"]
    if not isinstance(name, str):
        raise ParseError(f"action must be a string, got {type(name).__name__}")
    try:
        action = AtomicAction(_normalize_action_name(name))
    except ValueError:
        raise ParseError(f"unknown action: {name!r}")
    rationale = command.get("rationale")
    return action, "" if rationale is None else str(rationale)


def parse_action_command(text: str | bytes) -> AtomicAction:
    return parse_action_reply(text)[0]


def _lane_exists(scene: AtomicScene, action: AtomicAction) -> bool:
    if action == AtomicAction.LANE_CHANGE_LEFT:
        return scene.lane_position.has_left_neighbor
    if action == AtomicAction.LANE_CHANGE_RIGHT:
        return scene.lane_position.has_right_neighbor
    return True


def decide(
    ctx: AgentContext,
    reasoner: Reasoner,
    cfg: Optional[SafetyConfig],
    max_attempts: int = 3,
) -> DecisionRecord:
    """One DriverAgent decision. Never raises for reasoner trouble: it falls back to Stop and flags it.

    `cfg=None` disables the safety shield.
    """
    proposed: Optional[AtomicAction] = None
    rationale = ""
    attempts = 0
    for attempts in range(1, max_attempts + 1):
        try:
            proposed, rationale = reasoner(ctx)
            break
        except (ParseError, ReasonerUnavailable) as e:
            logger.warning("reasoner attempt %d/%d failed at tick %d: %s", attempts, max_attempts, ctx.scene.tick, e)
    failed = proposed is None
    if failed:
        proposed, rationale = AtomicAction.STOP, FALLBACK_RATIONALE

    if cfg is not None:
        final, overridden = enforce(evaluate_safety(ctx.scene, cfg), proposed)
    else:
        final, overridden = proposed, False

    degraded = False
    if not _lane_exists(ctx.scene, final):
        logger.debug("no lane for %s at tick %d, holding speed", final.value, ctx.scene.tick)
        final, overridden, degraded = AtomicAction.MAINTAIN_SPEED, True, True

    return DecisionRecord(
        tick=ctx.scene.tick,
        scene_digest=scene_digest(ctx.scene),
        proposed=proposed,
        final=final,
        overridden=overridden,
        rationale=rationale,
        reasoner_failed=failed,
        degraded=degraded,
        attempts=attempts,
    )

"""CoachAgent: between-episode assessment, guideline generation and the long-term guideline store."""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import TraceError
from .types import (
    Assessment,
    AtomicAction,
    CoachThresholds,
    EpisodeMetrics,
    EpisodeTrace,
    Finding,
    Guideline,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_GUIDELINES = 20

EXCESSIVE_STOPPING = "excessive_stopping"
UNSTEADY_SPEED = "unsteady_speed"
HIGH_OVERRIDE_RATE = "high_override_rate"
COLLISIONS = "collisions"

GUIDELINE_TEMPLATES: Dict[str, str] = {
    EXCESSIVE_STOPPING: "Maintain a consistent and safe speed.",
    HIGH_OVERRIDE_RATE: "Respect safe following distances before the safety system must intervene.",
    UNSTEADY_SPEED: "Avoid unnecessary speed changes; accelerate and brake smoothly.",
    COLLISIONS: "Slow down early and keep extra distance from vehicles that may change lanes or run red lights.",
}


def normalize_text(text: str) -> str:
    return " ".join(text.casefold().split())


@dataclass(frozen=True)
class GuidelineStore:
    guidelines: Tuple[Guideline, ...] = ()
    max_size: int = DEFAULT_MAX_GUIDELINES

    def __len__(self) -> int:
        return len(self.guidelines)

    @property
    def findings(self) -> frozenset:
        return frozenset(g.source_finding for g in self.guidelines)

    def to_dict(self) -> Dict:
        return {"max_size": self.max_size, "guidelines": [asdict(g) for g in self.guidelines]}

    @classmethod
    def from_dict(cls, data: Dict, max_size: Optional[int] = None) -> "GuidelineStore":
        guidelines = tuple(Guideline(**g) for g in data.get("guidelines", []))
        store = cls(max_size=max_size or data.get("max_size", DEFAULT_MAX_GUIDELINES))
        return merge_guidelines(store, guidelines)


# --- assessment -----------------------------------------------------------

def stop_onsets(actions: List[AtomicAction]) -> int:
    return sum(
        1 for i, a in enumerate(actions)
        if a == AtomicAction.STOP and (i == 0 or actions[i - 1] != AtomicAction.STOP)
    )


def speed_direction_changes(speeds: List[float], eps: float = 1e-9) -> int:
    signs = []
    for before, after in zip(speeds, speeds[1:]):
        delta = after - before
        if abs(delta) > eps:
            signs.append(1 if delta > 0 else -1)
    return sum(1 for a, b in zip(signs, signs[1:]) if a != b)


def episode_metrics(trace: EpisodeTrace) -> EpisodeMetrics:
    records = trace.records
    if not records:
        raise TraceError("cannot assess an empty trace")
    duration = trace.footer.total_time or records[-1].sim_time
    if duration <= 0:
        raise TraceError("trace covers no simulated time")
    return EpisodeMetrics(
        stop_frequency=stop_onsets([r.final for r in records]) / duration,
        speed_change_frequency=speed_direction_changes([r.speed for r in records]) / duration,
        override_rate=sum(1 for r in records if r.overridden) / len(records),
        collision_count=sum(1 for r in records for c in r.collisions if c.ego_involved),
    )


def assess_episode(trace: EpisodeTrace, thresholds: Optional[CoachThresholds] = None) -> Assessment:
    thresholds = thresholds or CoachThresholds()
    metrics = episode_metrics(trace)
    checks = [
        (COLLISIONS, float(metrics.collision_count), float(thresholds.collision_count)),
        (EXCESSIVE_STOPPING, metrics.stop_frequency, thresholds.stop_frequency),
        (UNSTEADY_SPEED, metrics.speed_change_frequency, thresholds.speed_change_frequency),
        (HIGH_OVERRIDE_RATE, metrics.override_rate, thresholds.override_rate),
    ]
    findings = tuple(Finding(tag, value, limit) for tag, value, limit in checks if value > limit)
    quality = "Bad" if findings else "Good"
    logger.info("episode assessed %s (%s)", quality, ", ".join(f.tag for f in findings) or "no findings")
    return Assessment(quality=quality, metrics=metrics, reasons=findings)


def generate_guidelines(assessment: Assessment, episode_index: int = 0) -> List[Guideline]:
    if assessment.quality == "Good":
        return []
    return [
        Guideline(
            id=f"g{episode_index}-{finding.tag}",
            text=GUIDELINE_TEMPLATES[finding.tag],
            source_finding=finding.tag,
            created_at=episode_index,
        )
        for finding in assessment.reasons
        if finding.tag in GUIDELINE_TEMPLATES
    ]


# --- store ----------------------------------------------------------------

def merge_guidelines(store: GuidelineStore, new: Iterable[Guideline]) -> GuidelineStore:
    """Append guidelines with unseen normalized text, evicting the oldest beyond max_size.

    A batch keeps at most max_size of its distinct texts, the newest ones, and
    guidelines whose text the batch repeats are evicted last. Merging the same
    batch twice is therefore the same as merging it once.
    """
    batch: Dict[str, Guideline] = {}
    for guideline in new:
        key = normalize_text(guideline.text)
        if key and key not in batch:
            batch[key] = guideline
    keep = set(list(batch)[-store.max_size:])

    merged = list(store.guidelines)
    seen = {normalize_text(g.text) for g in merged}
    ids = {g.id for g in merged}
    for key, guideline in batch.items():
        if key not in keep or key in seen:
            continue
        if guideline.id in ids:
            n = 1
            while f"{guideline.id}.{n}" in ids:
                n += 1
            guideline = Guideline(f"{guideline.id}.{n}", guideline.text, guideline.source_finding, guideline.created_at)
        merged.append(guideline)
        seen.add(key)
        ids.add(guideline.id)

    excess = len(merged) - store.max_size
    if excess > 0:
        evictable = [i for i, g in enumerate(merged) if normalize_text(g.text) not in keep]
        evicted = set(evictable[:excess])
        merged = [g for i, g in enumerate(merged) if i not in evicted]
    return GuidelineStore(tuple(merged), store.max_size)


def render_guidelines_text(store: GuidelineStore) -> str:
    if not store.guidelines:
        return "no guidelines yet"
    return "\n".join(f"{i}. {g.text}" for i, g in enumerate(store.guidelines, 1))


def load_store(path: str | Path, max_size: int = DEFAULT_MAX_GUIDELINES) -> GuidelineStore:
    path = Path(path)
    if not path.exists():
        return GuidelineStore(max_size=max_size)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise TraceError(f"guideline store {path} is not valid JSON: {e}")
    return GuidelineStore.from_dict(data, max_size=max_size)


def save_store(store: GuidelineStore, path: str | Path) -> None:
    Path(path).write_text(json.dumps(store.to_dict(), indent=2), encoding="utf-8")


def merge_into_file(path: str | Path, new: Iterable[Guideline], max_size: int = DEFAULT_MAX_GUIDELINES) -> GuidelineStore:
    """Append-merge guidelines into a persisted store so runs survive process restarts."""
    store = merge_guidelines(load_store(path, max_size), new)
    save_store(store, path)
    return store

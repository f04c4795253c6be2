from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

from .errors import OrderingError
from .types import DecisionRecord

DEFAULT_CAPACITY = 5


@dataclass(frozen=True)
class MemoryBuffer:
    """Fixed-capacity FIFO of recent decisions, oldest first."""

    capacity: int = DEFAULT_CAPACITY
    records: Tuple[DecisionRecord, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last_tick(self) -> int | None:
        return self.records[-1].tick if self.records else None

    def push(self, record: DecisionRecord) -> "MemoryBuffer":
        """Return a new buffer with `record` appended and, when full, the oldest record evicted."""
        if self.records and record.tick <= self.records[-1].tick:
            raise OrderingError(
                f"memory record for tick {record.tick} is not after tick {self.records[-1].tick}"
            )
        return MemoryBuffer(self.capacity, (self.records + (record,))[-self.capacity:])

    def snapshot(self) -> List[Dict]:
        return [
            {**asdict(r), "proposed": r.proposed.value, "final": r.final.value}
            for r in self.records
        ]


def render_memory_text(buffer: MemoryBuffer) -> str:
    if not buffer.records:
        return "no recent actions"
    lines = []
    for r in buffer.records:
        line = f"tick {r.tick}: {r.final.value}"
        if r.overridden:
            line += f" (safety override of {r.proposed.value})"
        lines.append(f"{line} [{r.scene_digest}]")
    return "\n".join(lines)

"""JSON Lines episode traces: header line, one line per tick, footer line."""

import hashlib
import json
from dataclasses import fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, TextIO

from . import __version__
from .errors import IncompatibleTraceError, TraceError
from .types import AtomicAction, CollisionEvent, EpisodeTrace, TickRecord, TraceFooter, TraceHeader

TRACE_SCHEMA_VERSION = 1


def jsonable(value: Any) -> Any:
    """Plain JSON data for dataclasses, enums, tuples and dicts with tuple keys."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {("|".join(k) if isinstance(k, tuple) else str(k)): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value


def dumps(obj: Any) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_digest(config: Any) -> str:
    return hashlib.sha256(dumps(config).encode("utf-8")).hexdigest()[:16]


def _collision(data: Dict) -> CollisionEvent:
    return CollisionEvent(
        tick=data["tick"],
        sim_time=data["sim_time"],
        participants=tuple(data["participants"]),
        ego_involved=data["ego_involved"],
        relative_position=data["relative_position"],
    )


def record_from_dict(data: Dict) -> TickRecord:
    return TickRecord(
        **{
            **data,
            "proposed": AtomicAction(data["proposed"]),
            "final": AtomicAction(data["final"]),
            "collisions": [_collision(c) for c in data["collisions"]],
        }
    )


def footer_from_dict(data: Dict) -> TraceFooter:
    return TraceFooter(**{**data, "collisions": [_collision(c) for c in data["collisions"]]})


def record_line(record: TickRecord) -> str:
    return dumps({"type": "tick", **jsonable(record)})


def write_trace(trace: EpisodeTrace, out: str | Path | TextIO) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="utf-8") as f:
            write_trace(trace, f)
        return
    out.write(dumps({"type": "header", **jsonable(trace.header)}) + "\n")
    for record in trace.records:
        out.write(record_line(record) + "\n")
    out.write(dumps({"type": "footer", **jsonable(trace.footer)}) + "\n")


def trace_to_text(trace: EpisodeTrace) -> str:
    lines = [dumps({"type": "header", **jsonable(trace.header)})]
    lines.extend(record_line(r) for r in trace.records)
    lines.append(dumps({"type": "footer", **jsonable(trace.footer)}))
    return "\n".join(lines) + "\n"


def _parse_lines(lines: Iterable[str]) -> Iterator[Dict]:
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceError(f"line {n} is not valid JSON: {e}")
        if not isinstance(obj, dict) or "type" not in obj:
            raise TraceError(f"line {n} has no record type")
        yield obj


def check_header(header: TraceHeader, require_build: bool = False) -> None:
    if header.schema_version != TRACE_SCHEMA_VERSION:
        raise IncompatibleTraceError(
            f"trace schema version {header.schema_version} is not supported (expected {TRACE_SCHEMA_VERSION})"
        )
    if require_build and header.build_version != __version__:
        raise IncompatibleTraceError(
            f"trace was produced by build {header.build_version}, this is {__version__}"
        )


def parse_trace(lines: Iterable[str]) -> EpisodeTrace:
    objs = list(_parse_lines(lines))
    if len(objs) < 2 or objs[0]["type"] != "header" or objs[-1]["type"] != "footer":
        raise TraceError("trace must start with a header line and end with a footer line")
    header_data = {k: v for k, v in objs[0].items() if k != "type"}
    if header_data.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise IncompatibleTraceError(f"unsupported trace schema version {header_data.get('schema_version')!r}")
    try:
        header = TraceHeader(**header_data)
        records: List[TickRecord] = []
        for obj in objs[1:-1]:
            if obj["type"] != "tick":
                raise TraceError(f"unexpected {obj['type']!r} line inside trace")
            records.append(record_from_dict({k: v for k, v in obj.items() if k != "type"}))
        footer = footer_from_dict({k: v for k, v in objs[-1].items() if k != "type"})
    except (TypeError, KeyError, ValueError) as e:
        raise TraceError(f"malformed trace: {e}")
    for before, after in zip(records, records[1:]):
        if after.tick <= before.tick:
            raise TraceError(f"records out of order at tick {after.tick}")
    return EpisodeTrace(header, records, footer)


def read_trace(path: str | Path) -> EpisodeTrace:
    with open(path, encoding="utf-8") as f:
        return parse_trace(f)

"""Lane graph: lanes, intersection conflict cells, signal heads, crosswalks, routing."""

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import NetworkError
from .types import SignalState

# Route cost charged for one lane change, in meters of equivalent travel.
LANE_CHANGE_COST = 10.0

INF = math.inf


@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    points: Tuple[Tuple[float, float], ...] = ()
    left: Optional[str] = None
    right: Optional[str] = None
    successors: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ConflictCell:
    id: str
    # (lane_id, start offset, end offset)
    spans: Tuple[Tuple[str, float, float], ...]


@dataclass(frozen=True)
class SignalSpec:
    """A signal head governing one approach (one or more parallel lanes)."""

    id: str
    lanes: Tuple[str, ...]
    stop_offset: float
    durations: Tuple[Tuple[SignalState, float], ...]
    initial_state: SignalState = SignalState.GREEN
    initial_elapsed: float = 0.0

    def duration(self, state: SignalState) -> float:
        return dict(self.durations)[state]


@dataclass(frozen=True)
class Crosswalk:
    id: str
    lanes: Tuple[str, ...]
    offset: float
    signal_id: Optional[str] = None


@dataclass(frozen=True)
class RoadNetwork:
    name: str
    lanes: Dict[str, Lane]
    cells: Tuple[ConflictCell, ...] = ()
    signals: Tuple[SignalSpec, ...] = ()
    crosswalks: Tuple[Crosswalk, ...] = ()
    ego_start: Tuple[str, float] = ("", 0.0)
    _predecessors: Dict[str, Tuple[str, ...]] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        validate_network(self)
        preds: Dict[str, List[str]] = {lane_id: [] for lane_id in self.lanes}
        for lane_id in sorted(self.lanes):
            for succ in self.lanes[lane_id].successors:
                preds[succ].append(lane_id)
        self._predecessors.update({k: tuple(v) for k, v in preds.items()})

    @property
    def lane_ids(self) -> List[str]:
        return sorted(self.lanes)

    def predecessors(self, lane_id: str) -> Tuple[str, ...]:
        return self._predecessors.get(lane_id, ())

    def signals_on(self, lane_id: str) -> List[SignalSpec]:
        return [spec for spec in self.signals if lane_id in spec.lanes]

    def cells_on(self, lane_id: str) -> List[Tuple[ConflictCell, float, float]]:
        found = []
        for cell in self.cells:
            for span_lane, start, end in cell.spans:
                if span_lane == lane_id:
                    found.append((cell, start, end))
        return found

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "ego_start": {"lane": self.ego_start[0], "offset": self.ego_start[1]},
            "lanes": [
                {
                    "id": lane.id,
                    "length": lane.length,
                    "points": [list(p) for p in lane.points],
                    "left": lane.left,
                    "right": lane.right,
                    "successors": list(lane.successors),
                }
                for lane in (self.lanes[k] for k in self.lane_ids)
            ],
            "cells": [
                {"id": cell.id, "spans": [{"lane": l, "start": s, "end": e} for l, s, e in cell.spans]}
                for cell in self.cells
            ],
            "signals": [
                {
                    "id": spec.id,
                    "lanes": list(spec.lanes),
                    "stop_offset": spec.stop_offset,
                    "durations": {state.value: seconds for state, seconds in spec.durations},
                    "initial_state": spec.initial_state.value,
                    "initial_elapsed": spec.initial_elapsed,
                }
                for spec in self.signals
            ],
            "crosswalks": [
                {"id": cw.id, "lanes": list(cw.lanes), "offset": cw.offset, "signal": cw.signal_id}
                for cw in self.crosswalks
            ],
        }


def validate_network(network: RoadNetwork) -> None:
    lanes = network.lanes
    if not lanes:
        raise NetworkError("network has no lanes")
    for lane in lanes.values():
        if not lane.length > 0:
            raise NetworkError(f"lane {lane.id}: length must be > 0")
        for ref in (lane.left, lane.right, *lane.successors):
            if ref is not None and ref not in lanes:
                raise NetworkError(f"lane {lane.id}: reference to unknown lane {ref}")
        if lane.left is not None and lanes[lane.left].right != lane.id:
            raise NetworkError(f"lane {lane.id}: left neighbor {lane.left} does not point back")
        if lane.right is not None and lanes[lane.right].left != lane.id:
            raise NetworkError(f"lane {lane.id}: right neighbor {lane.right} does not point back")
        for side in (lane.left, lane.right):
            if side is not None and abs(lanes[side].length - lane.length) > 1e-9:
                raise NetworkError(f"lane {lane.id}: neighbor {side} must have the same length")
    for cell in network.cells:
        if len({span[0] for span in cell.spans}) < 2:
            raise NetworkError(f"cell {cell.id}: must reference at least 2 lanes")
        for lane_id, start, end in cell.spans:
            if lane_id not in lanes:
                raise NetworkError(f"cell {cell.id}: unknown lane {lane_id}")
            if not 0 <= start < end <= lanes[lane_id].length:
                raise NetworkError(f"cell {cell.id}: bad span on {lane_id}")
    for spec in network.signals:
        states = {state for state, _ in spec.durations}
        if states != set(SignalState):
            raise NetworkError(f"signal {spec.id}: needs a duration for red, yellow and green")
        if any(seconds <= 0 for _, seconds in spec.durations):
            raise NetworkError(f"signal {spec.id}: durations must be > 0")
        if not 0 <= spec.initial_elapsed < spec.duration(spec.initial_state):
            raise NetworkError(f"signal {spec.id}: initial_elapsed outside the initial phase")
        for lane_id in spec.lanes:
            if lane_id not in lanes:
                raise NetworkError(f"signal {spec.id}: unknown lane {lane_id}")
            if not 0 < spec.stop_offset <= lanes[lane_id].length:
                raise NetworkError(f"signal {spec.id}: stop line outside lane {lane_id}")
    signal_ids = {spec.id for spec in network.signals}
    for cw in network.crosswalks:
        if cw.signal_id is not None and cw.signal_id not in signal_ids:
            raise NetworkError(f"crosswalk {cw.id}: unknown signal {cw.signal_id}")
        for lane_id in cw.lanes:
            if lane_id not in lanes or not 0 <= cw.offset <= lanes[lane_id].length:
                raise NetworkError(f"crosswalk {cw.id}: bad lane {lane_id}")
    start_lane, start_offset = network.ego_start
    if start_lane not in lanes or not 0 <= start_offset <= lanes[start_lane].length:
        raise NetworkError("ego_start must lie on an existing lane")


def network_from_dict(data: Dict) -> RoadNetwork:
    try:
        lanes = {}
        for raw in data["lanes"]:
            points = tuple(tuple(p) for p in raw.get("points", []))
            length = raw.get("length")
            if length is None:
                length = sum(math.dist(a, b) for a, b in zip(points, points[1:]))
            lanes[raw["id"]] = Lane(
                id=raw["id"],
                length=float(length),
                points=points,
                left=raw.get("left"),
                right=raw.get("right"),
                successors=tuple(raw.get("successors", [])),
            )
        cells = tuple(
            ConflictCell(
                id=raw["id"],
                spans=tuple((s["lane"], float(s["start"]), float(s["end"])) for s in raw["spans"]),
            )
            for raw in data.get("cells", [])
        )
        signals = tuple(
            SignalSpec(
                id=raw["id"],
                lanes=tuple(raw["lanes"]),
                stop_offset=float(raw["stop_offset"]),
                durations=tuple((SignalState(k), float(v)) for k, v in sorted(raw["durations"].items())),
                initial_state=SignalState(raw.get("initial_state", "green")),
                initial_elapsed=float(raw.get("initial_elapsed", 0.0)),
            )
            for raw in data.get("signals", [])
        )
        crosswalks = tuple(
            Crosswalk(
                id=raw["id"],
                lanes=tuple(raw["lanes"]),
                offset=float(raw["offset"]),
                signal_id=raw.get("signal"),
            )
            for raw in data.get("crosswalks", [])
        )
        start = data.get("ego_start") or {"lane": sorted(lanes)[0], "offset": 0.0}
        return RoadNetwork(
            name=data.get("name", "custom"),
            lanes=lanes,
            cells=cells,
            signals=signals,
            crosswalks=crosswalks,
            ego_start=(start["lane"], float(start["offset"])),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise NetworkError(f"malformed network definition: {e}")


def load_network(path: str | Path) -> RoadNetwork:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise NetworkError(f"cannot read network file {path}: {e}")
    return network_from_dict(data)


def default_town() -> RoadNetwork:
    """A 200 m square two-lane clockwise ring with a signalised centre crossing and two crosswalks.

    Each side is split at its midpoint. Lane suffix -0 is the left (outer) lane,
    -1 the right (inner) lane. A one-lane avenue cuts north to south and a
    one-lane street east to west; they cross at the centre.
    """
    corners = {
        "N1": ((0.0, 200.0), (100.0, 200.0)),
        "N2": ((100.0, 200.0), (200.0, 200.0)),
        "E1": ((200.0, 200.0), (200.0, 100.0)),
        "E2": ((200.0, 100.0), (200.0, 0.0)),
        "S1": ((200.0, 0.0), (100.0, 0.0)),
        "S2": ((100.0, 0.0), (0.0, 0.0)),
        "W1": ((0.0, 0.0), (0.0, 100.0)),
        "W2": ((0.0, 100.0), (0.0, 200.0)),
    }
    order = ["N1", "N2", "E1", "E2", "S1", "S2", "W1", "W2"]
    extra = {"N1-1": ("AVE",), "E1-1": ("ST",)}
    lanes: Dict[str, Lane] = {}
    for i, side in enumerate(order):
        (x0, y0), (x1, y1) = corners[side]
        length = math.dist((x0, y0), (x1, y1))
        # outward unit normal of a clockwise ring is the left-hand normal
        nx, ny = -(y1 - y0) / length, (x1 - x0) / length
        following = order[(i + 1) % len(order)]
        for k in (0, 1):
            shift = 3.5 * (1 - k)
            lane_id = f"{side}-{k}"
            lanes[lane_id] = Lane(
                id=lane_id,
                length=length,
                points=((x0 + nx * shift, y0 + ny * shift), (x1 + nx * shift, y1 + ny * shift)),
                left=f"{side}-0" if k == 1 else None,
                right=f"{side}-1" if k == 0 else None,
                successors=(f"{following}-{k}",) + extra.get(lane_id, ()),
            )
    lanes["AVE"] = Lane(id="AVE", length=200.0, points=((100.0, 200.0), (100.0, 0.0)), successors=("S2-1",))
    lanes["ST"] = Lane(id="ST", length=200.0, points=((200.0, 100.0), (0.0, 100.0)), successors=("W2-1",))

    def phases(red: float, green: float, yellow: float):
        return ((SignalState.GREEN, green), (SignalState.RED, red), (SignalState.YELLOW, yellow))

    signals = (
        SignalSpec("center-ave", ("AVE",), 94.0, phases(15.0, 12.0, 3.0), SignalState.GREEN, 0.0),
        SignalSpec("center-st", ("ST",), 94.0, phases(15.0, 12.0, 3.0), SignalState.RED, 0.0),
        SignalSpec("xw-north", ("N2-0", "N2-1"), 47.0, phases(10.0, 20.0, 3.0), SignalState.GREEN, 0.0),
        SignalSpec("xw-south", ("S2-0", "S2-1"), 47.0, phases(10.0, 20.0, 3.0), SignalState.GREEN, 10.0),
    )
    return RoadNetwork(
        name="default-town",
        lanes=lanes,
        cells=(ConflictCell("center", (("AVE", 96.0, 104.0), ("ST", 96.0, 104.0))),),
        signals=signals,
        crosswalks=(
            Crosswalk("xw-north", ("N2-1", "N2-0"), 50.0, "xw-north"),
            Crosswalk("xw-south", ("S2-1", "S2-0"), 50.0, "xw-south"),
        ),
        ego_start=("W2-1", 20.0),
    )


# --- routing --------------------------------------------------------------

class RouteTable:
    """Cost-to-destination over the lane graph, built by reverse Dijkstra from the destination."""

    def __init__(self, network: RoadNetwork, dest_lane: str, dest_offset: float):
        self.network = network
        self.dest_lane = dest_lane
        self.dest_offset = dest_offset
        self.from_start = self._build()

    def _build(self) -> Dict[str, float]:
        network = self.network
        cost = {lane_id: INF for lane_id in network.lanes}
        cost[self.dest_lane] = self.dest_offset
        heap = [(self.dest_offset, self.dest_lane)]
        while heap:
            c, lane_id = heapq.heappop(heap)
            if c > cost[lane_id]:
                continue
            relax: List[Tuple[str, float]] = [
                (pred, network.lanes[pred].length + c) for pred in network.predecessors(lane_id)
            ]
            lane = network.lanes[lane_id]
            # a neighbour reaches this lane by changing over at offset 0
            relax += [(side, LANE_CHANGE_COST + c) for side in (lane.left, lane.right) if side is not None]
            for other, candidate in relax:
                if candidate < cost[other]:
                    cost[other] = candidate
                    heapq.heappush(heap, (candidate, other))
        return cost

    def along(self, lane_id: str, offset: float) -> float:
        """Cost to the destination staying in this lane until its end."""
        if lane_id == self.dest_lane and offset <= self.dest_offset:
            return self.dest_offset - offset
        lane = self.network.lanes[lane_id]
        best = min((self.from_start[s] for s in lane.successors), default=INF)
        return lane.length - offset + best

    def cost(self, lane_id: str, offset: float) -> float:
        lane = self.network.lanes[lane_id]
        options = [self.along(lane_id, offset)]
        options += [LANE_CHANGE_COST + self.along(side, offset) for side in (lane.left, lane.right) if side]
        return min(options)

    def lane_change_hint(self, lane_id: str, offset: float) -> Optional[str]:
        lane = self.network.lanes[lane_id]
        stay = self.along(lane_id, offset)
        best_side, best_cost = None, stay
        for side_name, side in (("left", lane.left), ("right", lane.right)):
            if side is None:
                continue
            via = LANE_CHANGE_COST + self.along(side, offset)
            if via < best_cost - 1e-9:
                best_side, best_cost = side_name, via
        return best_side

    def next_lane(self, lane_id: str) -> Optional[str]:
        successors = self.network.lanes[lane_id].successors
        if not successors:
            return None
        return min(successors, key=lambda s: (self.from_start[s], successors.index(s)))


def reachable_lanes(network: RoadNetwork, start: str) -> List[str]:
    """Every lane reachable from `start` by following successors and lane changes."""
    seen = {start}
    frontier = [start]
    while frontier:
        lane = network.lanes[frontier.pop()]
        for other in (*lane.successors, lane.left, lane.right):
            if other is not None and other not in seen:
                seen.add(other)
                frontier.append(other)
    return sorted(seen)


def iter_path(network: RoadNetwork, lane_id: str, choose_next, limit: float) -> Iterable[Tuple[str, float]]:
    """Yield (lane_id, distance from the start of `lane_id` to the start of that lane) along a path.

    `choose_next(lane_id)` picks the successor; the walk stops once `limit` meters are covered.
    """
    base = 0.0
    current: Optional[str] = lane_id
    visited = 0
    while current is not None and base <= limit and visited < 64:
        yield current, base
        base += network.lanes[current].length
        current = choose_next(current)
        visited += 1

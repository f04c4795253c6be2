"""Ego-centric atomic scenes and their prompt rendering."""

import math
from typing import Optional

from .network import INF
from .types import (
    AtomicScene,
    LaneGaps,
    LanePosition,
    LeadVehicle,
    PedestrianSighting,
    SignalSighting,
)
from .world import WorldState, intersection_ahead, neighbor_gaps, scan_ahead, signal_ahead

DEFAULT_HORIZON = 100.0

# bumped whenever AtomicScene gains, loses or renames a field
SCENE_SCHEMA_VERSION = 1


def observe(world: WorldState, horizon: float = DEFAULT_HORIZON) -> AtomicScene:
    """Pure read of the world from the ego's seat. Distances run along the lane graph."""
    ego = world.ego
    network = world.network
    lead: Optional[LeadVehicle] = None
    pedestrian: Optional[PedestrianSighting] = None
    for sighting in scan_ahead(world, ego, horizon):
        if sighting.kind == "vehicle" and lead is None:
            lead = LeadVehicle(sighting.gap, sighting.speed)
        elif sighting.kind == "pedestrian" and pedestrian is None:
            pedestrian = PedestrianSighting(sighting.gap, sighting.crossing)
        if lead is not None and pedestrian is not None:
            break

    signal = None
    approach = signal_ahead(world, ego, horizon)
    if approach is not None:
        signal = SignalSighting(approach[0].state, approach[1])

    lane = network.lanes[ego.lane_id]

    def gaps(side: Optional[str]) -> Optional[LaneGaps]:
        if side is None:
            return None
        rear, rear_speed, front = neighbor_gaps(world, ego, side, horizon)
        return LaneGaps(rear=rear, front=front, rear_speed=rear_speed)

    destination_distance = 0.0
    hint = None
    if world.route is not None:
        cost = world.route.cost(ego.lane_id, ego.offset)
        destination_distance = cost if cost != INF and not math.isnan(cost) else 0.0
        hint = world.route.lane_change_hint(ego.lane_id, ego.offset)

    return AtomicScene(
        tick=world.tick,
        ego_speed=ego.speed,
        lane_position=LanePosition(ego.lane_id, lane.left is not None, lane.right is not None),
        destination_distance=destination_distance,
        lead_vehicle=lead,
        nearest_pedestrian=pedestrian,
        signal=signal,
        intersection_distance=intersection_ahead(world, ego, horizon),
        left_gaps=gaps(lane.left),
        right_gaps=gaps(lane.right),
        lane_changing=ego.changing_from is not None,
        route_hint=hint,
    )


def _gap_text(value: Optional[float]) -> str:
    return "clear" if value is None else f"{value:.1f} meters"


def render_scene_text(scene: AtomicScene) -> str:
    lines = [
        f"Tick {scene.tick}. You are driving at {scene.ego_speed:.1f} m/s in lane {scene.lane_position.lane_id}."
    ]
    if scene.lead_vehicle is None and scene.nearest_pedestrian is None:
        lines.append("There are no vehicles or pedestrians nearby.")
    if scene.lead_vehicle is not None:
        lines.append(
            f"There is a vehicle {scene.lead_vehicle.distance:.1f} meters ahead "
            f"moving at {scene.lead_vehicle.speed:.1f} m/s."
        )
    if scene.nearest_pedestrian is not None:
        what = "crossing the road" if scene.nearest_pedestrian.crossing else "waiting at the curb"
        lines.append(f"There is a pedestrian {scene.nearest_pedestrian.distance:.1f} meters ahead, {what}.")
    if scene.signal is not None:
        lines.append(f"The traffic light {scene.signal.distance:.1f} meters ahead is {scene.signal.state.value}.")
    else:
        lines.append("There is no traffic light ahead.")
    if scene.intersection_distance is not None:
        lines.append(f"The next intersection is {scene.intersection_distance:.1f} meters ahead.")
    for side, lane_gaps in (("left", scene.left_gaps), ("right", scene.right_gaps)):
        if lane_gaps is None:
            lines.append(f"There is no lane to your {side}.")
        else:
            lines.append(
                f"In the {side} lane the gap behind is {_gap_text(lane_gaps.rear)} "
                f"and the gap ahead is {_gap_text(lane_gaps.front)}."
            )
    if scene.lane_changing:
        lines.append("A lane change is in progress.")
    if scene.route_hint is not None:
        lines.append(f"Your route requires a lane change to the {scene.route_hint}.")
    lines.append(f"Your destination is {scene.destination_distance:.1f} meters away.")
    return "\n".join(lines)


def scene_digest(scene: AtomicScene) -> str:
    """One-line summary kept in short-term memory."""
    parts = [f"v={scene.ego_speed:.1f}"]
    if scene.lead_vehicle is not None:
        parts.append(f"lead={scene.lead_vehicle.distance:.1f}")
    if scene.nearest_pedestrian is not None:
        parts.append(f"ped={scene.nearest_pedestrian.distance:.1f}")
    if scene.signal is not None:
        parts.append(f"sig={scene.signal.state.value}@{scene.signal.distance:.1f}")
    return " ".join(parts)

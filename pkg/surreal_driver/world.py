"""Deterministic lane-graph traffic world advanced in fixed ticks.

Vehicles live at (lane_id, offset of the vehicle centre) and move under
constant-acceleration kinematics. A lane change is a timed discrete transition:
the vehicle switches lane at once and keeps occupying the source lane for
`lane_change_duration` ticks. Every random draw comes from a per-entity stream
derived from the world seed, so NPC behaviour does not depend on what the ego does
until the two interact.
"""

import logging
import math
import random
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Literal, Optional, Set, Tuple

from .errors import NetworkError
from .network import INF, RoadNetwork, RouteTable, iter_path
from .types import (
    NEXT_SIGNAL_STATE,
    AtomicAction,
    BehaviorProfile,
    CollisionEvent,
    PedestrianProfile,
    SignalState,
    SimConfig,
)

logger = logging.getLogger(__name__)

EGO_ID = "ego"
ARRIVAL_RADIUS = 2.0
MAX_DESTINATION_DRAWS = 32
PEDESTRIAN_LENGTH = 1.0
SPAWN_SPACING = 12.0
EGO_SPAWN_CLEARANCE = 30.0


@dataclass
class VehicleState:
    id: str
    lane_id: str
    offset: float
    speed: float
    length: float
    kind: Literal["ego", "npc"] = "npc"
    behavior: Optional[BehaviorProfile] = None
    next_lane: Optional[str] = None
    changing_from: Optional[str] = None
    change_ticks_left: int = 0
    action: AtomicAction = AtomicAction.MAINTAIN_SPEED
    # signal approach already decided on, and whether the NPC chose to run it
    decided_signal: Optional[str] = None
    running_signal: Optional[str] = None

    @property
    def front(self) -> float:
        return self.offset + self.length / 2

    @property
    def rear(self) -> float:
        return self.offset - self.length / 2

    def occupies(self, lane_id: str) -> bool:
        return self.lane_id == lane_id or self.changing_from == lane_id


@dataclass
class PedestrianState:
    id: str
    crosswalk_id: str
    lane_id: str
    offset: float
    crossing: bool = False
    direction: int = 1
    lane_index: int = 0
    ticks_on_lane: int = 0
    cooldown_ticks: int = 0
    jaywalking: bool = False
    length: float = PEDESTRIAN_LENGTH


@dataclass
class SignalHead:
    id: str
    state: SignalState
    elapsed_ticks: int
    phase_durations: Dict[SignalState, float]
    dt: float

    @property
    def phase_timer(self) -> float:
        return self.elapsed_ticks * self.dt

    def phase_ticks(self, state: Optional[SignalState] = None) -> int:
        return max(1, int(round(self.phase_durations[state or self.state] / self.dt)))

    def advance(self) -> None:
        self.elapsed_ticks += 1
        if self.elapsed_ticks >= self.phase_ticks():
            self.elapsed_ticks = 0
            self.state = NEXT_SIGNAL_STATE[self.state]


@dataclass
class WorldState:
    network: RoadNetwork
    config: SimConfig
    seed: int
    vehicles: Dict[str, VehicleState]
    pedestrians: Dict[str, PedestrianState] = field(default_factory=dict)
    signals: Dict[str, SignalHead] = field(default_factory=dict)
    pedestrian_profile: PedestrianProfile = field(default_factory=PedestrianProfile)
    tick: int = 0
    destination: Optional[Tuple[str, float]] = None
    route: Optional[RouteTable] = None
    contacts: Set[Tuple[str, str]] = field(default_factory=set)
    ego_distance: float = 0.0
    destinations_reached: int = 0
    last_advance: float = 0.0
    last_degraded: bool = False
    _streams: Dict[str, random.Random] = field(default_factory=dict, repr=False)

    @property
    def sim_time(self) -> float:
        return self.tick * self.config.dt

    @property
    def ego(self) -> VehicleState:
        return self.vehicles[EGO_ID]

    def stream(self, tag: str) -> random.Random:
        """Independent random stream for one entity or concern, derived from the seed."""
        rng = self._streams.get(tag)
        if rng is None:
            # stable across processes: never the builtin hash()
            derived = (self.seed ^ zlib.crc32(tag.encode("utf-8"))) & 0xFFFFFFFF
            rng = self._streams[tag] = random.Random(derived)
        return rng


# --- construction ---------------------------------------------------------

def new_world(
    network: RoadNetwork,
    config: SimConfig,
    npc_profile: Optional[BehaviorProfile] = None,
    pedestrian_profile: Optional[PedestrianProfile] = None,
    seed: Optional[int] = None,
) -> WorldState:
    npc_profile = npc_profile or BehaviorProfile()
    start_lane, start_offset = network.ego_start
    ego = VehicleState(EGO_ID, start_lane, start_offset, 0.0, config.vehicle_length, kind="ego")
    world = WorldState(
        network=network,
        config=config,
        seed=config.seed if seed is None else seed,
        vehicles={EGO_ID: ego},
        pedestrian_profile=pedestrian_profile or PedestrianProfile(),
    )
    for spec in network.signals:
        head = SignalHead(spec.id, spec.initial_state, 0, dict(spec.durations), config.dt)
        head.elapsed_ticks = min(int(round(spec.initial_elapsed / config.dt)), head.phase_ticks() - 1)
        world.signals[spec.id] = head

    spawn = world.stream("spawn")
    for i in range(config.npc_count):
        npc_id = f"npc-{i:02d}"
        desired = npc_profile.desired_speed + spawn.uniform(-npc_profile.speed_jitter, npc_profile.speed_jitter)
        behavior = replace(npc_profile, desired_speed=min(config.v_max, max(1.0, desired)))
        placed = _free_spot(world, spawn)
        if placed is None:
            logger.warning("could only place %d of %d NPCs", i, config.npc_count)
            break
        lane_id, offset = placed
        npc = VehicleState(npc_id, lane_id, offset, behavior.desired_speed * 0.5, config.vehicle_length, behavior=behavior)
        world.vehicles[npc_id] = npc
        npc.next_lane = _choose_next_lane(world, npc, lane_id)

    for cw in network.crosswalks:
        ped = PedestrianState(f"ped-{cw.id}", cw.id, cw.lanes[0], cw.offset)
        world.pedestrians[ped.id] = ped

    return assign_next_destination(world)


def _free_spot(world: WorldState, rng: random.Random, attempts: int = 200) -> Optional[Tuple[str, float]]:
    network = world.network
    lane_ids = network.lane_ids
    ego = world.vehicles.get(EGO_ID)
    for _ in range(attempts):
        lane_id = lane_ids[rng.randrange(len(lane_ids))]
        length = network.lanes[lane_id].length
        margin = world.config.vehicle_length
        if length <= 2 * margin:
            continue
        offset = rng.uniform(margin, length - margin)
        clear = True
        for v in world.vehicles.values():
            if not v.occupies(lane_id):
                continue
            need = EGO_SPAWN_CLEARANCE if v.kind == "ego" else SPAWN_SPACING
            if abs(v.offset - offset) < need:
                clear = False
                break
        if clear and ego is not None and lane_id != ego.lane_id:
            # keep clear of the ego's lateral neighbours as well
            lane = network.lanes[lane_id]
            if ego.lane_id in (lane.left, lane.right) and abs(ego.offset - offset) < SPAWN_SPACING:
                clear = False
        if clear:
            return lane_id, offset
    return None


# --- routing and path helpers --------------------------------------------

def _choose_next_lane(world: WorldState, vehicle: VehicleState, lane_id: str) -> Optional[str]:
    successors = world.network.lanes[lane_id].successors
    if not successors:
        return None
    if vehicle.kind == "ego":
        if world.route is not None:
            return world.route.next_lane(lane_id)
        return successors[0]
    rng = world.stream(f"npc:{vehicle.id}")
    return successors[rng.randrange(len(successors))]


def path_chooser(world: WorldState, vehicle: VehicleState) -> Callable[[str], Optional[str]]:
    def choose(lane_id: str) -> Optional[str]:
        if lane_id == vehicle.lane_id:
            return vehicle.next_lane
        if vehicle.kind == "ego" and world.route is not None:
            return world.route.next_lane(lane_id)
        successors = world.network.lanes[lane_id].successors
        return successors[0] if successors else None

    return choose


def _path(world: WorldState, vehicle: VehicleState, horizon: float) -> Iterator[Tuple[str, float]]:
    return iter_path(world.network, vehicle.lane_id, path_chooser(world, vehicle), horizon + vehicle.offset)


@dataclass(frozen=True)
class Sighting:
    gap: float
    entity_id: str
    speed: float
    kind: Literal["vehicle", "pedestrian"]
    crossing: bool = True


def scan_ahead(world: WorldState, vehicle: VehicleState, horizon: float) -> List[Sighting]:
    """Vehicles and pedestrians ahead along the vehicle's path, nearest first.

    Gaps are bumper-to-bumper along the lane graph. Waiting pedestrians are
    reported with crossing=False. During a lane change the lane being left is
    scanned as well, since the vehicle still occupies it.
    """
    found: Dict[str, Sighting] = {}
    lanes = list(_path(world, vehicle, horizon))
    if vehicle.changing_from is not None:
        lanes.append((vehicle.changing_from, 0.0))
    for lane_id, base in lanes:
        for other in world.vehicles.values():
            if other.id == vehicle.id or not other.occupies(lane_id):
                continue
            if base == 0.0 and other.offset <= vehicle.offset:
                continue
            gap = max(0.0, base + other.rear - vehicle.front)
            if gap <= horizon and (other.id not in found or gap < found[other.id].gap):
                found[other.id] = Sighting(gap, other.id, other.speed, "vehicle")
        for ped in world.pedestrians.values():
            if ped.lane_id != lane_id:
                continue
            if base == 0.0 and ped.offset + ped.length / 2 <= vehicle.rear:
                continue
            gap = max(0.0, base + ped.offset - ped.length / 2 - vehicle.front)
            if gap <= horizon and ped.id not in found:
                found[ped.id] = Sighting(gap, ped.id, 0.0, "pedestrian", ped.crossing)
    return sorted(found.values(), key=lambda s: (s.gap, s.entity_id))


def signal_ahead(world: WorldState, vehicle: VehicleState, horizon: float) -> Optional[Tuple[SignalHead, float]]:
    """Nearest signal stop line ahead of the vehicle's centre, with the distance from its front bumper."""
    best: Optional[Tuple[SignalHead, float]] = None
    for lane_id, base in _path(world, vehicle, horizon):
        for spec in world.network.signals_on(lane_id):
            if base == 0.0 and spec.stop_offset <= vehicle.offset:
                continue
            distance = max(0.0, base + spec.stop_offset - vehicle.front)
            if distance <= horizon and (best is None or distance < best[1]):
                best = (world.signals[spec.id], distance)
        if best is not None:
            break
    return best


def intersection_ahead(world: WorldState, vehicle: VehicleState, horizon: float) -> Optional[float]:
    best: Optional[float] = None
    for lane_id, base in _path(world, vehicle, horizon):
        for _cell, start, end in world.network.cells_on(lane_id):
            if base == 0.0 and end <= vehicle.rear:
                continue
            distance = max(0.0, base + start - vehicle.front)
            if distance <= horizon and (best is None or distance < best):
                best = distance
        if best is not None:
            break
    return best


def neighbor_gaps(world: WorldState, vehicle: VehicleState, side_lane: str, horizon: float):
    """(rear gap, rear vehicle speed, front gap) on a neighbour lane, one lane deep each way."""
    network = world.network
    rear: Optional[Tuple[float, float]] = None
    front: Optional[float] = None

    def consider(other: VehicleState, shift: float) -> None:
        nonlocal rear, front
        centre = other.offset + shift
        if centre >= vehicle.offset:
            gap = max(0.0, centre - other.length / 2 - vehicle.front)
            if gap <= horizon and (front is None or gap < front):
                front = gap
        else:
            gap = max(0.0, vehicle.rear - (centre + other.length / 2))
            if gap <= horizon and (rear is None or gap < rear[0]):
                rear = (gap, other.speed)

    length = network.lanes[side_lane].length
    for other in world.vehicles.values():
        if other.id == vehicle.id:
            continue
        if other.occupies(side_lane):
            consider(other, 0.0)
            continue
        for pred in network.predecessors(side_lane):
            if other.lane_id == pred:
                consider(other, -network.lanes[pred].length)
        for succ in network.lanes[side_lane].successors:
            if other.lane_id == succ:
                consider(other, length)
    return (rear[0] if rear else None), (rear[1] if rear else None), front


# --- NPC behaviour --------------------------------------------------------

def _braking_distance(speed: float, decel: float) -> float:
    return speed * speed / (2 * decel)


def _beside(world: WorldState, vehicle: VehicleState, lane_id: str) -> bool:
    return any(
        other.id != vehicle.id and other.occupies(lane_id) and other.rear < vehicle.front and other.front > vehicle.rear
        for other in world.vehicles.values()
    )


def npc_policy(world: WorldState, npc_id: str, config: SimConfig) -> AtomicAction:
    """Car following toward the NPC's desired speed, with adversarial lane changes and red-light running.

    Abrupt lane changes ignore front and rear gaps but never steer into a vehicle
    directly beside the NPC.

    Three draws are taken from the NPC's stream on every call regardless of the
    outcome, so the stream position depends only on how often the NPC decided.
    """
    npc = world.vehicles.get(npc_id)
    if npc is None or npc.kind != "npc" or npc.behavior is None:
        return AtomicAction.MAINTAIN_SPEED
    behavior = npc.behavior
    rng = world.stream(f"npc:{npc_id}")
    u_lane, u_side, u_red = rng.random(), rng.random(), rng.random()

    approach = signal_ahead(world, npc, config.horizon)
    if approach is not None:
        head, _ = approach
        if head.state != SignalState.GREEN and npc.decided_signal != head.id:
            npc.decided_signal = head.id
            npc.running_signal = head.id if u_red < behavior.p_run_red else None
            if npc.running_signal:
                logger.debug("%s will run signal %s at tick %d", npc_id, head.id, world.tick)

    if npc.changing_from is None and u_lane < behavior.p_abrupt_lane_change:
        lane = world.network.lanes[npc.lane_id]
        sides = [
            a for a, n in ((AtomicAction.LANE_CHANGE_LEFT, lane.left), (AtomicAction.LANE_CHANGE_RIGHT, lane.right))
            if n and not _beside(world, npc, n)
        ]
        if sides:
            return sides[min(int(u_side * len(sides)), len(sides) - 1)]

    gap = INF
    for sighting in scan_ahead(world, npc, config.horizon):
        if sighting.kind == "vehicle" or sighting.crossing:
            gap = sighting.gap
            break
    if approach is not None:
        head, distance = approach
        must_stop = head.state == SignalState.RED or (
            head.state == SignalState.YELLOW and distance > _braking_distance(npc.speed, config.decel)
        )
        if must_stop and npc.running_signal != head.id:
            gap = min(gap, distance)

    if gap < behavior.following_gap + _braking_distance(npc.speed, config.decel):
        return AtomicAction.DECELERATE
    if npc.speed < behavior.desired_speed - 0.5:
        return AtomicAction.ACCELERATE
    if npc.speed > behavior.desired_speed + 0.5:
        return AtomicAction.DECELERATE
    return AtomicAction.MAINTAIN_SPEED


# --- kinematics -----------------------------------------------------------

def integrate(speed: float, acc: float, dt: float, v_max: float) -> Tuple[float, float]:
    """Closed-form constant-acceleration update clamped to [0, v_max]; returns (speed, displacement)."""
    if acc > 0 and speed + acc * dt > v_max:
        t_cap = max(0.0, (v_max - speed) / acc)
        return v_max, speed * t_cap + 0.5 * acc * t_cap * t_cap + v_max * (dt - t_cap)
    if acc < 0 and speed + acc * dt < 0:
        t_stop = speed / -acc
        return 0.0, speed * t_stop / 2
    return min(v_max, max(0.0, speed + acc * dt)), speed * dt + 0.5 * acc * dt * dt


def _acceleration(action: AtomicAction, config: SimConfig) -> float:
    if action == AtomicAction.ACCELERATE:
        return config.accel
    if action in (AtomicAction.DECELERATE, AtomicAction.STOP):
        return -config.decel
    return 0.0


def _start_lane_change(world: WorldState, vehicle: VehicleState, action: AtomicAction) -> bool:
    lane = world.network.lanes[vehicle.lane_id]
    target = lane.left if action == AtomicAction.LANE_CHANGE_LEFT else lane.right
    if target is None:
        return False
    vehicle.changing_from = vehicle.lane_id
    vehicle.lane_id = target
    vehicle.change_ticks_left = world.config.lane_change_duration
    vehicle.next_lane = _choose_next_lane(world, vehicle, target)
    vehicle.decided_signal = vehicle.running_signal = None
    return True


def _move(world: WorldState, vehicle: VehicleState, action: AtomicAction) -> float:
    config = world.config
    vehicle.speed, advance = integrate(vehicle.speed, _acceleration(action, config), config.dt, config.v_max)
    vehicle.offset += advance
    lane = world.network.lanes[vehicle.lane_id]
    while vehicle.offset > lane.length:
        if vehicle.next_lane is None:
            # dead end: hold at the lane end
            advance -= vehicle.offset - lane.length
            vehicle.offset = lane.length
            vehicle.speed = 0.0
            break
        vehicle.offset -= lane.length
        vehicle.lane_id = vehicle.next_lane
        vehicle.changing_from = None
        vehicle.change_ticks_left = 0
        vehicle.decided_signal = vehicle.running_signal = None
        vehicle.next_lane = _choose_next_lane(world, vehicle, vehicle.lane_id)
        lane = world.network.lanes[vehicle.lane_id]
    if vehicle.change_ticks_left > 0:
        vehicle.change_ticks_left -= 1
        if vehicle.change_ticks_left == 0:
            vehicle.changing_from = None
    return advance


def _crosswalk_clear(world: WorldState, lane_id: str, offset: float, look_ahead: float) -> bool:
    """No vehicle footprint covers the crosswalk span on the lane, nor reaches it within `look_ahead` seconds."""
    half = PEDESTRIAN_LENGTH / 2
    for occ in occupancies(world):
        if occ.pedestrian or occ.lane_id != lane_id:
            continue
        reach = world.vehicles[occ.entity_id].speed * look_ahead
        if occ.lo < offset + half and occ.hi + reach > offset - half:
            return False
    return True


def _advance_pedestrians(world: WorldState) -> None:
    """Walk pedestrians across their crosswalks, one lane at a time.

    A pedestrian never steps onto a lane where a vehicle covers the crosswalk.
    Pedestrians crossing on their walk phase also wait for vehicles that would
    arrive while they are on that lane; jaywalkers do not look.
    """
    profile = world.pedestrian_profile
    dt = world.config.dt
    at_cadence = world.tick % world.config.decision_interval == 0
    ticks_per_lane = max(1, math.ceil(profile.lane_width / profile.walking_speed / dt))
    for ped in (world.pedestrians[k] for k in sorted(world.pedestrians)):
        cw = next(c for c in world.network.crosswalks if c.id == ped.crosswalk_id)
        order = cw.lanes if ped.direction > 0 else tuple(reversed(cw.lanes))
        u = world.stream(f"ped:{ped.id}").random() if at_cadence else 1.0
        if not ped.crossing:
            if ped.cooldown_ticks > 0:
                ped.cooldown_ticks -= 1
                continue
            head = world.signals.get(cw.signal_id) if cw.signal_id else None
            walk_phase = head is None or head.state == SignalState.RED
            if not (walk_phase or u < profile.p_jaywalk):
                continue
            look_ahead = ticks_per_lane * dt if walk_phase else 0.0
            if _crosswalk_clear(world, order[0], cw.offset, look_ahead):
                ped.crossing = True
                ped.jaywalking = not walk_phase
                ped.lane_index = 0
                ped.ticks_on_lane = 0
                ped.lane_id = order[0]
            continue
        if ped.ticks_on_lane + 1 < ticks_per_lane:
            ped.ticks_on_lane += 1
            continue
        if ped.lane_index + 1 >= len(order):
            _finish_crossing(world, ped, order)
            continue
        look_ahead = 0.0 if ped.jaywalking else ticks_per_lane * dt
        if _crosswalk_clear(world, order[ped.lane_index + 1], cw.offset, look_ahead):
            ped.ticks_on_lane = 0
            ped.lane_index += 1
            ped.lane_id = order[ped.lane_index]


def _finish_crossing(world: WorldState, ped: PedestrianState, order: Tuple[str, ...]) -> None:
    ped.crossing = False
    ped.jaywalking = False
    ped.direction = -ped.direction
    ped.lane_index = 0
    ped.ticks_on_lane = 0
    ped.lane_id = order[-1]
    ped.cooldown_ticks = int(round(world.pedestrian_profile.cooldown / world.config.dt))


# --- collisions -----------------------------------------------------------

@dataclass(frozen=True)
class Occupancy:
    entity_id: str
    lane_id: str
    lo: float
    hi: float
    lateral: bool
    pedestrian: bool


def _projected(network: RoadNetwork, occ: Occupancy) -> List[Occupancy]:
    """The occupancy plus its overhang onto successor and predecessor lanes, in their coordinates."""
    spans = [occ]
    length = network.lanes[occ.lane_id].length
    if occ.hi > length:
        for s in network.lanes[occ.lane_id].successors:
            spans.append(replace(occ, lane_id=s, lo=occ.lo - length, hi=occ.hi - length))
    if occ.lo < 0:
        for p in network.predecessors(occ.lane_id):
            shift = network.lanes[p].length
            spans.append(replace(occ, lane_id=p, lo=occ.lo + shift, hi=occ.hi + shift))
    return spans


def occupancies(world: WorldState) -> List[Occupancy]:
    """Every footprint in lane coordinates; a footprint crossing a lane end also appears on the next lane."""
    network = world.network
    spans: List[Occupancy] = []
    for v in world.vehicles.values():
        changing = v.changing_from is not None
        spans += _projected(network, Occupancy(v.id, v.lane_id, v.rear, v.front, changing, False))
        if changing:
            spans += _projected(network, Occupancy(v.id, v.changing_from, v.rear, v.front, True, False))
    for p in world.pedestrians.values():
        if p.crossing:
            half = p.length / 2
            spans.append(Occupancy(p.id, p.lane_id, p.offset - half, p.offset + half, False, True))
    return spans


def _relative(a: Occupancy, b: Occupancy, lateral: bool) -> str:
    if a.pedestrian or b.pedestrian:
        return "pedestrian"
    if lateral or a.lateral or b.lateral:
        return "lateral"
    return "leading"


def current_contacts(world: WorldState) -> Dict[Tuple[str, str], str]:
    """Every overlapping entity pair right now, with its relative position.

    Same-lane entities overlap iff their intervals intersect strictly, which is
    |offset difference| < (len_a + len_b) / 2. Entities on different lanes
    inside the same conflict cell also overlap.
    """
    contacts: Dict[Tuple[str, str], str] = {}
    by_lane: Dict[str, List[Occupancy]] = {}
    for occ in occupancies(world):
        by_lane.setdefault(occ.lane_id, []).append(occ)
    for lane_id in sorted(by_lane):
        items = sorted(by_lane[lane_id], key=lambda o: (o.lo, o.entity_id))
        for i, a in enumerate(items):
            for b in items[i + 1:]:
                if b.lo >= a.hi:
                    break
                if a.entity_id != b.entity_id:
                    pair = tuple(sorted((a.entity_id, b.entity_id)))
                    contacts.setdefault(pair, _relative(a, b, False))
    for cell in world.network.cells:
        inside: List[Occupancy] = []
        for lane_id, start, end in cell.spans:
            inside += [o for o in by_lane.get(lane_id, []) if o.lo < end and o.hi > start]
        for i, a in enumerate(inside):
            for b in inside[i + 1:]:
                if a.entity_id != b.entity_id and a.lane_id != b.lane_id:
                    pair = tuple(sorted((a.entity_id, b.entity_id)))
                    contacts.setdefault(pair, _relative(a, b, True))
    return contacts


def detect_collisions(world: WorldState) -> List[CollisionEvent]:
    """New contacts since the previous call; an overlap that persists is reported once.

    Updates `world.contacts` with the current overlap set.
    """
    current = current_contacts(world)
    events = [
        CollisionEvent(
            tick=world.tick,
            sim_time=world.sim_time,
            participants=pair,
            ego_involved=EGO_ID in pair,
            relative_position=current[pair],
        )
        for pair in sorted(current)
        if pair not in world.contacts
    ]
    world.contacts = set(current)
    return events


def _resolve(world: WorldState, events: List[CollisionEvent]) -> None:
    for event in events:
        if event.ego_involved:
            world.ego.speed = 0.0
        if not world.config.respawn_on_collision:
            continue
        for entity_id in event.participants:
            if entity_id in world.pedestrians:
                ped = world.pedestrians[entity_id]
                if ped.crossing:
                    cw = next(c for c in world.network.crosswalks if c.id == ped.crosswalk_id)
                    _finish_crossing(world, ped, cw.lanes if ped.direction > 0 else tuple(reversed(cw.lanes)))
            elif entity_id != EGO_ID and entity_id in world.vehicles:
                _respawn(world, world.vehicles[entity_id])
    if world.config.respawn_on_collision and events:
        world.contacts = set(current_contacts(world))


def _respawn(world: WorldState, npc: VehicleState) -> None:
    rng = world.stream(f"npc:{npc.id}")
    del world.vehicles[npc.id]
    spot = _free_spot(world, rng)
    world.vehicles[npc.id] = npc
    if spot is None:
        return
    npc.lane_id, npc.offset = spot
    npc.speed = 0.0
    npc.changing_from = None
    npc.change_ticks_left = 0
    npc.decided_signal = npc.running_signal = None
    npc.action = AtomicAction.MAINTAIN_SPEED
    npc.next_lane = _choose_next_lane(world, npc, npc.lane_id)
    logger.debug("respawned %s on %s at %.1f", npc.id, npc.lane_id, npc.offset)


# --- the tick -------------------------------------------------------------

def step(world: WorldState, ego_action: AtomicAction, config: Optional[SimConfig] = None) -> Tuple[WorldState, List[CollisionEvent]]:
    """Advance the world by one tick in place and return it with the collisions that began this tick.

    An ego lane change without a neighbour lane degrades to MaintainSpeed and sets
    `world.last_degraded`.
    """
    config = config or world.config
    if config is not world.config:
        world.config = config

    if world.tick % config.decision_interval == 0:
        for npc_id in sorted(world.vehicles):
            if npc_id != EGO_ID:
                world.vehicles[npc_id].action = npc_policy(world, npc_id, config)

    world.last_degraded = False
    ego_move = ego_action
    if ego_action.is_lane_change:
        if not _start_lane_change(world, world.ego, ego_action):
            world.last_degraded = True
            logger.debug("ego lane change %s degraded at tick %d", ego_action.value, world.tick)
        ego_move = AtomicAction.MAINTAIN_SPEED

    for vehicle_id in sorted(world.vehicles):
        vehicle = world.vehicles[vehicle_id]
        if vehicle.kind == "ego":
            world.last_advance = _move(world, vehicle, ego_move)
            world.ego_distance += world.last_advance
            continue
        action = vehicle.action
        if action.is_lane_change:
            _start_lane_change(world, vehicle, action)
            # lane changes are one-shot
            vehicle.action = AtomicAction.MAINTAIN_SPEED
            action = AtomicAction.MAINTAIN_SPEED
        _move(world, vehicle, action)

    _advance_pedestrians(world)
    for signal_id in sorted(world.signals):
        world.signals[signal_id].advance()
    world.tick += 1

    events = detect_collisions(world)
    for event in events:
        log = logger.info if event.ego_involved else logger.debug
        log("collision %s at tick %d (%s)", "/".join(event.participants), event.tick, event.relative_position)
    _resolve(world, events)
    return world, events


# --- destinations ---------------------------------------------------------

def has_arrived(world: WorldState) -> bool:
    if world.destination is None:
        return True
    lane_id, offset = world.destination
    ego = world.ego
    return ego.lane_id == lane_id and abs(ego.offset - offset) < ARRIVAL_RADIUS


def assign_next_destination(world: WorldState) -> WorldState:
    """Draw a new reachable destination for the ego from the destinations stream."""
    if not has_arrived(world):
        raise ValueError("ego has not reached its current destination")
    network = world.network
    rng = world.stream("destinations")
    ego = world.ego
    lane_ids = network.lane_ids
    for _ in range(MAX_DESTINATION_DRAWS):
        lane_id = lane_ids[rng.randrange(len(lane_ids))]
        length = network.lanes[lane_id].length
        offset = round(rng.uniform(0.1 * length, 0.9 * length), 1)
        if lane_id == ego.lane_id and abs(offset - ego.offset) < ARRIVAL_RADIUS:
            continue
        table = RouteTable(network, lane_id, offset)
        if table.cost(ego.lane_id, ego.offset) == INF:
            continue
        world.destination = (lane_id, offset)
        world.route = table
        ego.next_lane = table.next_lane(ego.lane_id)
        logger.debug("new destination %s@%.1f at tick %d", lane_id, offset, world.tick)
        return world
    raise NetworkError(f"disconnected network: no reachable destination after {MAX_DESTINATION_DRAWS} draws")


def world_summary(world: WorldState) -> Dict:
    """A JSON-ready view of the world without its random streams."""
    return {
        "tick": world.tick,
        "sim_time": world.sim_time,
        "seed": world.seed,
        "destination": list(world.destination) if world.destination else None,
        "ego_distance": world.ego_distance,
        "vehicles": [
            {"id": v.id, "lane": v.lane_id, "offset": v.offset, "speed": v.speed, "kind": v.kind, "changing_from": v.changing_from}
            for v in (world.vehicles[k] for k in sorted(world.vehicles))
        ],
        "pedestrians": [
            {"id": p.id, "lane": p.lane_id, "offset": p.offset, "crossing": p.crossing}
            for p in (world.pedestrians[k] for k in sorted(world.pedestrians))
        ],
        "signals": {k: {"state": h.state.value, "phase_timer": h.phase_timer} for k, h in sorted(world.signals.items())},
    }

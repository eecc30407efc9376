"""Scenes, entities and the synthetic household dataset generator.

Scenes stand in for simulator floor plans: every entity is a typed point in a
rectangular room.  Generation is a pure function of (spec, seed).

"""
import collections
import dataclasses
import hashlib
import json
import logging
import math
import numpy as np
from .catalog import CATALOG, ROOM_TYPES, ROBOT
from .exceptions import BadConfig, BadSplit, NoHazardSource


LOGGER = logging.getLogger("riskgraph")

AGENT_POLICIES = ("none", "random", "near_hazard")

# Entities are kept this far from the walls so injected agents stay inside
WALL_MARGIN = 0.5

# Room height; secured objects sit on a shelf below it
CEILING = 2.5

MAX_ENTITIES = 50

DEFAULT_OBJECT_COUNT = (12, 18)

STATE_FLAGS = ("open", "held", "secured", "cooking")


@dataclasses.dataclass(frozen=True)
class Entity:
    """A positioned, typed scene entity."""

    id: str
    category: str
    position: tuple
    is_agent: bool
    attributes: tuple = ()
    state: tuple = ()

    def __post_init__(self):
        """Check entity invariants."""
        if len(self.position) != 3:
            raise BadConfig(f"{self.id}: position must be a 3-vector")
        if not all(math.isfinite(c) for c in self.position):
            raise BadConfig(f"{self.id}: non-finite position")
        if self.is_agent != CATALOG.is_agent(self.category):
            raise BadConfig(f"{self.id}: is_agent disagrees with category")
        unknown = set(self.attributes) - set(CATALOG.attributes)
        if unknown:
            raise BadConfig(f"{self.id}: unknown attributes {sorted(unknown)}")

    def has(self, *attributes):
        """Return True if the entity carries any of the attributes."""
        return any(a in self.attributes for a in attributes)

    @property
    def is_hazard(self):
        """Return True if the entity carries a hazard attribute."""
        return self.has(*CATALOG.hazard_attributes)


@dataclasses.dataclass(frozen=True)
class Scene:
    """A room full of entities."""

    id: str
    room_type: str
    entities: tuple
    hazard_injected: bool
    rng_seed: int

    def __post_init__(self):
        """Check scene invariants."""
        if self.room_type not in ROOM_TYPES:
            raise BadConfig(f"Unknown room type: {self.room_type}")
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise BadConfig(f"{self.id}: duplicate entity ids")
        if sum(e.category == ROBOT for e in self.entities) != 1:
            raise BadConfig(f"{self.id}: scene needs exactly one {ROBOT}")
        if len(self.entities) < 2:
            raise BadConfig(f"{self.id}: scene needs at least 2 entities")
        width, depth = CATALOG.rooms[self.room_type].size
        for entity in self.entities:
            x, y, z = entity.position
            inside = 0 <= x <= width and 0 <= y <= depth and 0 <= z <= CEILING
            if not inside:
                raise BadConfig(f"{self.id}: {entity.id} outside the room")

    def entity(self, entity_id):
        """Return the entity with the given id, or None."""
        for entity in self.entities:
            if entity.id == entity_id:
                return entity
        return None

    @property
    def robot(self):
        """Return the planning agent."""
        return next(e for e in self.entities if e.category == ROBOT)


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Recipe for one generated scene."""

    room_type: str
    object_count: tuple = DEFAULT_OBJECT_COUNT
    agent_policy: str = "random"
    hazard_probability: float = 1.0
    hazard_agents: tuple = ("Baby", "Child", "Pet")
    hazard_targets: tuple = ()
    random_agents: int = 1
    dt: float = 0.5
    max_entities: int = MAX_ENTITIES

    def __post_init__(self):
        """Check spec invariants."""
        low, high = self.object_count
        if self.room_type not in ROOM_TYPES:
            raise BadConfig(f"Unknown room type: {self.room_type}")
        if not 1 <= low <= high:
            raise BadConfig(f"Empty object count range: {self.object_count}")
        if self.agent_policy not in AGENT_POLICIES:
            raise BadConfig(f"Unknown agent policy: {self.agent_policy}")
        if not 0.0 <= self.hazard_probability <= 1.0:
            raise BadConfig("hazard_probability must be in [0, 1]")
        if self.dt <= 0:
            raise BadConfig("dt must be positive")
        if high + 3 + self.random_agents > self.max_entities:
            raise BadConfig(f"Scene may exceed {self.max_entities} entities")
        for kind in self.hazard_agents:
            if CATALOG.tier(kind) not in ("vulnerable", "aware"):
                raise BadConfig(f"Cannot inject agent kind: {kind}")


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/test scene lists."""

    train: tuple
    val: tuple
    test: tuple

    def items(self):
        """Iterate over (split name, scenes) pairs."""
        return (("train", self.train), ("val", self.val), ("test", self.test))


def _uniform_position(rng, room_type):
    width, depth = CATALOG.rooms[room_type].size
    x = rng.uniform(WALL_MARGIN, width - WALL_MARGIN)
    y = rng.uniform(WALL_MARGIN, depth - WALL_MARGIN)
    return (round(float(x), 4), round(float(y), 4), 0.0)


def _near_position(rng, room_type, anchor, dt):
    """Return a floor position at Uniform(0.1 dt, 0.9 dt) from anchor."""
    width, depth = CATALOG.rooms[room_type].size
    radius = rng.uniform(0.1 * dt, 0.9 * dt)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    x = np.clip(anchor[0] + radius * math.cos(angle), 0.0, width)
    y = np.clip(anchor[1] + radius * math.sin(angle), 0.0, depth)
    return (round(float(x), 4), round(float(y), 4), 0.0)


def make_entity(entity_id, category, position, state=()):
    """Create an entity with the catalog attributes of its category."""
    return Entity(
        id=entity_id,
        category=category,
        position=tuple(float(c) for c in position),
        is_agent=CATALOG.is_agent(category),
        attributes=tuple(sorted(CATALOG.base_attributes(category))),
        state=tuple(sorted(state)),
    )


def generate_scene(spec, seed, scene_id=None):
    """Generate a scene deterministically from (spec, seed)."""
    # pylint: disable=too-many-locals
    room = CATALOG.rooms[spec.room_type]
    targets = spec.hazard_targets or CATALOG.hazard_kinds(spec.room_type)
    targets = tuple(k for k in targets if k in room.fixtures + room.pool)
    if spec.agent_policy == "near_hazard" and not targets:
        raise NoHazardSource(
            f"No hazard-attributed object for room: {spec.room_type}"
        )

    rng = np.random.default_rng(seed)
    low, high = spec.object_count
    n_objects = int(rng.integers(low, high + 1))
    n_extra = max(0, n_objects - len(room.fixtures))
    kinds = list(room.fixtures)
    kinds += [room.pool[i] for i in rng.integers(0, len(room.pool), n_extra)]

    inject = (
        spec.agent_policy == "near_hazard"
        and rng.random() < spec.hazard_probability
    )
    if inject and not any(k in targets for k in kinds):
        kinds.append(targets[int(rng.integers(len(targets)))])

    counters = collections.Counter()
    entities = []

    def add(category, position):
        counters[category] += 1
        entity = make_entity(
            f"{category}_{counters[category]}", category, position
        )
        entities.append(entity)
        return entity

    for kind in kinds:
        add(kind, _uniform_position(rng, spec.room_type))
    add(ROBOT, _uniform_position(rng, spec.room_type))

    if spec.agent_policy == "random":
        agent_kinds = sorted(k for k in CATALOG.agents if k != ROBOT)
        for _ in range(spec.random_agents):
            kind = agent_kinds[int(rng.integers(len(agent_kinds)))]
            add(kind, _uniform_position(rng, spec.room_type))

    if inject:
        kind = spec.hazard_agents[int(rng.integers(len(spec.hazard_agents)))]
        anchors = [e for e in entities if e.category in targets]
        anchor = anchors[int(rng.integers(len(anchors)))]
        agent = add(
            kind,
            _near_position(rng, spec.room_type, anchor.position, spec.dt),
        )
        LOGGER.debug(
            "inject %s near %s distance=%.3f",
            agent.id, anchor.id, distance(agent, anchor),
        )

    if len(entities) > spec.max_entities:
        raise BadConfig(f"Scene has more than {spec.max_entities} entities")
    return Scene(
        id=scene_id or f"{spec.room_type}-{seed}",
        room_type=spec.room_type,
        entities=tuple(entities),
        hazard_injected=inject,
        rng_seed=int(seed),
    )


def generate_dataset(
        n_scenes,
        split,
        seed,
        *,
        object_count=DEFAULT_OBJECT_COUNT,
        dt=0.5):
    """Generate scenes cycling over room types and split them.

    Hazard agents are injected in half of the scenes, balanced per room type.

    """
    if sum(split) != n_scenes or any(n < 0 for n in split):
        raise BadSplit(f"Split {split} does not sum to {n_scenes}")

    scenes = []
    for i in range(n_scenes):
        room_type = ROOM_TYPES[i % len(ROOM_TYPES)]
        inject = (i % len(ROOM_TYPES) + i // len(ROOM_TYPES)) % 2 == 0
        spec = SceneSpec(
            room_type=room_type,
            object_count=tuple(object_count),
            agent_policy="near_hazard" if inject else "random",
            dt=dt,
        )
        scene_seed = int(np.random.default_rng([seed, i]).integers(2**31))
        scenes.append(generate_scene(spec, scene_seed, f"scene-{i:04d}"))

    order = np.random.default_rng(seed).permutation(n_scenes)
    bounds = np.cumsum([0] + list(split))
    parts = [
        tuple(scenes[j] for j in sorted(order[bounds[k]:bounds[k + 1]]))
        for k in range(3)
    ]
    LOGGER.info(
        "Generated %s scenes: %s/%s/%s, %s with injected hazards",
        n_scenes, *split, sum(s.hazard_injected for s in scenes),
    )
    return DatasetSplit(train=parts[0], val=parts[1], test=parts[2])


def distance(entity_a, entity_b):
    """Return the Euclidean distance between two entities in meters."""
    return math.dist(entity_a.position, entity_b.position)


def scene_to_dict(scene):
    """Return a JSON-ready dict with the Scene field names."""
    return dataclasses.asdict(scene)


def scene_from_dict(doc):
    """Inverse of scene_to_dict."""
    entities = tuple(
        Entity(
            id=e["id"],
            category=e["category"],
            position=tuple(e["position"]),
            is_agent=e["is_agent"],
            attributes=tuple(e.get("attributes", ())),
            state=tuple(e.get("state", ())),
        )
        for e in doc["entities"]
    )
    return Scene(
        id=doc["id"],
        room_type=doc["room_type"],
        entities=entities,
        hazard_injected=doc["hazard_injected"],
        rng_seed=doc["rng_seed"],
    )


def dumps_scene(scene):
    """Serialize a scene to one line of JSON."""
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def write_scenes(path, scenes):
    """Write scenes as JSON Lines."""
    with open(path, "w", encoding="utf-8") as outfile:
        for scene in scenes:
            outfile.write(dumps_scene(scene) + "\n")
    LOGGER.debug("%s scenes=%s", path, len(scenes))


def read_scenes(path):
    """Read scenes from a JSON Lines file."""
    with open(path, encoding="utf-8") as infile:
        return [
            scene_from_dict(json.loads(line))
            for line in infile if line.strip()
        ]


def scene_digest(scene):
    """Return a stable short hash of the sorted entity states."""
    rows = sorted(
        (e.id, e.category, e.position, e.attributes, e.state)
        for e in scene.entities
    )
    blob = json.dumps(rows, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def scene_summary(scene):
    """Describe a scene in plain text for planner prompts."""
    lines = [f"Room: {scene.room_type}", "Entities:"]
    for entity in scene.entities:
        x, y, z = entity.position
        flags = ", ".join(entity.attributes + entity.state)
        suffix = f" [{flags}]" if flags else ""
        lines.append(
            f"- {entity.id} ({entity.category}) "
            f"at ({x:.2f}, {y:.2f}, {z:.2f}){suffix}"
        )
    return "\n".join(lines)

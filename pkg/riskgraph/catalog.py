"""Entity catalog: the closed, versioned set of categories a scene may contain.

The catalog lives in ``data/catalog.json``.  Serialized category names are the
keys of that file and never change within a catalog version.

"""
import dataclasses
import hashlib
import importlib.resources
import json
from .exceptions import BadConfig


ROOM_TYPES = ("kitchen", "living_room", "bedroom", "bathroom")

# Attribute name -> risk types it contributes to an annotation
ATTRIBUTE_RISK_TYPES = {
    "hot": ("thermal", "physical"),
    "sharp": ("sharp", "physical"),
    "electrical": ("electrical",),
    "water_source": ("water",),
}

ROBOT = "Robot"


@dataclasses.dataclass(frozen=True)
class Room:
    """Geometry and object pools for one room type."""

    name: str
    size: tuple
    fixtures: tuple
    pool: tuple


@dataclasses.dataclass(frozen=True)
class Catalog:
    """Category catalog loaded from a JSON document."""

    version: str
    digest: str
    attributes: tuple
    hazard_attributes: frozenset
    objects: dict
    agents: dict
    rooms: dict

    @property
    def kinds(self):
        """Return every category name, objects first, in stable order."""
        return tuple(sorted(self.objects)) + tuple(sorted(self.agents))

    def check(self, kind):
        """Raise BadConfig if kind is not in the catalog."""
        if kind not in self.objects and kind not in self.agents:
            raise BadConfig(f"Unknown category: {kind}")

    def is_agent(self, kind):
        """Return True if kind is an agent category."""
        self.check(kind)
        return kind in self.agents

    def tier(self, kind):
        """Return the agent tier (vulnerable, aware, planner) or None."""
        if not self.is_agent(kind):
            return None
        return self.agents[kind]["tier"]

    def base_attributes(self, kind):
        """Return the static attribute set of a category."""
        self.check(kind)
        if kind in self.agents:
            return frozenset()
        return frozenset(self.objects[kind]["attributes"])

    def is_movable(self, kind):
        """Return True if an object of this kind can be carried."""
        if self.is_agent(kind):
            return True
        return self.objects[kind]["movable"]

    def is_food(self, kind):
        """Return True for cooking ingredients."""
        return kind in self.objects and self.objects[kind].get("food", False)

    def hazard_kinds(self, room_type):
        """Return the hazard-attributed kinds that may appear in a room."""
        room = self.rooms[room_type]
        return tuple(sorted({
            kind for kind in room.fixtures + room.pool
            if self.base_attributes(kind) & self.hazard_attributes
        }))

    def resolve(self, name):
        """Map a free-text category name to its catalog spelling, or None."""
        folded = name.replace(" ", "").replace("_", "").lower()
        for kind in self.kinds:
            if kind.lower() == folded:
                return kind
        # Simple plurals such as "apples"
        if folded.endswith("s"):
            return self.resolve(folded[:-1])
        return None


def parse_catalog(text):
    """Build a Catalog from JSON text."""
    doc = json.loads(text)
    rooms = {
        name: Room(
            name=name,
            size=tuple(spec["size"]),
            fixtures=tuple(spec["fixtures"]),
            pool=tuple(spec["pool"]),
        )
        for name, spec in doc["rooms"].items()
    }
    if set(rooms) != set(ROOM_TYPES):
        raise BadConfig(f"Catalog rooms must be exactly {ROOM_TYPES}")
    planners = [k for k, v in doc["agents"].items() if v["tier"] == "planner"]
    if planners != [ROBOT]:
        raise BadConfig("Catalog must define exactly one planning agent")
    return Catalog(
        version=doc["version"],
        digest=hashlib.sha256(text.encode("utf-8")).hexdigest(),
        attributes=tuple(doc["attributes"]),
        hazard_attributes=frozenset(doc["hazard_attributes"]),
        objects=doc["objects"],
        agents=doc["agents"],
        rooms=rooms,
    )


def load_catalog():
    """Load the packaged catalog."""
    text = importlib.resources.files("riskgraph").joinpath(
        "data/catalog.json"
    ).read_text(encoding="utf-8")
    return parse_catalog(text)


CATALOG = load_catalog()

"""Spatio-semantic safety graphs.

Nodes are scene entities, edges are entity pairs.  Each edge carries the
danger score S = r * SP and its hazard label.  Model inputs (node features X,
adjacency A and edge features) hold geometry and category information only;
r, S and the label never leak into them.

"""
import dataclasses
import functools
import itertools
import json
import logging
import numpy as np
from .annotate import RISK_VALUES
from .catalog import CATALOG, ROBOT
from .exceptions import BadConfig, InvalidRiskValue, MissingAnnotation
from .scene import CEILING, distance


LOGGER = logging.getLogger("riskgraph")

SP_MODES = ("clamped", "paper_literal")
EDGE_POLICIES = ("complete", "radius")

# Edge feature value of SP is capped so near-zero distances stay finite
SP_FEATURE_CAP = 10.0

NODE_DIM = len(CATALOG.kinds) + len(CATALOG.attributes) + 1 + 3

INTERACTION_FLAGS = (
    "vulnerable_hot",
    "vulnerable_sharp",
    "vulnerable_electrical",
    "vulnerable_water",
    "aware_hazard",
    "water_electrical",
    "same_hazard_kind",
    "robot",
)

EDGE_DIM = 5 + len(INTERACTION_FLAGS)


@dataclasses.dataclass(frozen=True)
class GraphConfig:
    """Safety graph construction parameters."""

    dt: float = 0.5
    sp_mode: str = "clamped"
    label_threshold: float = 1.0
    edge_policy: str = "complete"
    radius: float = 0.0
    epsilon: float = 1e-6

    def __post_init__(self):
        """Check config invariants."""
        if self.dt <= 0:
            raise BadConfig("DT must be positive")
        if self.label_threshold <= 0:
            raise BadConfig("label threshold must be positive")
        if self.sp_mode not in SP_MODES:
            raise BadConfig(f"Unknown sp_mode: {self.sp_mode}")
        if self.edge_policy not in EDGE_POLICIES:
            raise BadConfig(f"Unknown edge policy: {self.edge_policy}")
        if self.edge_policy == "radius" and self.radius <= 0:
            raise BadConfig("radius policy needs R > 0")
        if self.epsilon <= 0:
            raise BadConfig("epsilon must be positive")


@dataclasses.dataclass(frozen=True)
class EdgeRecord:
    """One undirected edge, i < j."""

    # pylint: disable=too-many-instance-attributes
    i: int
    j: int
    distance: float
    sp: float
    r: float
    danger_score: float
    label: bool
    features: tuple


@dataclasses.dataclass(frozen=True, eq=False)
class SafetyGraph:
    """Safety graph of one scene state."""

    scene_id: str
    node_ids: tuple
    categories: tuple
    x: np.ndarray
    adj: np.ndarray
    edges: tuple

    @functools.cached_property
    def edge_index(self):
        """Return an (m, 2) array of endpoint indices."""
        return np.array(
            [(e.i, e.j) for e in self.edges], dtype=np.int64
        ).reshape(-1, 2)

    @functools.cached_property
    def edge_features(self):
        """Return an (m, EDGE_DIM) feature matrix."""
        return np.array(
            [e.features for e in self.edges], dtype=np.float64
        ).reshape(-1, EDGE_DIM)

    @functools.cached_property
    def labels(self):
        """Return the hazard labels as a float vector."""
        return np.array([e.label for e in self.edges], dtype=np.float64)

    def inputs(self):
        """Return the model inputs (X, A, edge index, edge features)."""
        return self.x, self.adj, self.edge_index, self.edge_features


@dataclasses.dataclass(frozen=True)
class LabelStats:
    """Edge label summary over a set of graphs."""

    edges: int
    positives: int

    @property
    def rate(self):
        """Return the positive edge rate."""
        return self.positives / self.edges if self.edges else 0.0


def spatial_proximity(dist, config):
    """Return SP for a distance in meters.

    clamped:       1 / max(d, DT)
    paper_literal: 1 / max(d, epsilon) if d <= DT else 1 / DT

    """
    if dist < 0:
        raise BadConfig(f"Negative distance: {dist}")
    if config.sp_mode == "clamped":
        return 1.0 / max(dist, config.dt)
    if dist <= config.dt:
        return 1.0 / max(dist, config.epsilon)
    return 1.0 / config.dt


def danger_score(r, sp):
    """Return S = r * SP."""
    if r not in RISK_VALUES.values():
        raise InvalidRiskValue(f"Risk value must be one of "
                               f"{sorted(RISK_VALUES.values())}: {r}")
    if not sp > 0:
        raise InvalidRiskValue(f"SP must be positive: {sp}")
    return r * sp


def node_features(entity, room_size):
    """Return the feature vector of one node."""
    kinds = CATALOG.kinds
    onehot = [1.0 if kind == entity.category else 0.0 for kind in kinds]
    flags = [1.0 if entity.has(a) else 0.0 for a in CATALOG.attributes]
    width, depth = room_size
    x, y, z = entity.position
    return onehot + flags + [float(entity.is_agent)] + [
        x / width, y / depth, z / CEILING,
    ]


def interaction_flags(entity_a, entity_b):
    """Return attribute interaction flags of an entity pair (symmetric)."""
    flags = dict.fromkeys(INTERACTION_FLAGS, 0.0)
    for agent, other in ((entity_a, entity_b), (entity_b, entity_a)):
        tier = CATALOG.tier(agent.category)
        if tier == "vulnerable" and not other.is_agent:
            flags["vulnerable_hot"] += other.has("hot")
            flags["vulnerable_sharp"] += other.has("sharp")
            flags["vulnerable_electrical"] += other.has("electrical")
            flags["vulnerable_water"] += other.has("water_source")
        if tier == "aware" and not other.is_agent:
            flags["aware_hazard"] += other.is_hazard
        if (agent.has("water_source") and other.has("electrical")
                and not agent.is_agent and not other.is_agent):
            flags["water_electrical"] = 1.0
    if entity_a.category == entity_b.category and entity_a.is_hazard:
        flags["same_hazard_kind"] = 1.0
    if ROBOT in (entity_a.category, entity_b.category):
        flags["robot"] = 1.0
    return [flags[name] for name in INTERACTION_FLAGS]


def edge_features(entity_a, entity_b, dist, sp):
    """Return the feature vector of one edge."""
    displacement = [
        abs(a - b) for a, b in zip(entity_a.position, entity_b.position)
    ]
    return tuple(
        [dist, min(sp, SP_FEATURE_CAP)] + displacement
        + interaction_flags(entity_a, entity_b)
    )


def build_graph(scene, cache, config):
    """Build the labeled safety graph of a scene."""
    # pylint: disable=too-many-locals
    entities = scene.entities
    n_nodes = len(entities)
    room_size = CATALOG.rooms[scene.room_type].size
    x = np.array(
        [node_features(e, room_size) for e in entities], dtype=np.float64
    ).reshape(n_nodes, NODE_DIM)
    adj = np.zeros((n_nodes, n_nodes), dtype=bool)

    edges = []
    for i, j in itertools.combinations(range(n_nodes), 2):
        entity_a, entity_b = entities[i], entities[j]
        dist = distance(entity_a, entity_b)
        if config.edge_policy == "radius" and dist > config.radius:
            continue
        annotation = cache.get(entity_a.category, entity_b.category)
        if annotation is None:
            raise MissingAnnotation(
                tuple(sorted((entity_a.category, entity_b.category)))
            )
        sp = spatial_proximity(dist, config)
        r = annotation.value
        score = danger_score(r, sp)
        edges.append(EdgeRecord(
            i=i,
            j=j,
            distance=dist,
            sp=sp,
            r=r,
            danger_score=score,
            label=score >= config.label_threshold,
            features=edge_features(entity_a, entity_b, dist, sp),
        ))
        adj[i, j] = adj[j, i] = True

    return SafetyGraph(
        scene_id=scene.id,
        node_ids=tuple(e.id for e in entities),
        categories=tuple(e.category for e in entities),
        x=x,
        adj=adj,
        edges=tuple(edges),
    )


def label_stats(graphs):
    """Count edges and hazardous edges over graphs."""
    if not graphs:
        raise BadConfig("label_stats needs at least one graph")
    total = sum(len(g.edges) for g in graphs)
    positives = sum(e.label for g in graphs for e in g.edges)
    return LabelStats(edges=total, positives=int(positives))


def graph_to_dict(graph):
    """Return the JSON form of a graph."""
    return {
        "scene_id": graph.scene_id,
        "node_ids": list(graph.node_ids),
        "categories": list(graph.categories),
        "x": graph.x.tolist(),
        "adj": graph.adj.astype(int).tolist(),
        "edges": [
            {**dataclasses.asdict(e), "features": list(e.features)}
            for e in graph.edges
        ],
    }


def graph_from_dict(doc):
    """Inverse of graph_to_dict."""
    n_nodes = len(doc["node_ids"])
    return SafetyGraph(
        scene_id=doc["scene_id"],
        node_ids=tuple(doc["node_ids"]),
        categories=tuple(doc["categories"]),
        x=np.array(doc["x"], dtype=np.float64).reshape(n_nodes, NODE_DIM),
        adj=np.array(doc["adj"], dtype=bool).reshape(n_nodes, n_nodes),
        edges=tuple(
            EdgeRecord(**{**e, "features": tuple(e["features"])})
            for e in doc["edges"]
        ),
    )


def write_graphs(path, graphs):
    """Write graphs as JSON Lines."""
    with open(path, "w", encoding="utf-8") as outfile:
        for graph in graphs:
            outfile.write(
                json.dumps(graph_to_dict(graph), separators=(",", ":")) + "\n"
            )
    LOGGER.debug("%s graphs=%s", path, len(graphs))


def read_graphs(path):
    """Read graphs from a JSON Lines file."""
    with open(path, encoding="utf-8") as infile:
        return [
            graph_from_dict(json.loads(line))
            for line in infile if line.strip()
        ]

"""Unit test utilities."""
import filecmp
import pathlib
from riskgraph.episode import make_notice
from riskgraph.scene import Scene, make_entity


# Hand-placed kitchen with every task fixture and no agent but the robot.
# Nothing here is within labeling distance of anything else.
KITCHEN = (
    ("StoveBurner_1", "StoveBurner", (4.0, 3.0)),
    ("Fridge_1", "Fridge", (0.5, 3.5)),
    ("Sink_1", "Sink", (2.5, 3.5)),
    ("Pan_1", "Pan", (3.0, 2.0)),
    ("Apple_1", "Apple", (1.0, 1.0)),
    ("Mug_1", "Mug", (2.0, 1.0)),
    ("Bread_1", "Bread", (3.0, 1.0)),
    ("Tomato_1", "Tomato", (4.0, 1.0)),
    ("Robot_1", "Robot", (2.5, 2.0)),
)


def entity(entity_id, category, x, y, z=0.0, state=()):
    """Return a catalog entity at (x, y, z)."""
    return make_entity(entity_id, category, (x, y, z), state=state)


def kitchen(*extra, scene_id="test-kitchen"):
    """Return the hand-placed kitchen plus extra entities."""
    entities = [entity(i, c, *xy) for i, c, xy in KITCHEN]
    return Scene(
        id=scene_id,
        room_type="kitchen",
        entities=tuple(entities) + tuple(extra),
        hazard_injected=bool(extra),
        rng_seed=0,
    )


def baby_near_knife(scene_id="baby-knife"):
    """Return the kitchen with a baby 0.3 m from a knife."""
    return kitchen(
        entity("Knife_1", "Knife", 1.0, 2.5),
        entity("Baby_1", "Baby", 1.3, 2.5),
        scene_id=scene_id,
    )


class LabelDetector:
    """Detector that flags exactly the labeled edges, probability 1.0."""

    # pylint: disable=too-few-public-methods

    def __init__(self, cache):
        """Keep the annotation cache."""
        self.cache = cache
        self.calls = 0

    def detect(self, scene, graph, threshold):
        """Return a notice per labeled edge."""
        # pylint: disable=unused-argument
        self.calls += 1
        return [
            make_notice(graph, edge, 1.0, self.cache)
            for edge in graph.edges if edge.label
        ]


def assert_dirs_eq(dir1, dir2, ignore=()):
    """Compare two directories of files, skipping names in ignore."""
    assert dir1 != dir2, (
        "Refusing to compare a directory to itself:\n"
        f"dir1 = {dir1}\n"
        f"dir2 = {dir2}\n"
    )

    # Get a list of files in each directory
    dir1 = pathlib.Path(dir1)
    dir2 = pathlib.Path(dir2)
    paths1 = [p for p in dir1.iterdir() if p.name not in ignore]
    paths2 = [p for p in dir2.iterdir() if p.name not in ignore]

    # Sanity checks
    assert paths1, f"Empty directory: {dir1}"
    assert paths2, f"Empty directory: {dir2}"
    assert all(p.is_file() for p in paths1)
    assert all(p.is_file() for p in paths2)
    assert sorted(p.name for p in paths1) == sorted(p.name for p in paths2), (
        "Output file names do not match:\n"
        f"dir1 = {dir1}\n"
        f"dir2 = {dir2}\n"
    )

    # Compare files pairwise
    for path1, path2 in zip(sorted(paths1), sorted(paths2)):
        assert filecmp.cmp(path1, path2, shallow=False), (
            "Files do not match:\n"
            f"path1 = {path1}\n"
            f"path2 = {path2}\n"
        )

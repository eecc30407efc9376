"""Static distance rules checked as a safety invariant at every step.

A rule fires when an agent matching its subject pattern is within max_distance
of an entity matching its object pattern.  Patterns are shell-style globs over
category names.  This is runtime monitoring of G(not hazard) only; there is no
automaton construction.

"""
import dataclasses
import fnmatch
import importlib.resources
import json
import logging
from .exceptions import BadConfig
from .scene import distance


LOGGER = logging.getLogger("riskgraph")

RULE_SETS = ("full", "partial")


@dataclasses.dataclass(frozen=True)
class LtlRule:
    """Distance rule between a subject agent and an object."""

    id: str
    subject: str
    object: str
    max_distance: float
    message: str = ""

    def __post_init__(self):
        """Check rule invariants."""
        if not self.max_distance > 0:
            raise BadConfig(f"{self.id}: max_distance must be positive")

    def matches(self, scene):
        """Return the (subject, object) entity pairs violating the rule."""
        subjects = [
            e for e in scene.entities
            if e.is_agent and fnmatch.fnmatchcase(e.category, self.subject)
        ]
        objects = [
            e for e in scene.entities
            if fnmatch.fnmatchcase(e.category, self.object)
        ]
        return [
            (subject, obj)
            for subject in subjects
            for obj in objects
            if subject.id != obj.id
            and distance(subject, obj) <= self.max_distance
        ]


@dataclasses.dataclass(frozen=True)
class SafetySignal:
    """Monitor verdict for one scene state."""

    safe: bool
    violated_rules: tuple = ()
    messages: tuple = ()


def ltl_evaluate(rules, scene):
    """Check every rule against a scene state."""
    violated, messages = [], []
    for rule in rules:
        if rule.matches(scene):
            violated.append(rule.id)
            messages.append(rule.message or rule.id)
    if violated:
        LOGGER.debug("%s: rules fired %s", scene.id, violated)
    return SafetySignal(
        safe=not violated,
        violated_rules=tuple(violated),
        messages=tuple(messages),
    )


def parse_rules(text):
    """Build rules from a JSON list."""
    try:
        docs = json.loads(text)
        rules = [LtlRule(**doc) for doc in docs]
    except (ValueError, TypeError) as err:
        raise BadConfig(f"Bad rule file: {err}") from err
    ids = [rule.id for rule in rules]
    if len(set(ids)) != len(ids):
        raise BadConfig("Duplicate rule ids")
    return rules


def load_rules(name_or_path):
    """Load a packaged rule set ("full", "partial") or a rule file."""
    if name_or_path in RULE_SETS:
        text = importlib.resources.files("riskgraph").joinpath(
            f"data/rules_{name_or_path}.json"
        ).read_text(encoding="utf-8")
    else:
        try:
            with open(name_or_path, encoding="utf-8") as infile:
                text = infile.read()
        except OSError as err:
            raise BadConfig(f"Cannot read rules: {err}") from err
    return parse_rules(text)

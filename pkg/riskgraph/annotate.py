"""Pairwise risk annotations r(a, b) and their cache.

Annotations come from a backend: the deterministic builtin table or an LLM
over HTTP.  Pairs are stored in canonical (sorted) order, so lookups are
symmetric.

"""
import concurrent.futures
import dataclasses
import itertools
import json
import logging
import threading
import jsonschema
from .catalog import ATTRIBUTE_RISK_TYPES, CATALOG, ROBOT
from .exceptions import (
    BackendUnavailable,
    BadConfig,
    SchemaViolation,
    UnknownRiskLevel,
)
from .llm import load_prompt


LOGGER = logging.getLogger("riskgraph")

RISK_VALUES = {"low": 0.25, "medium": 0.50, "high": 1.00}

RISK_TYPES = (
    "thermal", "physical", "water", "electrical", "sharp", "chemical",
)

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["type1", "type2", "danger_level", "risk_type", "llm_reason"],
    "properties": {
        "type1": {"type": "string"},
        "type2": {"type": "string"},
        "danger_level": {"enum": sorted(RISK_VALUES)},
        "risk_type": {"type": "array", "items": {"type": "string"}},
        "llm_reason": {"type": "string"},
    },
    "if": {"properties": {"danger_level": {"const": "low"}}},
    "else": {"properties": {"risk_type": {"minItems": 1}}},
}

DEFAULT_WORKERS = 4


def risk_value(level):
    """Return the numeric risk value of a level label."""
    try:
        return RISK_VALUES[level]
    except (KeyError, TypeError) as err:
        raise UnknownRiskLevel(f"Unknown risk level: {level!r}") from err


def pair_key(type1, type2):
    """Return the canonical cache key of an unordered category pair."""
    first, second = sorted((type1, type2))
    return f"{first}|{second}"


@dataclasses.dataclass(frozen=True)
class RiskAnnotation:
    """Risk record for an unordered pair of categories."""

    type1: str
    type2: str
    danger_level: str
    risk_type: tuple
    llm_reason: str

    @property
    def key(self):
        """Return the canonical pair key."""
        return pair_key(self.type1, self.type2)

    @property
    def value(self):
        """Return the numeric risk value r."""
        return risk_value(self.danger_level)

    @property
    def unknown_risk_types(self):
        """Return risk types outside the fixed vocabulary."""
        return tuple(t for t in self.risk_type if t not in RISK_TYPES)

    def to_dict(self):
        """Return the JSON form with stable field order."""
        return {
            "type1": self.type1,
            "type2": self.type2,
            "danger_level": self.danger_level,
            "risk_type": list(self.risk_type),
            "llm_reason": self.llm_reason,
        }


def validate_annotation(doc, raw=None):
    """Check doc against the annotation schema and return a RiskAnnotation.

    The pair is canonicalized: type1 <= type2.

    """
    try:
        jsonschema.validate(instance=doc, schema=ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as err:
        raise SchemaViolation(
            f"Annotation does not match schema: {err.message}",
            raw=raw if raw is not None else doc,
        ) from err
    first, second = sorted((doc["type1"], doc["type2"]))
    annotation = RiskAnnotation(
        type1=first,
        type2=second,
        danger_level=doc["danger_level"],
        risk_type=tuple(doc["risk_type"]),
        llm_reason=doc["llm_reason"],
    )
    if annotation.unknown_risk_types:
        LOGGER.warning(
            "%s: unknown risk types %s",
            annotation.key, list(annotation.unknown_risk_types),
        )
    return annotation


class AnnotationCache:
    """Map from canonical pair key to annotation and source tag.

    Reads are lock free.  Writes, and backend queries for the same pair, are
    serialized.

    """

    def __init__(self):
        """Create an empty cache."""
        self._entries = {}
        self._lock = threading.Lock()
        self._pair_locks = {}

    def __len__(self):
        """Return the number of annotated pairs."""
        return len(self._entries)

    def __contains__(self, key):
        """Return True if a canonical key is cached."""
        return key in self._entries

    def get(self, type1, type2):
        """Return the annotation of a pair or None."""
        entry = self._entries.get(pair_key(type1, type2))
        return entry[0] if entry else None

    def source(self, type1, type2):
        """Return the source tag of a cached pair."""
        return self._entries[pair_key(type1, type2)][1]

    def put(self, annotation, source):
        """Store an annotation, keeping the first entry for a pair."""
        with self._lock:
            self._entries.setdefault(annotation.key, (annotation, source))
            return self._entries[annotation.key][0]

    def pair_lock(self, key):
        """Return the lock that serializes backend queries for a pair."""
        with self._lock:
            return self._pair_locks.setdefault(key, threading.Lock())

    def items(self):
        """Return (key, annotation, source) triples in key order."""
        return [
            (key, *self._entries[key]) for key in sorted(self._entries)
        ]

    def replace_values(self, level):
        """Return a copy whose every annotation has the given level."""
        clone = AnnotationCache()
        for _, annotation, source in self.items():
            clone.put(
                dataclasses.replace(annotation, danger_level=level), source
            )
        return clone

    def dumps(self):
        """Serialize to pretty-printed JSON in canonical key order."""
        doc = {}
        for key, annotation, source in self.items():
            doc[key] = {**annotation.to_dict(), "source": source}
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path):
        """Write the cache file."""
        with open(path, "w", encoding="utf-8") as outfile:
            outfile.write(self.dumps())
        LOGGER.debug("%s pairs=%s", path, len(self))

    @classmethod
    def loads(cls, text):
        """Inverse of dumps."""
        try:
            doc = json.loads(text)
        except ValueError as err:
            raise SchemaViolation(f"Bad cache file: {err}", raw=text) from err
        cache = cls()
        for entry in doc.values():
            entry = dict(entry)
            source = entry.pop("source", "builtin")
            cache.put(validate_annotation(entry), source)
        return cache

    @classmethod
    def load(cls, path):
        """Read a cache file."""
        try:
            with open(path, encoding="utf-8") as infile:
                text = infile.read()
        except OSError as err:
            raise BadConfig(f"Cannot read annotations: {err}") from err
        return cls.loads(text)


def _risk_types(attributes):
    found = {t for a in attributes for t in ATTRIBUTE_RISK_TYPES[a]}
    return tuple(t for t in RISK_TYPES if t in found)


def builtin_annotation(type1, type2):
    """Annotate a pair from static attribute interaction rules."""
    # pylint: disable=too-many-return-statements,too-many-branches
    first, second = sorted((type1, type2))
    attrs = {k: CATALOG.base_attributes(k) for k in (first, second)}
    hazard = CATALOG.hazard_attributes

    def record(level, risk_types, reason):
        return RiskAnnotation(first, second, level, tuple(risk_types), reason)

    if ROBOT in (first, second):
        return record("low", (), f"The robot is not endangered by {first}.")

    if first == second:
        if attrs[first] & hazard:
            return record(
                "medium", _risk_types(attrs[first] & hazard),
                f"Two {first} objects close together can injure whoever "
                "handles them.",
            )
        return record("low", (), f"Two {first} entities pose no extra risk.")

    agents = [k for k in (first, second) if CATALOG.is_agent(k)]
    if len(agents) == 2:
        return record("low", (), f"{first} and {second} can share a room.")

    if len(agents) == 1:
        agent = agents[0]
        other = second if agent == first else first
        tier = CATALOG.tier(agent)
        risky = attrs[other] & hazard
        if tier == "vulnerable" and risky:
            return record(
                "high", _risk_types(attrs[other]),
                f"A {agent} within reach of a {other} can be badly hurt; "
                f"the {other} is {' and '.join(sorted(risky))}.",
            )
        if tier == "vulnerable" and attrs[other]:
            return record(
                "medium", _risk_types(attrs[other]),
                f"A {agent} playing with a {other} risks "
                f"{' or '.join(_risk_types(attrs[other]))} injury.",
            )
        if tier == "aware" and risky:
            return record(
                "medium", _risk_types(risky),
                f"An {agent} can be hurt by a {other} in a moment of "
                "inattention.",
            )
        return record("low", (), f"A {agent} near a {other} is harmless.")

    for wet, powered in ((first, second), (second, first)):
        if "water_source" in attrs[wet] and "electrical" in attrs[powered]:
            return record(
                "medium", ("electrical", "water"),
                f"Water from the {wet} near the {powered} can cause an "
                "electric shock or short circuit.",
            )
    return record("low", (), f"{first} and {second} do not interact.")


class BuiltinBackend:
    """Deterministic offline annotation backend."""

    # pylint: disable=too-few-public-methods
    source = "builtin"

    def __init__(self):
        """Count queries so tests can assert cache hits."""
        self.calls = 0

    def annotate(self, type1, type2):
        """Return the raw annotation document for a pair."""
        self.calls += 1
        return builtin_annotation(type1, type2).to_dict()


class LlmAnnotationBackend:
    """Annotation backend that asks an LLM for a JSON record."""

    # pylint: disable=too-few-public-methods
    source = "llm"

    def __init__(self, client):
        """Wrap an LlmClient."""
        self.client = client
        self.system = load_prompt("annotate")
        self.calls = 0

    def annotate(self, type1, type2):
        """Query the LLM and decode its JSON reply."""
        self.calls += 1
        text = self.client.complete(
            self.system, f"type1: {type1}\ntype2: {type2}", prompt="annotate"
        )
        start, end = text.find("{"), text.rfind("}")
        try:
            return json.loads(text[start:end + 1] if start >= 0 else text)
        except ValueError as err:
            raise SchemaViolation(
                f"Reply is not JSON: {err}", raw=text
            ) from err


def annotate_pair(type1, type2, backend, cache):
    """Return the annotation of a pair, querying backend on a cache miss."""
    CATALOG.check(type1)
    CATALOG.check(type2)
    key = pair_key(type1, type2)
    cached = cache.get(type1, type2)
    if cached is not None:
        return cached
    with cache.pair_lock(key):
        cached = cache.get(type1, type2)
        if cached is not None:
            return cached
        LOGGER.debug("annotate %s via %s", key, backend.source)
        doc = backend.annotate(*sorted((type1, type2)))
        annotation = validate_annotation(doc)
        if annotation.key != key:
            raise SchemaViolation(
                f"Backend answered {annotation.key} for {key}", raw=doc
            )
        return cache.put(annotation, backend.source)


def annotate_pairs(
        pairs,
        backend,
        cache,
        *,
        max_workers=DEFAULT_WORKERS,
        fallback=None):
    """Annotate many pairs with bounded parallelism.

    Each distinct pair is queried at most once.  When fallback is given,
    pairs whose backend is unreachable are annotated by fallback instead.

    """
    keys = sorted({pair_key(a, b) for a, b in pairs} - set(
        key for key, _, _ in cache.items()
    ))
    LOGGER.info("Annotating %s pairs via %s", len(keys), backend.source)

    def work(key):
        type1, type2 = key.split("|")
        try:
            return annotate_pair(type1, type2, backend, cache)
        except BackendUnavailable:
            if fallback is None:
                raise
            LOGGER.warning("%s: backend unavailable, using fallback", key)
            return annotate_pair(type1, type2, fallback, cache)

    futures = []
    with concurrent.futures.ThreadPoolExecutor(
        max_workers=max_workers
    ) as pool:
        for key in keys:
            futures.append(pool.submit(work, key))
    for future in concurrent.futures.as_completed(futures):
        exception = future.exception()
        if exception:
            raise exception
    LOGGER.info("Finished annotations: %s cached pairs", len(cache))
    return cache


def builtin_risk_table():
    """Return a cache covering every catalog pair, self-pairs included."""
    backend = BuiltinBackend()
    cache = AnnotationCache()
    kinds = CATALOG.kinds
    for type1, type2 in itertools.combinations_with_replacement(kinds, 2):
        annotate_pair(type1, type2, backend, cache)
    return cache

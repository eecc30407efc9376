"""Distance rule monitor tests."""
import json
import pytest
from riskgraph.exceptions import BadConfig
from riskgraph.ltl import LtlRule, load_rules, ltl_evaluate, parse_rules
from . import utils


def baby_at(x):
    """Return the kitchen with a knife and a baby at (x, 2.5)."""
    return utils.kitchen(
        utils.entity("Knife_1", "Knife", 1.0, 2.5),
        utils.entity("Baby_1", "Baby", x, 2.5),
    )


def test_rule_fires_within_distance():
    """A rule fires at and inside its distance, not beyond."""
    rule = LtlRule("baby-knife", "Baby", "Knife", 1.0)
    assert rule.matches(baby_at(1.5))
    assert rule.matches(baby_at(2.0))
    assert not rule.matches(baby_at(2.01))


def test_subject_must_be_agent():
    """Object categories never match as subjects."""
    rule = LtlRule("any-knife", "*", "Knife", 1.0)
    pairs = rule.matches(baby_at(1.3))
    assert [(s.id, o.id) for s, o in pairs] == [("Baby_1", "Knife_1")]


def test_glob_patterns():
    """Patterns match category names shell style."""
    rule = LtlRule("small-hot", "[BCP]*", "Stove*", 1.0)
    scene = utils.kitchen(utils.entity("Pet_1", "Pet", 4.0, 2.5))
    assert rule.matches(scene)


def test_evaluate_is_monotone():
    """Moving the agent closer never clears a violation."""
    rules = load_rules("full")
    previous = False
    for x in (3.0, 2.0, 1.5, 1.2, 1.0):
        signal = ltl_evaluate(rules, baby_at(x))
        assert previous <= (not signal.safe)
        previous = not signal.safe
    assert previous
    assert "baby-knife" in signal.violated_rules
    assert "Baby within 1.0 m of Knife" in signal.messages


def test_safe_kitchen():
    """No rule fires without people or pets."""
    signal = ltl_evaluate(load_rules("full"), utils.kitchen())
    assert signal.safe
    assert signal.violated_rules == ()


def test_packaged_rule_sets():
    """The full set covers more pairs than the partial one."""
    full = load_rules("full")
    partial = load_rules("partial")
    assert len(full) == 68
    assert len(partial) == 6
    assert {r.id for r in partial} <= {r.id for r in full}


def test_partial_set_misses_razor():
    """The partial set has no rule for a razor."""
    scene = utils.kitchen(
        utils.entity("Razor_1", "Razor", 1.0, 2.5),
        utils.entity("Child_1", "Child", 1.3, 2.5),
    )
    assert not ltl_evaluate(load_rules("full"), scene).safe
    assert ltl_evaluate(load_rules("partial"), scene).safe


def test_rule_file(tmp_path):
    """Rule files are JSON lists of rules."""
    path = tmp_path/"rules.json"
    path.write_text(json.dumps([
        {"id": "r1", "subject": "Adult", "object": "Candle",
         "max_distance": 0.3},
    ]), encoding="utf-8")
    rules = load_rules(path)
    assert rules == [LtlRule("r1", "Adult", "Candle", 0.3)]


@pytest.mark.parametrize("text", [
    "not json",
    '[{"id": "r1", "subject": "Baby"}]',
    '[{"id": "r1", "subject": "Baby", "object": "Knife", '
    '"max_distance": 0}]',
    '[{"id": "r1", "subject": "Baby", "object": "Knife", '
    '"max_distance": 1}, {"id": "r1", "subject": "Pet", '
    '"object": "Knife", "max_distance": 1}]',
])
def test_bad_rules(text):
    """Malformed, incomplete, non-positive and duplicate rules fail."""
    with pytest.raises(BadConfig):
        parse_rules(text)


def test_missing_rule_file(tmp_path):
    """Missing rule files are config errors."""
    with pytest.raises(BadConfig):
        load_rules(tmp_path/"nope.json")

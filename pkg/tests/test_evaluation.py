"""Precision-recall, planning metrics, baseline and bench tests."""
import math
import numpy as np
import pytest
from riskgraph.annotate import builtin_risk_table
from riskgraph.episode import EpisodeTrace
from riskgraph.evaluation import (
    PRPoint,
    baseline_csv,
    baseline_table,
    bench,
    bench_csv,
    bench_table,
    compare_baselines,
    planning_metrics,
    plot_pr_curve,
    pr_curve,
    pr_point,
    pr_report,
    random_scores,
    select_threshold,
    write_pr_csv,
)
from riskgraph.exceptions import BadConfig, NoPositives
from riskgraph.ltl import load_rules
from riskgraph.model import ModelConfig, init_model
from riskgraph.planner import get_task
from . import utils


CACHE = builtin_risk_table()


def skewed_scores():
    """Return 10,000 edges, 100 positive, 300 scored high."""
    scores = np.concatenate([
        np.full(90, 0.8), np.full(10, 0.1),
        np.full(210, 0.8), np.full(9690, 0.05),
    ])
    labels = np.concatenate([np.ones(100), np.zeros(9900)])
    return scores, labels


def test_pr_point_counts():
    """Counts at a threshold give the expected precision and recall."""
    scores, labels = skewed_scores()
    point = pr_point(scores, labels, 0.5)
    assert (point.tp, point.fp, point.fn, point.tn) == (90, 210, 10, 9690)
    assert point.flagged == 300
    assert point.precision == pytest.approx(0.30)
    assert point.recall == pytest.approx(0.90)


def test_threshold_is_inclusive():
    """A score equal to the threshold is flagged."""
    point = pr_point([0.21, 0.2], [1, 0], 0.21)
    assert (point.tp, point.fp) == (1, 0)


def test_pr_curve_endpoints():
    """The curve runs from flagging nothing to flagging everything."""
    scores, labels = skewed_scores()
    curve = pr_curve(scores, labels)
    assert [p.threshold for p in curve] == [math.inf, 0.8, 0.1, 0.05, 0.0]
    assert curve[0].flagged == 0
    assert curve[0].precision == 1.0
    assert curve[-1].recall == 1.0
    assert curve[-1].flagged == 10000
    recalls = [p.recall for p in curve]
    assert recalls == sorted(recalls)


def test_pr_curve_equal_scores():
    """All-equal scores give one interior point."""
    curve = pr_curve([0.5] * 4, [1, 0, 0, 1])
    assert [p.threshold for p in curve] == [math.inf, 0.5, 0.0]
    assert curve[1].precision == 0.5
    assert curve[1].recall == 1.0


def test_pr_curve_zero_score_endpoint():
    """A zero score is its own endpoint."""
    curve = pr_curve([0.0, 0.5], [0, 1])
    assert [p.threshold for p in curve] == [math.inf, 0.5, 0.0]


def test_no_positives():
    """PR analysis needs a positive label."""
    with pytest.raises(NoPositives):
        pr_curve([0.1, 0.2], [0, 0])
    with pytest.raises(BadConfig):
        pr_curve([0.1, 0.2], [1])


def test_select_threshold():
    """The highest threshold meeting the recall target wins."""
    scores, labels = skewed_scores()
    curve = pr_curve(scores, labels)
    choice = select_threshold(curve, 0.9)
    assert choice.reached
    assert choice.threshold == 0.8
    assert choice.point.precision == pytest.approx(0.30)
    choice = select_threshold(curve, 0.95)
    assert choice.threshold == 0.1
    assert choice.point.recall == 1.0


def test_select_threshold_unreachable(caplog):
    """An unreachable target falls back to the lowest threshold."""
    curve = pr_curve([0.2, 0.7], [1, 0])
    choice = select_threshold(curve, 1.5)
    assert not choice.reached
    assert choice.threshold == 0.0
    assert "unreachable" in caplog.text


def test_random_scorer_matches_base_rate():
    """A uniform random scorer has precision near the positive rate."""
    labels = np.zeros(10000)
    labels[::100] = 1
    scores = random_scores(len(labels), seed=0)
    point = pr_point(scores, labels, 0.5)
    assert 0.005 <= point.precision <= 0.015
    np.testing.assert_array_equal(scores, random_scores(10000, seed=0))


def test_pr_files_are_deterministic(tmp_path):
    """CSV and SVG output are byte-identical across runs."""
    scores, labels = skewed_scores()
    curve = pr_curve(scores, labels)
    choice = select_threshold(curve)
    for name in ("a", "b"):
        write_pr_csv(tmp_path/f"{name}.csv", curve)
        plot_pr_curve(tmp_path/f"{name}.svg", curve, choice, baseline=0.01)
    assert (tmp_path/"a.csv").read_bytes() == (tmp_path/"b.csv").read_bytes()
    assert (tmp_path/"a.svg").read_bytes() == (tmp_path/"b.svg").read_bytes()
    lines = (tmp_path/"a.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "threshold,tp,fp,fn,tn,precision,recall"
    assert lines[1].startswith("inf,0,0,100,9900,")
    assert len(lines) == len(curve) + 1
    assert b"<svg" in (tmp_path/"a.svg").read_bytes()


def test_pr_report():
    """The report lists the base rate and the selected operating point."""
    scores, labels = skewed_scores()
    curve = pr_curve(scores, labels)
    choice = select_threshold(curve)
    text = pr_report(
        curve, choice,
        at_threshold=pr_point(scores, labels, 0.21),
        random_point=PRPoint(0.21, 1, 99, 0, 0),
    )
    assert "edges: 10000\n" in text
    assert "base rate: 0.010000\n" in text
    assert "selected threshold: 0.800000\n" in text
    assert "  precision: 0.3000\n" in text
    assert "uniform random scorer" in text


def trace(complexity="simple", success=True, hazard=False, noticed=False,
          handled=False):
    """Return a bare episode trace with the given outcome flags."""
    # pylint: disable=too-many-arguments,too-many-positional-arguments
    result = EpisodeTrace("s", "t", complexity, "mock", "none")
    result.task_success = success
    result.hazard_present = hazard
    result.safety_noticed = noticed
    result.safety_handled = handled
    return result


def test_planning_metrics():
    """TSR counts all episodes, SNR and RHS only hazardous ones."""
    traces = [
        trace("simple", True),
        trace("simple", False),
        trace("complex", True, hazard=True, noticed=True, handled=True),
        trace("complex", True, hazard=True, noticed=True),
        trace("complex", False, hazard=True),
    ]
    metrics = planning_metrics(traces)
    assert metrics.episodes == 5
    assert metrics.hazard_episodes == 3
    assert metrics.tsr == 60.0
    assert metrics.snr == 66.67
    assert metrics.rhs == 33.33
    assert metrics.by_complexity["simple"].snr is None
    assert metrics.by_complexity["simple"].tsr == 50.0
    assert "intermediate" not in metrics.by_complexity
    with pytest.raises(BadConfig):
        planning_metrics([])


def hazard_scenes():
    """Return a baby near a knife and a child near a razor."""
    razor = utils.kitchen(
        utils.entity("Razor_1", "Razor", 1.0, 2.5),
        utils.entity("Child_1", "Child", 1.3, 2.5),
        scene_id="child-razor",
    )
    return [utils.baby_near_knife(), razor]


def compare():
    """Run three rule and prompt baselines on the hazard scenes."""
    return compare_baselines(
        hazard_scenes(), [get_task("prepare_meal")],
        model=None,
        cache=CACHE,
        rule_sets={"full": load_rules("full"),
                   "partial": load_rules("partial")},
        baselines=("llm_only", "ltl_full", "ltl_partial"),
        max_workers=2,
    )


def test_compare_baselines():
    """Full rules catch both hazards, partial rules miss the razor."""
    report = compare()
    assert list(report.rows) == ["llm_only", "ltl_full", "ltl_partial"]
    rows = report.rows
    assert rows["llm_only"].snr == 0.0
    assert rows["ltl_full"].snr == 100.0
    assert rows["ltl_full"].rhs == 100.0
    assert rows["ltl_partial"].snr == 50.0
    assert rows["ltl_partial"].rhs == 50.0
    assert all(r.tsr == 100.0 for r in rows.values())
    assert [t.scene_id for t in report.traces["ltl_full"]] == [
        "baby-knife", "child-razor",
    ]


def test_unknown_baseline():
    """Baseline names are checked."""
    with pytest.raises(BadConfig):
        compare_baselines(
            hazard_scenes(), [get_task("prepare_meal")], model=None,
            cache=CACHE, rule_sets={}, baselines=("oracle",),
        )


def test_baseline_tables():
    """Tables are deterministic and show n/a for missing rates."""
    first, second = compare(), compare()
    assert baseline_table(first) == baseline_table(second)
    assert baseline_csv(first) == baseline_csv(second)
    lines = baseline_table(first).splitlines()
    assert lines[0].split() == [
        "baseline", "tasks", "episodes", "hazard", "TSR", "SNR", "RHS",
    ]
    assert set(lines[1]) == {"-", " "}
    assert lines[2].split() == [
        "llm_only", "all", "2", "2", "100.0", "0.0", "0.0",
    ]
    csv_lines = baseline_csv(first).splitlines()
    assert csv_lines[0] == "baseline,tasks,episodes,hazard,tsr,snr,rhs"
    assert "ltl_partial,complex,2,2,100.0,50.0,50.0" in csv_lines


def test_bench():
    """Both pipelines report a median for every stage."""
    model = init_model(ModelConfig(layers=1, heads=2, hidden=8, ffn=8))
    report = bench(
        utils.baby_near_knife(), get_task("prepare_meal"),
        model=model, cache=CACHE, rules=load_rules("full"), runs=2,
    )
    assert list(report.pipelines) == ["graphormer", "ltl"]
    assert report.entities == 11
    for timings in report.pipelines.values():
        assert all(value >= 0 for value in timings.values())
    table = bench_table(report)
    assert "Generate Task Sequence (mock, no LLM latency)" in table
    assert "entities: 11" in table
    assert bench_csv(report).splitlines()[0] == "stage,graphormer,ltl"
    with pytest.raises(BadConfig):
        bench(utils.kitchen(), get_task("prepare_meal"), model=model,
              cache=CACHE, rules=[], runs=0)

"""Classifier and planning metrics, baseline comparison and the stage bench.

Flagging rule everywhere: an edge is flagged when its score >= threshold.

"""
import csv
import dataclasses
import io
import logging
import math
import time
import matplotlib
import numpy as np
from matplotlib.figure import Figure
from .exceptions import BadConfig, NoPositives
from .episode import (
    STAGES,
    EpisodeConfig,
    make_detector,
    run_batch,
    run_episode,
    stage_timings,
)
from .planner import COMPLEXITIES, MockPlanner


LOGGER = logging.getLogger("riskgraph")

DEFAULT_RECALL_TARGET = 0.90

BENCH_RUNS = 10

# name -> (planner factory, hazard source, rule set)
BASELINES = {
    "llm_only": (MockPlanner, "none", None),
    "safe_prompting": (lambda: MockPlanner(safety_prompt=True),
                       "prompt_only", None),
    "ltl_full": (MockPlanner, "ltl", "full"),
    "ltl_partial": (MockPlanner, "ltl", "partial"),
    "graphormer": (MockPlanner, "graphormer", None),
}


@dataclasses.dataclass(frozen=True)
class PRPoint:
    """Confusion counts at one threshold."""

    # pylint: disable=too-many-instance-attributes
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def flagged(self):
        """Return the number of flagged edges."""
        return self.tp + self.fp

    @property
    def precision(self):
        """Return TP / (TP + FP), 1.0 when nothing is flagged."""
        return self.tp / self.flagged if self.flagged else 1.0

    @property
    def recall(self):
        """Return TP / (TP + FN)."""
        positives = self.tp + self.fn
        return self.tp / positives if positives else 0.0


@dataclasses.dataclass(frozen=True)
class ThresholdChoice:
    """Result of select_threshold; reached is False on a fallback."""

    threshold: float
    point: PRPoint
    reached: bool


@dataclasses.dataclass(frozen=True)
class PlanningMetrics:
    """TSR, SNR and RHS in percent; None where no episode applies."""

    episodes: int
    hazard_episodes: int
    tsr: float
    snr: object
    rhs: object
    by_complexity: dict = dataclasses.field(default_factory=dict)


def _check_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise BadConfig("scores and labels must be equal-length vectors")
    if not labels.any():
        raise NoPositives("PR curve needs at least one positive label")
    return scores, labels


def pr_point(scores, labels, threshold):
    """Return the confusion counts at one threshold."""
    scores, labels = _check_scores(scores, labels)
    flagged = scores >= threshold
    return PRPoint(
        threshold=float(threshold),
        tp=int(np.sum(flagged & labels)),
        fp=int(np.sum(flagged & ~labels)),
        fn=int(np.sum(~flagged & labels)),
        tn=int(np.sum(~flagged & ~labels)),
    )


def pr_curve(scores, labels):
    """Return PR points from threshold +inf down to 0.0.

    One point per distinct score, plus an +inf endpoint that flags nothing
    and a 0.0 endpoint that flags everything.

    """
    scores, labels = _check_scores(scores, labels)
    order = np.argsort(-scores, kind="stable")
    ranked, hits = scores[order], labels[order]
    tps = np.cumsum(hits)
    fps = np.cumsum(~hits)
    positives, total = int(labels.sum()), len(labels)
    # Last index of each run of equal scores
    ends = np.flatnonzero(np.append(ranked[1:] != ranked[:-1], True))

    curve = [PRPoint(math.inf, 0, 0, positives, total - positives)]
    for end in ends:
        tp, fp = int(tps[end]), int(fps[end])
        curve.append(PRPoint(
            threshold=float(ranked[end]),
            tp=tp,
            fp=fp,
            fn=positives - tp,
            tn=total - positives - fp,
        ))
    if curve[-1].threshold > 0.0:
        curve.append(PRPoint(0.0, positives, total - positives, 0, 0))
    return curve


def select_threshold(curve, recall_target=DEFAULT_RECALL_TARGET):
    """Return the highest finite threshold whose recall meets the target."""
    finite = [p for p in curve if math.isfinite(p.threshold)]
    if not finite:
        raise BadConfig("PR curve has no finite thresholds")
    meeting = [p for p in finite if p.recall >= recall_target]
    if not meeting:
        lowest = min(finite, key=lambda p: p.threshold)
        LOGGER.warning(
            "Recall target %s unreachable, using threshold %s",
            recall_target, lowest.threshold,
        )
        return ThresholdChoice(lowest.threshold, lowest, reached=False)
    best = max(meeting, key=lambda p: (p.threshold, p.precision))
    return ThresholdChoice(best.threshold, best, reached=True)


def random_scores(n_scores, seed):
    """Return uniform random scores, the no-skill baseline."""
    return np.random.default_rng(seed).random(n_scores)


def write_pr_csv(path, curve):
    """Write a PR curve as CSV."""
    with open(path, "w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile, lineterminator="\n")
        writer.writerow(
            ["threshold", "tp", "fp", "fn", "tn", "precision", "recall"]
        )
        for point in curve:
            writer.writerow([
                repr(point.threshold), point.tp, point.fp, point.fn, point.tn,
                f"{point.precision:.6f}", f"{point.recall:.6f}",
            ])


def plot_pr_curve(path, curve, choice=None, baseline=None):
    """Save the PR curve as a static SVG.

    The output is byte-stable for equal inputs: no date metadata and a fixed
    SVG id salt.

    """
    figure = Figure(figsize=(6, 4.5))
    axes = figure.add_subplot()
    points = [p for p in curve if math.isfinite(p.threshold)]
    axes.plot(
        [p.recall for p in points], [p.precision for p in points],
        label="model", color="tab:blue",
    )
    if baseline is not None:
        axes.axhline(
            baseline, linestyle="--", color="gray",
            label=f"base rate {baseline:.4f}",
        )
    if choice is not None:
        axes.plot(
            [choice.point.recall], [choice.point.precision], "o",
            color="tab:red", label=f"threshold {choice.threshold:.4f}",
        )
    axes.set_xlim(-0.01, 1.01)
    axes.set_ylim(-0.01, 1.01)
    axes.set_xlabel("Recall")
    axes.set_ylabel("Precision")
    axes.grid(color="lightgray")
    axes.legend(loc="upper right")
    with matplotlib.rc_context({"svg.hashsalt": "riskgraph"}):
        figure.savefig(path, format="svg", metadata={"Date": None})


def pr_report(curve, choice, at_threshold=None, random_point=None):
    """Return the plain text PR report."""
    positives = curve[0].fn
    total = curve[0].fn + curve[0].tn
    lines = [
        f"edges: {total}",
        f"positives: {positives}",
        f"base rate: {positives / total:.6f}",
        f"selected threshold: {choice.threshold:.6f}"
        + ("" if choice.reached else " (recall target not reached)"),
        f"  precision: {choice.point.precision:.4f}",
        f"  recall: {choice.point.recall:.4f}",
        f"  flagged: {choice.point.flagged}",
    ]
    if at_threshold is not None:
        lines += [
            f"at threshold {at_threshold.threshold:.6f}",
            f"  precision: {at_threshold.precision:.4f}",
            f"  recall: {at_threshold.recall:.4f}",
            f"  flagged: {at_threshold.flagged}",
        ]
    if random_point is not None:
        lines += [
            "uniform random scorer at the same threshold",
            f"  precision: {random_point.precision:.4f}",
            f"  recall: {random_point.recall:.4f}",
        ]
    return "\n".join(lines) + "\n"


def _percent(count, total):
    return round(100.0 * count / total, 2) if total else None


def _metrics(traces):
    hazard = [t for t in traces if t.hazard_present]
    return PlanningMetrics(
        episodes=len(traces),
        hazard_episodes=len(hazard),
        tsr=_percent(sum(t.task_success for t in traces), len(traces)),
        snr=_percent(sum(t.safety_noticed for t in hazard), len(hazard)),
        rhs=_percent(sum(t.safety_handled for t in hazard), len(hazard)),
    )


def planning_metrics(traces):
    """Return TSR, SNR and RHS overall and per task complexity.

    SNR and RHS count only episodes where a hazard was present; they are
    None when there are none.

    """
    if not traces:
        raise BadConfig("planning_metrics needs at least one trace")
    overall = _metrics(traces)
    by_complexity = {}
    for complexity in COMPLEXITIES:
        subset = [t for t in traces if t.complexity == complexity]
        if subset:
            by_complexity[complexity] = _metrics(subset)
    return dataclasses.replace(overall, by_complexity=by_complexity)


@dataclasses.dataclass
class BaselineReport:
    """Metrics per baseline plus the traces they were computed from."""

    rows: dict
    traces: dict


def compare_baselines(
        scenes,
        tasks,
        *,
        model,
        cache,
        rule_sets,
        config=None,
        graph_config=None,
        baselines=tuple(BASELINES),
        max_workers=4):
    """Run every scene x task episode for each baseline."""
    # pylint: disable=too-many-arguments,too-many-locals
    config = config or EpisodeConfig()
    jobs = [(scene, task) for scene in scenes for task in tasks]
    rows, traces = {}, {}
    for name in baselines:
        try:
            make_planner, source, rule_set = BASELINES[name]
        except KeyError as err:
            raise BadConfig(f"Unknown baseline: {name}") from err
        LOGGER.info("Starting baseline %s: %s episodes", name, len(jobs))
        detector = make_detector(
            source,
            model=model,
            rules=rule_sets.get(rule_set) if rule_set else None,
            cache=cache,
        )
        traces[name] = run_batch(
            jobs, make_planner, detector,
            dataclasses.replace(config, hazard_source=source),
            cache=cache, graph_config=graph_config, max_workers=max_workers,
        )
        rows[name] = planning_metrics(traces[name])
        LOGGER.info(
            "Finished baseline %s: TSR=%s SNR=%s RHS=%s",
            name, rows[name].tsr, rows[name].snr, rows[name].rhs,
        )
    return BaselineReport(rows=rows, traces=traces)


def _cell(value):
    return "n/a" if value is None else f"{value:.1f}"


def _table_rows(report):
    rows = []
    for name, metrics in report.rows.items():
        groups = [("all", metrics)] + list(metrics.by_complexity.items())
        for group, row in groups:
            rows.append([
                name, group, str(row.episodes), str(row.hazard_episodes),
                _cell(row.tsr), _cell(row.snr), _cell(row.rhs),
            ])
    return rows


TABLE_HEADER = ["baseline", "tasks", "episodes", "hazard", "TSR", "SNR",
                "RHS"]


def format_table(header, rows):
    """Return rows as an aligned plain text table."""
    widths = [
        max(len(str(row[k])) for row in [header] + rows)
        for k in range(len(header))
    ]
    lines = []
    for row in [header] + rows:
        cells = [
            str(cell).ljust(width) if k == 0 else str(cell).rjust(width)
            for k, (cell, width) in enumerate(zip(row, widths))
        ]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


def baseline_table(report):
    """Return the baseline comparison as an aligned text table."""
    return format_table(TABLE_HEADER, _table_rows(report))


def baseline_csv(report):
    """Return the baseline comparison as CSV text."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([h.lower() for h in TABLE_HEADER])
    writer.writerows(
        [[c if c != "n/a" else "" for c in row] for row in _table_rows(report)]
    )
    return buffer.getvalue()


@dataclasses.dataclass(frozen=True)
class BenchReport:
    """Median stage timings per pipeline, in seconds."""

    pipelines: dict
    entities: int
    runs: int
    checkpoint_load: float = 0.0


def bench(
        scene,
        task,
        *,
        model,
        cache,
        rules,
        graph_config=None,
        runs=BENCH_RUNS,
        checkpoint_load=0.0):
    """Time the five episode stages for the graph and rule pipelines.

    Each pipeline runs once to warm caches, then runs more times; the
    median per stage is reported.

    """
    # pylint: disable=too-many-arguments
    if runs < 1:
        raise BadConfig("bench needs at least one run")
    pipelines = {}
    for source in ("graphormer", "ltl"):
        detector = make_detector(
            source, model=model, rules=rules, cache=cache
        )
        config = EpisodeConfig(hazard_source=source, record_timings=True)
        samples = []
        for attempt in range(runs + 1):
            trace = run_episode(
                scene, task, MockPlanner(), detector, config,
                cache=cache, graph_config=graph_config,
            )
            if attempt:
                samples.append(stage_timings(trace))
        pipelines[source] = {
            stage: float(np.median([getattr(s, stage) for s in samples]))
            for stage in STAGES
        }
        LOGGER.info("Finished bench %s: %s runs", source, runs)
    return BenchReport(
        pipelines=pipelines,
        entities=len(scene.entities),
        runs=runs,
        checkpoint_load=checkpoint_load,
    )


def _bench_rows(report):
    rows = []
    for stage, label in STAGES.items():
        if stage == "generate":
            label += " (mock, no LLM latency)"
        rows.append([label] + [
            f"{report.pipelines[source][stage]:.6f}"
            for source in report.pipelines
        ])
    return rows


def bench_table(report):
    """Return the bench timings as an aligned text table."""
    header = ["stage"] + [f"{s} (s)" for s in report.pipelines]
    text = format_table(header, _bench_rows(report))
    return (
        f"{text}\nentities: {report.entities}\nruns: {report.runs} "
        f"(median, one warm-up run discarded)\n"
        f"checkpoint load (s): {report.checkpoint_load:.6f}\n"
    )


def bench_csv(report):
    """Return the bench timings as CSV text."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["stage"] + list(report.pipelines))
    writer.writerows(_bench_rows(report))
    return buffer.getvalue()


def timed(func, *args, **kwargs):
    """Return (func(*args, **kwargs), elapsed seconds)."""
    start = time.perf_counter()
    result = func(*args, **kwargs)
    return result, time.perf_counter() - start

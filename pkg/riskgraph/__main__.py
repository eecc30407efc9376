"""Risk-aware task planning with a graph transformer safety monitor."""
import argparse
import csv
import dataclasses
import itertools
import logging
import pathlib
import shutil
import sys
import textwrap
from . import evaluation
from .annotate import (
    AnnotationCache,
    BuiltinBackend,
    LlmAnnotationBackend,
    annotate_pairs,
    builtin_risk_table,
)
from .catalog import CATALOG
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, resolve, version
from .config import with_overrides, write_run_config
from .episode import (
    dumps_trace,
    make_detector,
    run_episode,
    write_traces,
)
from .exceptions import BadConfig, RiskGraphError
from .graph import build_graph, label_stats, read_graphs, write_graphs
from .llm import LlmClient
from .ltl import RULE_SETS, load_rules
from .model import init_model, predict, train
from .planner import HttpPlanner, MockPlanner, get_task, load_tasks
from .scene import (
    SceneSpec,
    generate_dataset,
    generate_scene,
    read_scenes,
    write_scenes,
)


LOGGER = logging.getLogger("riskgraph")

# Bench scene: 46 objects, the robot, an injected agent and at most one
# injected hazard object
BENCH_OBJECTS = 46


def main(argv=None):
    """Parse command line arguments and options then run a subcommand."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.error("a subcommand is required")

    # Handle verbose flag with logging configuration
    handler = logging.StreamHandler(sys.stdout)
    formatter = logging.Formatter('%(levelname)s: %(message)s')
    handler.setFormatter(formatter)
    root_logger = logging.getLogger()
    root_logger.addHandler(handler)
    if args.verbose > 0:
        root_logger.setLevel(logging.DEBUG)
    else:
        root_logger.setLevel(logging.INFO)

    try:
        config = run_config(args)
        out_dir = pathlib.Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, config, out_dir)
        write_run_config(config, out_dir, args.command)
    except RiskGraphError as err:
        sys.exit(f"Error: {err}")
    finally:
        root_logger.removeHandler(handler)


def build_parser():
    """Return the argument parser with one subparser per command."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '-v', '--verbose', action='count', default=0,
        help="verbose output"
    )
    common.add_argument('--config', help="TOML config or run_config.json")
    common.add_argument('--seed', type=int, help="seed for all randomness")
    common.add_argument('--dt', type=float, help="distance threshold DT (m)")
    common.add_argument(
        '--sp-mode', choices=["clamped", "paper-literal"],
        help="spatial proximity formula",
    )
    common.add_argument(
        '--threshold', type=float, help="hazard detection threshold"
    )
    common.add_argument('--gamma', type=float, help="focal loss gamma")
    common.add_argument(
        '--alpha-pos', type=_alpha,
        help="focal loss positive class weight, or 'none' for unweighted",
    )
    common.add_argument(
        '--backend', choices=["mock", "http", "safe-prompt", "ltl"],
        help="planning and annotation backend",
    )
    common.add_argument(
        '--hazard-source',
        choices=["graphormer", "ltl", "none", "prompt_only"],
        help="override the hazard source implied by --backend",
    )
    common.add_argument(
        '--rules', help="rule set (full, partial) or rule file path"
    )
    common.add_argument('--workers', type=int, help="parallel workers")
    common.add_argument('--out', default=".", help="output directory")

    parser = argparse.ArgumentParser(
        description='Risk-aware task planning with a graph transformer '
                    'safety monitor.'
    )
    parser.add_argument(
        '--version', action='version', version=f'riskgraph {version()}'
    )
    parser.add_argument(
        '--example', action=ExampleAction, nargs=0,
        help="create example config and rule files",
    )
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')

    sub = commands.add_parser(
        'gen-data', parents=[common], help="generate scene datasets"
    )
    sub.add_argument('--scenes', type=int, default=120)
    sub.add_argument('--split', type=_triple, default=(90, 15, 15))
    sub.add_argument('--object-count', type=_pair, default=(12, 18))

    sub = commands.add_parser(
        'annotate', parents=[common], help="build or extend the risk cache"
    )
    sub.add_argument('--scenes', nargs='+', required=True)
    sub.add_argument('--annotations', help="existing cache to extend")
    sub.add_argument(
        '--all-pairs', action='store_true',
        help="annotate every catalog pair, not only the observed ones",
    )

    sub = commands.add_parser(
        'build-graphs', parents=[common], help="build labeled safety graphs"
    )
    sub.add_argument('--scenes', nargs='+', required=True)
    sub.add_argument('--annotations')

    sub = commands.add_parser(
        'train', parents=[common], help="train the edge classifier"
    )
    sub.add_argument('--train', dest='train_graphs', required=True)
    sub.add_argument('--val', dest='val_graphs', required=True)
    sub.add_argument('--epochs', type=int)
    sub.add_argument(
        '--precision', choices=["double", "single"], default="double",
        help="checkpoint storage precision",
    )

    sub = commands.add_parser(
        'eval-model', parents=[common], help="PR curve and threshold"
    )
    sub.add_argument('--graphs', required=True)
    sub.add_argument('--model', required=True)
    sub.add_argument('--recall-target', type=float)

    sub = commands.add_parser(
        'run-episode', parents=[common], help="run one task in one scene"
    )
    sub.add_argument('--scenes', required=True)
    sub.add_argument('--scene', required=True, help="scene id")
    sub.add_argument('--task', required=True, help="task name")
    sub.add_argument('--model')
    sub.add_argument('--annotations')

    sub = commands.add_parser(
        'eval-plan', parents=[common], help="compare planning baselines"
    )
    sub.add_argument('--scenes', required=True)
    sub.add_argument('--model')
    sub.add_argument('--annotations')
    sub.add_argument(
        '--baselines', type=_names, default=tuple(evaluation.BASELINES)
    )
    sub.add_argument('--tasks', type=_names, help="task names")
    sub.add_argument('--limit', type=int, help="use the first N scenes")
    sub.add_argument(
        '--hazard-only', action='store_true',
        help="only scenes with an injected hazard",
    )

    sub = commands.add_parser(
        'bench', parents=[common], help="time the episode stages"
    )
    sub.add_argument('--model')
    sub.add_argument('--annotations')
    sub.add_argument('--runs', type=int, default=evaluation.BENCH_RUNS)
    sub.add_argument('--task', default="prepare_meal")
    return parser


def _names(text):
    return tuple(name.strip() for name in text.split(",") if name.strip())


def _ints(text, count):
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from err
    if len(values) != count:
        raise argparse.ArgumentTypeError(f"expected {count} integers")
    return values


def _triple(text):
    return _ints(text, 3)


def _pair(text):
    return _ints(text, 2)


def _alpha(text):
    if text.lower() == "none":
        return "none"
    try:
        return float(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from err


def run_config(args):
    """Return the resolved config: file, then flags, then derived values."""
    config = load_config(args.config) if args.config else RunConfig()
    alpha = args.alpha_pos
    if alpha == "none":
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, alpha_pos=None)
        )
        alpha = None
    try:
        config = with_overrides(
            config,
            seed=args.seed,
            backend=args.backend,
            rules=args.rules,
            workers=args.workers,
            dt=args.dt,
            sp_mode=args.sp_mode.replace("-", "_") if args.sp_mode else None,
            threshold=args.threshold,
            hazard_source=args.hazard_source,
            gamma=args.gamma,
            alpha_pos=alpha,
            epochs=getattr(args, "epochs", None),
            recall_target=getattr(args, "recall_target", None),
        )
    except TypeError as err:
        raise BadConfig(str(err)) from err
    return resolve(config)


def _cache(path):
    if path:
        return AnnotationCache.load(path)
    return builtin_risk_table()


def _model(path, config):
    if path:
        return load_checkpoint(path)
    if config.episode.hazard_source == "graphormer":
        raise BadConfig("graphormer hazard source needs --model")
    return None


def _rules(config):
    return load_rules(config.rules)


def _planner(config):
    if config.backend == "http":
        client = LlmClient.from_env(config.llm_url, config.llm_model)
        return HttpPlanner(client)
    return MockPlanner(safety_prompt=config.backend == "safe-prompt")


def _scenes(paths):
    scenes = []
    for path in paths:
        scenes += read_scenes(path)
    return scenes


def gen_data(args, config, out_dir):
    """Generate train/val/test scene files."""
    dataset = generate_dataset(
        args.scenes,
        args.split,
        config.seed,
        object_count=args.object_count,
        dt=config.graph.dt,
    )
    for name, scenes in dataset.items():
        write_scenes(out_dir/f"{name}.jsonl", scenes)
    LOGGER.info("Output directory: %s", out_dir)


def annotate(args, config, out_dir):
    """Annotate the category pairs found in the scenes."""
    cache = (
        AnnotationCache.load(args.annotations)
        if args.annotations else AnnotationCache()
    )
    pairs = set()
    for scene in _scenes(args.scenes):
        categories = sorted({e.category for e in scene.entities})
        pairs.update(
            itertools.combinations_with_replacement(categories, 2)
        )
    if args.all_pairs:
        pairs.update(
            itertools.combinations_with_replacement(CATALOG.kinds, 2)
        )
    if config.backend == "http":
        with LlmClient.from_env(config.llm_url, config.llm_model) as client:
            annotate_pairs(
                pairs, LlmAnnotationBackend(client), cache,
                max_workers=config.workers,
            )
    else:
        annotate_pairs(
            pairs, BuiltinBackend(), cache, max_workers=config.workers
        )
    cache.save(out_dir/"annotations.json")
    LOGGER.info("Output directory: %s", out_dir)


def build_graphs(args, config, out_dir):
    """Build labeled graphs for every scene file."""
    cache = _cache(args.annotations)
    lines = []
    for path in args.scenes:
        path = pathlib.Path(path)
        scenes = read_scenes(path)
        graphs = [build_graph(s, cache, config.graph) for s in scenes]
        write_graphs(out_dir/f"{path.stem}_graphs.jsonl", graphs)
        stats = label_stats(graphs)
        lines.append(
            f"{path.stem}: graphs={len(graphs)} edges={stats.edges} "
            f"positives={stats.positives} rate={stats.rate:.6f}"
        )
        LOGGER.info(lines[-1])
    (out_dir/"label_stats.txt").write_text(
        "\n".join(lines) + "\n", encoding="utf-8"
    )


def train_model(args, config, out_dir):
    """Train the edge classifier and save the best checkpoint."""
    train_graphs = read_graphs(args.train_graphs)
    val_graphs = read_graphs(args.val_graphs)
    model = init_model(config.model)
    best, history = train(model, train_graphs, val_graphs, config.train)
    save_checkpoint(best, out_dir/"model.ckpt", precision=args.precision)
    with open(out_dir/"history.csv", "w", encoding="utf-8",
              newline="") as outfile:
        writer = csv.writer(outfile, lineterminator="\n")
        writer.writerow(
            ["epoch", "train_loss", "val_loss", "val_recall", "val_precision"]
        )
        for record in history:
            writer.writerow([
                record.epoch,
                f"{record.train_loss:.8f}",
                f"{record.val_loss:.8f}",
                f"{record.val_recall:.6f}",
                f"{record.val_precision:.6f}",
            ])
    LOGGER.info("Output directory: %s", out_dir)


def eval_model(args, config, out_dir):
    """Write the PR curve, its plot and the threshold report."""
    model = load_checkpoint(args.model)
    graphs = read_graphs(args.graphs)
    scores, labels = [], []
    for graph in graphs:
        if graph.edges:
            scores.extend(predict(model, graph))
            labels.extend(graph.labels)
    curve = evaluation.pr_curve(scores, labels)
    choice = evaluation.select_threshold(curve, config.recall_target)
    at_threshold = evaluation.pr_point(
        scores, labels, config.episode.threshold
    )
    random_point = evaluation.pr_point(
        evaluation.random_scores(len(scores), config.seed),
        labels,
        choice.threshold,
    )
    evaluation.write_pr_csv(out_dir/"pr_curve.csv", curve)
    base_rate = sum(labels) / len(labels)
    evaluation.plot_pr_curve(
        out_dir/"pr_curve.svg", curve, choice, baseline=base_rate
    )
    report = evaluation.pr_report(curve, choice, at_threshold, random_point)
    (out_dir/"pr_report.txt").write_text(report, encoding="utf-8")
    print(report, end="")


def _find_scene(scenes, scene_id):
    for scene in scenes:
        if scene.id == scene_id:
            return scene
    raise BadConfig(f"No scene {scene_id}")


def run_one(args, config, out_dir):
    """Run one episode and write its trace."""
    scene = _find_scene(read_scenes(args.scenes), args.scene)
    task = get_task(args.task)
    cache = _cache(args.annotations)
    detector = make_detector(
        config.episode.hazard_source,
        model=_model(args.model, config),
        rules=_rules(config),
        cache=cache,
    )
    planner = _planner(config)
    trace = run_episode(
        scene, task, planner, detector, config.episode,
        cache=cache, graph_config=config.graph,
    )
    (out_dir/"trace.json").write_text(
        dumps_trace(trace) + "\n", encoding="utf-8"
    )
    LOGGER.info(
        "%s/%s: success=%s noticed=%s handled=%s replans=%s",
        trace.scene_id, trace.task, trace.task_success,
        trace.safety_noticed, trace.safety_handled, len(trace.replans),
    )


def eval_plan(args, config, out_dir):
    """Compare the planning baselines over scenes x tasks."""
    scenes = read_scenes(args.scenes)
    if args.hazard_only:
        scenes = [s for s in scenes if s.hazard_injected]
    if args.limit is not None:
        scenes = scenes[:args.limit]
    if not scenes:
        raise BadConfig("No scenes to evaluate")
    tasks = (
        [get_task(name) for name in args.tasks]
        if args.tasks else list(load_tasks())
    )
    needs_model = "graphormer" in args.baselines
    model = load_checkpoint(args.model) if args.model else None
    if needs_model and model is None:
        raise BadConfig("graphormer baseline needs --model")
    report = evaluation.compare_baselines(
        scenes,
        tasks,
        model=model,
        cache=_cache(args.annotations),
        rule_sets={name: load_rules(name) for name in RULE_SETS},
        config=config.episode,
        graph_config=config.graph,
        baselines=args.baselines,
        max_workers=config.workers,
    )
    table = evaluation.baseline_table(report)
    (out_dir/"baselines.txt").write_text(table, encoding="utf-8")
    (out_dir/"baselines.csv").write_text(
        evaluation.baseline_csv(report), encoding="utf-8"
    )
    write_traces(
        out_dir/"traces.jsonl",
        [t for name in report.traces for t in report.traces[name]],
    )
    print(table, end="")


def run_bench(args, config, out_dir):
    """Time the episode stages on a large generated scene."""
    spec = SceneSpec(
        room_type="kitchen",
        object_count=(BENCH_OBJECTS, BENCH_OBJECTS),
        agent_policy="near_hazard",
        dt=config.graph.dt,
    )
    scene = generate_scene(spec, config.seed, "bench")
    if args.model:
        model, load_time = evaluation.timed(load_checkpoint, args.model)
    else:
        model, load_time = init_model(config.model), 0.0
    report = evaluation.bench(
        scene,
        get_task(args.task),
        model=model,
        cache=_cache(args.annotations),
        rules=_rules(config),
        graph_config=config.graph,
        runs=args.runs,
        checkpoint_load=load_time,
    )
    table = evaluation.bench_table(report)
    (out_dir/"bench.txt").write_text(table, encoding="utf-8")
    (out_dir/"bench.csv").write_text(
        evaluation.bench_csv(report), encoding="utf-8"
    )
    print(table, end="")


COMMANDS = {
    "gen-data": gen_data,
    "annotate": annotate,
    "build-graphs": build_graphs,
    "train": train_model,
    "eval-model": eval_model,
    "run-episode": run_one,
    "eval-plan": eval_plan,
    "bench": run_bench,
}


class ExampleAction(argparse.Action):
    """Copy the example config and rule files to PWD.

    A custom Action runs before any subcommand is required.

    Doc: https://docs.python.org/3/library/argparse.html#argparse.Action
    """

    # pylint: disable=too-few-public-methods

    def __call__(self, parser, *args, **kwargs):
        """Copy example/ directory to PWD."""
        src = pathlib.Path(__file__).parent/"example"
        dst = pathlib.Path("example")
        if dst.exists():
            parser.error(f"directory already exists: {dst}")
        shutil.copytree(src, dst)
        print(textwrap.dedent(f"""\
            Created {dst}, try:

            riskgraph gen-data --config {dst}/config.toml --out data
            riskgraph build-graphs --scenes data/*.jsonl --out data
            riskgraph run-episode \\
              --scenes data/train.jsonl --scene scene-0000 \\
              --task prepare_meal --backend ltl --rules {dst}/rules.json\
        """))
        parser.exit()


if __name__ == '__main__':
    main()

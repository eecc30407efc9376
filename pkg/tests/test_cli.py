"""System tests for the command line interface."""
import json
import subprocess
import importlib.metadata
import pytest
from . import utils


def riskgraph(*args, check=True):
    """Run the riskgraph command and return the completed process."""
    return subprocess.run(
        ["riskgraph", *[str(a) for a in args]],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        universal_newlines=True,
        check=check,
    )


def test_version():
    """Verify --version flag."""
    output = riskgraph("--version").stdout
    assert "riskgraph" in output
    assert importlib.metadata.version("riskgraph") in output


def test_help():
    """Verify --help flag."""
    output = riskgraph("--help").stdout
    assert "usage" in output
    assert "gen-data" in output


def test_usage_errors(tmpdir):
    """Usage errors exit with status 2."""
    with tmpdir.as_cwd():
        assert riskgraph(check=False).returncode == 2
        assert riskgraph("gen-data", "--colour", check=False).returncode == 2
        result = riskgraph("gen-data", "--sp-mode", "exact", check=False)
        assert result.returncode == 2


def test_domain_error(tmpdir):
    """Domain errors exit with status 1 and a message."""
    with tmpdir.as_cwd():
        result = riskgraph(
            "gen-data", "--scenes", "10", "--split", "5,5,5", check=False
        )
    assert result.returncode == 1
    assert result.stderr.startswith("Error: ")


def test_gen_data_is_deterministic(tmpdir):
    """Same seed, same bytes."""
    with tmpdir.as_cwd():
        for out in ("run1", "run2"):
            riskgraph(
                "gen-data", "--scenes", "8", "--split", "6,1,1",
                "--seed", "3", "--out", out,
            )
    utils.assert_dirs_eq(tmpdir/"run1", tmpdir/"run2")
    assert sorted(p.basename for p in (tmpdir/"run1").listdir()) == [
        "run_config.json", "test.jsonl", "train.jsonl", "val.jsonl",
    ]


def test_verbose(tmpdir):
    """Verbose output includes debug lines."""
    with tmpdir.as_cwd():
        stdout = riskgraph(
            "-v", "gen-data", "--scenes", "4", "--split", "2,1,1",
        ).stdout
    lines = stdout.strip().split("\n")
    assert any(line.startswith("INFO") for line in lines)
    assert any(line.startswith("DEBUG") for line in lines)


def test_pipeline(tmpdir):
    """Generate, annotate, build, train, evaluate and plan end to end."""
    with tmpdir.as_cwd():
        riskgraph(
            "gen-data", "--scenes", "8", "--split", "6,1,1",
            "--object-count", "3,5", "--seed", "2", "--out", "data",
        )
        riskgraph(
            "annotate", "--scenes", "data/train.jsonl", "data/val.jsonl",
            "data/test.jsonl", "--all-pairs", "--out", "data",
        )
        riskgraph(
            "build-graphs", "--scenes", "data/train.jsonl",
            "data/val.jsonl", "data/test.jsonl",
            "--annotations", "data/annotations.json", "--out", "data",
        )
        stats = (tmpdir/"data/label_stats.txt").read_text("utf-8")
        assert stats.startswith("train: graphs=6 ")

        riskgraph(
            "train", "--train", "data/train_graphs.jsonl",
            "--val", "data/val_graphs.jsonl", "--epochs", "2",
            "--out", "model",
        )
        history = (tmpdir/"model/history.csv").read_text("utf-8")
        assert len(history.splitlines()) == 3

        report = riskgraph(
            "eval-model", "--graphs", "data/train_graphs.jsonl",
            "--model", "model/model.ckpt", "--out", "eval",
        ).stdout
        assert "selected threshold" in report
        assert (tmpdir/"eval/pr_curve.svg").exists()
        assert (tmpdir/"eval/pr_curve.csv").exists()

        with open("data/train.jsonl", encoding="utf-8") as infile:
            scene_id = json.loads(infile.readline())["id"]
        riskgraph(
            "run-episode", "--scenes", "data/train.jsonl",
            "--scene", scene_id, "--task", "prepare_meal",
            "--model", "model/model.ckpt", "--out", "episode",
        )
        trace = json.loads((tmpdir/"episode/trace.json").read_text("utf-8"))
        assert trace["scene_id"] == scene_id
        assert trace["hazard_source"] == "graphormer"

        table = riskgraph(
            "eval-plan", "--scenes", "data/train.jsonl",
            "--model", "model/model.ckpt", "--tasks", "prepare_meal",
            "--out", "plan",
        ).stdout
        assert table.startswith("baseline")
        for name in ("llm_only", "safe_prompting", "ltl_full",
                     "ltl_partial", "graphormer"):
            assert name in table
        traces = (tmpdir/"plan/traces.jsonl").read_text("utf-8")
        assert len(traces.splitlines()) == 5 * 6

        config = json.loads((tmpdir/"plan/run_config.json").read_text(
            "utf-8"
        ))
        assert config["command"] == "eval-plan"


def test_graphormer_needs_model(tmpdir):
    """The default backend cannot run without a checkpoint."""
    with tmpdir.as_cwd():
        riskgraph(
            "gen-data", "--scenes", "4", "--split", "2,1,1", "--out", "data"
        )
        with open("data/train.jsonl", encoding="utf-8") as infile:
            scene_id = json.loads(infile.readline())["id"]
        result = riskgraph(
            "run-episode", "--scenes", "data/train.jsonl",
            "--scene", scene_id, "--task", "prepare_meal", check=False,
        )
    assert result.returncode == 1
    assert "--model" in result.stderr


def test_ltl_episode_with_rule_file(tmpdir):
    """The ltl backend takes a rule file."""
    with tmpdir.as_cwd():
        riskgraph("--example")
        riskgraph(
            "gen-data", "--config", "example/config.toml",
            "--scenes", "4", "--split", "2,1,1", "--out", "data",
        )
        with open("data/train.jsonl", encoding="utf-8") as infile:
            scene_id = json.loads(infile.readline())["id"]
        riskgraph(
            "run-episode", "--scenes", "data/train.jsonl",
            "--scene", scene_id, "--task", "put_apple_in_fridge",
            "--backend", "ltl", "--rules", "example/rules.json",
        )
        trace = json.loads((tmpdir/"trace.json").read_text("utf-8"))
    assert trace["backend"] == "mock"
    assert trace["hazard_source"] == "ltl"


def test_bench(tmpdir):
    """The bench reports every stage for both pipelines."""
    with tmpdir.as_cwd():
        table = riskgraph("bench", "--runs", "1", "--out", "bench").stdout
    assert "Build Environment Graph" in table
    assert "entities: " in table
    assert (tmpdir/"bench/bench.csv").exists()


def test_example(tmpdir):
    """Example option should copy files."""
    with tmpdir.as_cwd():
        riskgraph("--example")
    assert (tmpdir/"example/config.toml").exists()
    assert (tmpdir/"example/rules.json").exists()

    # Call it again and it should refuse to clobber
    with tmpdir.as_cwd(), pytest.raises(subprocess.CalledProcessError):
        riskgraph("--example")


@pytest.mark.slow
def test_full_dataset(tmpdir):
    """Default dataset sizes give labeled graphs in every split."""
    with tmpdir.as_cwd():
        riskgraph("gen-data", "--seed", "0", "--out", "data")
        riskgraph(
            "build-graphs", "--scenes", "data/train.jsonl",
            "data/val.jsonl", "data/test.jsonl", "--out", "data",
        )
        stats = (tmpdir/"data/label_stats.txt").read_text("utf-8")
    lines = stats.splitlines()
    assert [line.split(":")[0] for line in lines] == ["train", "val", "test"]
    assert "graphs=90 " in lines[0]
    for line in lines:
        assert "positives=0 " not in line


def test_sp_mode_flag(tmpdir):
    """The hyphenated flag value selects the paper_literal mode."""
    with tmpdir.as_cwd():
        riskgraph(
            "gen-data", "--scenes", "4", "--split", "2,1,1", "--out", "data"
        )
        for mode in ("clamped", "paper-literal"):
            riskgraph(
                "build-graphs", "--scenes", "data/train.jsonl",
                "--sp-mode", mode, "--out", mode,
            )
        clamped = json.loads(
            (tmpdir/"clamped/run_config.json").read_text("utf-8")
        )
        literal = json.loads(
            (tmpdir/"paper-literal/run_config.json").read_text("utf-8")
        )
    assert clamped["config"]["graph"]["sp_mode"] == "clamped"
    assert literal["config"]["graph"]["sp_mode"] == "paper_literal"
    assert (tmpdir/"paper-literal/train_graphs.jsonl").exists()

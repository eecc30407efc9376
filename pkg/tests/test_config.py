"""Run configuration tests."""
import json
import pathlib
import pytest
import riskgraph
from riskgraph.config import (
    RUN_CONFIG_NAME,
    RunConfig,
    load_config,
    resolve,
    with_overrides,
    write_run_config,
)
from riskgraph.exceptions import BadConfig
from riskgraph.llm import MODEL_ENV, URL_ENV


EXAMPLE_CONFIG = pathlib.Path(riskgraph.__file__).parent/"example/config.toml"


def write(tmp_path, text, name="config.toml"):
    """Write a config file and return its path."""
    path = tmp_path/name
    path.write_text(text, encoding="utf-8")
    return path


def test_example_config():
    """The packaged example loads with its sections."""
    config = load_config(EXAMPLE_CONFIG)
    assert config.seed == 1
    assert config.graph.dt == 0.5
    assert config.model.hidden == 32
    assert config.train.alpha_pos == 0.9
    assert config.episode.threshold == 0.21


def test_defaults_fill_missing_sections(tmp_path):
    """Only the given keys change."""
    config = load_config(write(tmp_path, "seed = 7\n[train]\nepochs = 3\n"))
    assert config.seed == 7
    assert config.train.epochs == 3
    assert config.train.gamma == 2.0
    assert config.graph == RunConfig().graph


def test_alpha_none(tmp_path):
    """The string none turns class weighting off."""
    config = load_config(write(tmp_path, '[train]\nalpha_pos = "none"\n'))
    assert config.train.alpha_pos is None


@pytest.mark.parametrize("text", [
    "colour = 1\n",
    "[graph]\nradius_m = 2\n",
    "graph = 3\n",
    'backend = "carrier-pigeon"\n',
    "[graph]\ndt = -1.0\n",
    "seed = [\n",
])
def test_bad_config(tmp_path, text):
    """Unknown keys, bad values and broken TOML are rejected."""
    with pytest.raises(BadConfig):
        load_config(write(tmp_path, text))


def test_missing_config(tmp_path):
    """A missing file is a config error."""
    with pytest.raises(BadConfig):
        load_config(tmp_path/"nope.toml")


def test_overrides():
    """Flags land in their sections and None leaves values alone."""
    config = with_overrides(
        RunConfig(), seed=3, dt=0.4, threshold=0.3, gamma=None, epochs=5,
    )
    assert config.seed == 3
    assert config.graph.dt == 0.4
    assert config.episode.threshold == 0.3
    assert config.train.gamma == 2.0
    assert config.train.epochs == 5
    with pytest.raises(BadConfig):
        with_overrides(RunConfig(), colour="blue")
    with pytest.raises(BadConfig):
        with_overrides(RunConfig(), threshold=1.5)


@pytest.mark.parametrize("backend, source", [
    ("mock", "graphormer"),
    ("safe-prompt", "prompt_only"),
    ("ltl", "ltl"),
])
def test_resolve_hazard_source(backend, source):
    """The hazard source follows the backend unless set."""
    config = resolve(RunConfig(backend=backend))
    assert config.episode.hazard_source == source
    config = resolve(RunConfig(backend=backend, hazard_source="none"))
    assert config.episode.hazard_source == "none"


def test_resolve_seed():
    """The run seed drives model init and training."""
    config = resolve(RunConfig(seed=11))
    assert config.model.seed == 11
    assert config.train.seed == 11


def test_resolve_endpoint(monkeypatch):
    """Only the http backend reads the endpoint from the environment."""
    monkeypatch.setenv(URL_ENV, "http://env.test")
    monkeypatch.setenv(MODEL_ENV, "env-model")
    assert resolve(RunConfig()).llm_url == ""
    config = resolve(RunConfig(backend="http"))
    assert (config.llm_url, config.llm_model) == (
        "http://env.test", "env-model",
    )
    config = resolve(RunConfig(backend="http", llm_url="http://cfg.test"))
    assert config.llm_url == "http://cfg.test"


def test_run_config_round_trip(tmp_path):
    """A written run config loads back to the same config."""
    config = resolve(with_overrides(RunConfig(), seed=5, alpha_pos=0.75))
    path = write_run_config(config, tmp_path, "train")
    assert path == tmp_path/RUN_CONFIG_NAME
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["command"] == "train"
    assert doc["version"] == riskgraph.config.version()
    assert load_config(path) == config

"""Resolved run configuration shared by every subcommand.

A RunConfig merges the per-module config dataclasses with backend selection
and the run seed.  It loads from a TOML file or from the ``run_config.json``
an earlier run wrote, and command line flags override either.

Example TOML::

    seed = 1
    backend = "mock"

    [graph]
    dt = 0.5

    [train]
    epochs = 80

"""
import dataclasses
import importlib.metadata
import json
import logging
import os
import pathlib
import tomllib
from .exceptions import BadConfig
from .graph import GraphConfig
from .llm import MODEL_ENV, URL_ENV
from .model import ModelConfig, TrainConfig
from .episode import EpisodeConfig


LOGGER = logging.getLogger("riskgraph")

RUN_CONFIG_NAME = "run_config.json"

BACKENDS = ("mock", "http", "safe-prompt", "ltl")

# Hazard source used when the config does not name one
BACKEND_SOURCES = {
    "mock": "graphormer",
    "http": "graphormer",
    "safe-prompt": "prompt_only",
    "ltl": "ltl",
}

SECTIONS = {
    "graph": GraphConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "episode": EpisodeConfig,
}

# Flag name -> (section, field); None section means a top-level field
FLAG_FIELDS = {
    "seed": (None, "seed"),
    "backend": (None, "backend"),
    "rules": (None, "rules"),
    "recall_target": (None, "recall_target"),
    "workers": (None, "workers"),
    "dt": ("graph", "dt"),
    "sp_mode": ("graph", "sp_mode"),
    "threshold": ("episode", "threshold"),
    "hazard_source": (None, "hazard_source"),
    "gamma": ("train", "gamma"),
    "alpha_pos": ("train", "alpha_pos"),
    "epochs": ("train", "epochs"),
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on, except the API key."""

    # pylint: disable=too-many-instance-attributes
    seed: int = 0
    backend: str = "mock"
    rules: str = "full"
    recall_target: float = 0.90
    workers: int = 4
    llm_url: str = ""
    llm_model: str = ""
    hazard_source: str = ""
    graph: GraphConfig = dataclasses.field(default_factory=GraphConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    episode: EpisodeConfig = dataclasses.field(
        default_factory=EpisodeConfig
    )

    def __post_init__(self):
        """Check config invariants."""
        if self.backend not in BACKENDS:
            raise BadConfig(f"Unknown backend: {self.backend}")
        if not 0 <= self.recall_target <= 1:
            raise BadConfig("recall_target must be in [0, 1]")
        if self.workers < 1:
            raise BadConfig("workers must be >= 1")

    def to_dict(self):
        """Return the JSON form."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        """Build a RunConfig from nested dicts, rejecting unknown keys."""
        doc = dict(doc)
        kwargs = {}
        for name, section in SECTIONS.items():
            values = doc.pop(name, {})
            if not isinstance(values, dict):
                raise BadConfig(f"[{name}] must be a table")
            if values.get("alpha_pos") == "none":
                values = {**values, "alpha_pos": None}
            kwargs[name] = _build(section, values, name)
        kwargs.update(doc)
        return _build(cls, kwargs, "config")


def _build(cls, values, where):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise BadConfig(f"Unknown {where} keys: {sorted(unknown)}")
    values = {
        k: tuple(v) if isinstance(v, list) else v for k, v in values.items()
    }
    try:
        return cls(**values)
    except TypeError as err:
        raise BadConfig(f"Bad {where}: {err}") from err


def load_config(path):
    """Load a RunConfig from TOML or from a written run_config.json."""
    path = pathlib.Path(path)
    try:
        if path.suffix == ".json":
            doc = json.loads(path.read_text(encoding="utf-8"))
            doc = doc.get("config", doc)
        else:
            with path.open("rb") as infile:
                doc = tomllib.load(infile)
    except OSError as err:
        raise BadConfig(f"Cannot read config: {err}") from err
    except ValueError as err:
        raise BadConfig(f"Bad config file {path}: {err}") from err
    LOGGER.debug("config from %s", path)
    return RunConfig.from_dict(doc)


def with_overrides(config, **flags):
    """Return config with flag values applied; None values are skipped."""
    sections = {}
    top = {}
    for flag, value in flags.items():
        if value is None:
            continue
        if flag not in FLAG_FIELDS:
            raise BadConfig(f"Unknown override: {flag}")
        section, field = FLAG_FIELDS[flag]
        if section is None:
            top[field] = value
        else:
            sections.setdefault(section, {})[field] = value
    updates = {
        name: dataclasses.replace(getattr(config, name), **values)
        for name, values in sections.items()
    }
    return dataclasses.replace(config, **top, **updates)


def resolve(config):
    """Fill in derived values: seeds, hazard source, LLM endpoint.

    The run seed drives model init and training.  An empty hazard_source
    follows the backend.  The http endpoint falls back to the environment
    when the config leaves it empty.

    """
    source = config.hazard_source or BACKEND_SOURCES[config.backend]
    url, model = config.llm_url, config.llm_model
    if config.backend == "http":
        url = url or os.environ.get(URL_ENV, "")
        model = model or os.environ.get(MODEL_ENV, "")
    return dataclasses.replace(
        config,
        model=dataclasses.replace(config.model, seed=config.seed),
        train=dataclasses.replace(config.train, seed=config.seed),
        episode=dataclasses.replace(config.episode, hazard_source=source),
        llm_url=url,
        llm_model=model,
    )


def version():
    """Return the installed package version."""
    return importlib.metadata.version("riskgraph")


def write_run_config(config, out_dir, command):
    """Write the resolved config and tool version into out_dir."""
    doc = {
        "command": command,
        "version": version(),
        "config": config.to_dict(),
    }
    path = pathlib.Path(out_dir) / RUN_CONFIG_NAME
    path.write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path

"""Riskgraph API."""
from .annotate import AnnotationCache, builtin_risk_table
from .episode import EpisodeConfig, run_episode
from .exceptions import RiskGraphError
from .graph import GraphConfig, build_graph
from .model import ModelConfig, TrainConfig, init_model, predict, train
from .planner import MockPlanner, get_task, load_tasks
from .scene import SceneSpec, generate_dataset, generate_scene

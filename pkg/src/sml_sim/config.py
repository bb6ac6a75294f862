from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
import json
import os
from typing import Any, Dict, List, Optional

ENGINES = ("sl", "asl")
GRAPH_KINDS = ("ring", "grid", "random", "adjacency", "matrix")
DATA_SOURCES = ("gaussian", "images", "synthetic_digits")
SCENES = ("four_agent", "mean_shift", "custom")
STATISTICS = ("debiased", "true-ratio")
BETA_METHODS = ("analytic", "empirical")


class ConfigError(ValueError):
    pass


@dataclass
class GraphConfig:
    kind: str = "ring"
    agents: int = 4
    rows: int = 3
    cols: int = 3
    edge_probability: float = 0.3
    adjacency: Optional[List[List[bool]]] = None
    matrix_file: Optional[str] = None


@dataclass
class DataConfig:
    source: str = "gaussian"
    scene: str = "four_agent"
    shifts: List[float] = field(default_factory=lambda: [0.2, 0.6, 0.4, 0.1])
    dim: int = 2
    agents: Optional[List[Dict[str, Any]]] = None
    manifest: Optional[str] = None
    layout: Dict[str, int] = field(default_factory=lambda: {"rows": 3, "cols": 3})
    image_size: int = 8
    noise: float = 0.25
    pool_per_class: int = 200
    train_per_class: int = 100


@dataclass
class ModelConfig:
    hidden: List[int] = field(default_factory=lambda: [10, 10])
    activation: str = "tanh"
    norm_bound: Optional[float] = None
    input_bound: Optional[float] = None
    per_agent: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 10
    learning_rate: float = 0.001
    repetitions: int = 1


@dataclass
class PredictionConfig:
    engine: str = "sl"
    delta: Optional[float] = None
    length: int = 200
    period: int = 0
    states: List[int] = field(default_factory=lambda: [1])
    statistic: str = "debiased"
    reference_agent: int = 0


@dataclass
class MonteCarloConfig:
    replications: int = 1
    baseline: bool = True


@dataclass
class TheoryConfig:
    grid_points: int = 50
    target_risk: Optional[float] = None
    rho: Optional[float] = None
    beta: Optional[float] = None
    beta_method: str = "analytic"
    epsilon: float = 0.05
    counts: Optional[List[int]] = None
    constants: Optional[List[float]] = None
    measure: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    log_level: str = "INFO"
    output_dir: str = "out"
    threads: int = 1
    classes: List[int] = field(default_factory=lambda: [1, -1])
    graph: GraphConfig = field(default_factory=GraphConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    montecarlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where} must be a list, got {value!r}")
    return value


def _apply(target: Any, payload: Dict[str, Any], where: str) -> None:
    if not isinstance(payload, dict):
        raise ConfigError(f"{where} must be an object, got {type(payload).__name__}")
    known = {f.name for f in fields(target)}
    for key, value in payload.items():
        if key not in known or key == "base_dir":
            raise ConfigError(f"unknown configuration key {where}.{key}")
        current = getattr(target, key)
        if is_dataclass(current):
            _apply(current, value, f"{where}.{key}")
        elif current is None or value is None:
            setattr(target, key, value)
        else:
            setattr(target, key, _coerce(value, current, f"{where}.{key}"))


def config_from_dict(payload: Dict[str, Any], base_dir: str = ".") -> ExperimentConfig:
    config = ExperimentConfig()
    _apply(config, payload, "config")
    config.base_dir = base_dir
    return config


def load_config(path: str | None) -> ExperimentConfig:
    if not path:
        return ExperimentConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload, base_dir=os.path.dirname(os.path.abspath(path)))


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    def _dump(obj: Any) -> Any:
        if is_dataclass(obj):
            return {f.name: _dump(getattr(obj, f.name)) for f in fields(obj) if f.name != "base_dir"}
        return obj

    return _dump(config)


def expected_agents(config: ExperimentConfig) -> Optional[int]:
    data = config.data
    if data.source == "gaussian":
        if data.scene == "four_agent":
            return 4
        if data.scene == "mean_shift":
            return len(data.shifts)
        return len(data.agents or [])
    return int(data.layout.get("rows", 0)) * int(data.layout.get("cols", 0))


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate_config(config: ExperimentConfig) -> None:
    classes = config.classes
    _require(len(classes) >= 2 and len(set(classes)) == len(classes), f"classes must hold at least two distinct labels, got {classes}")
    _require(config.threads >= 1, f"threads must be positive, got {config.threads}")
    _require(config.log_level.upper() in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"), f"unknown log_level={config.log_level}")

    graph = config.graph
    _require(graph.kind in GRAPH_KINDS, f"graph.kind must be one of {GRAPH_KINDS}, got {graph.kind!r}")
    if graph.kind == "matrix":
        _require(bool(graph.matrix_file), "graph.matrix_file is required for graph.kind=matrix")
        _require(os.path.exists(config.resolve(graph.matrix_file)), f"graph.matrix_file not found: {graph.matrix_file}")
    if graph.kind == "adjacency":
        _require(bool(graph.adjacency), "graph.adjacency is required for graph.kind=adjacency")
    if graph.kind in ("ring", "random"):
        _require(graph.agents >= 1, f"graph.agents must be positive, got {graph.agents}")
    if graph.kind == "grid":
        _require(graph.rows >= 1 and graph.cols >= 1, "graph.rows and graph.cols must be positive")
    _require(0.0 <= graph.edge_probability <= 1.0, "graph.edge_probability must lie in [0, 1]")

    data = config.data
    _require(data.source in DATA_SOURCES, f"data.source must be one of {DATA_SOURCES}, got {data.source!r}")
    _require(data.train_per_class >= 1, f"data.train_per_class must be positive, got {data.train_per_class}")
    if data.source == "gaussian":
        _require(data.scene in SCENES, f"data.scene must be one of {SCENES}, got {data.scene!r}")
        if data.scene != "custom":
            _require(list(classes) == [1, -1], f"built-in Gaussian scenes use classes [1, -1], got {classes}")
        else:
            _require(bool(data.agents), "data.agents is required for data.scene=custom")
        _require(data.dim >= 1, f"data.dim must be positive, got {data.dim}")
    else:
        layout = data.layout
        _require(int(layout.get("rows", 0)) >= 1 and int(layout.get("cols", 0)) >= 1, "data.layout needs positive rows and cols")
        _require(data.pool_per_class >= data.train_per_class, "data.pool_per_class must cover data.train_per_class")
    if data.source == "images":
        _require(bool(data.manifest), "data.manifest is required for data.source=images")
        _require(os.path.exists(config.resolve(data.manifest)), f"data.manifest not found: {data.manifest}")
    if data.source == "synthetic_digits":
        _require(data.image_size >= max(int(data.layout["rows"]), int(data.layout["cols"])), "data.image_size is smaller than the patch grid")
        _require(data.noise >= 0, "data.noise must be nonnegative")

    agents = expected_agents(config)
    if graph.kind in ("ring", "random"):
        graph_agents: Optional[int] = graph.agents
    elif graph.kind == "grid":
        graph_agents = graph.rows * graph.cols
    elif graph.kind == "adjacency":
        graph_agents = len(graph.adjacency or [])
    else:
        graph_agents = None
    if graph_agents is not None and agents is not None:
        _require(graph_agents == agents, f"graph has {graph_agents} agents but the data source has {agents}")

    model = config.model
    _require(all(n >= 1 for n in model.hidden), f"model.hidden sizes must be positive, got {model.hidden}")
    _require(model.norm_bound is None or model.norm_bound > 0, "model.norm_bound must be positive")
    _require(model.input_bound is None or model.input_bound > 0, "model.input_bound must be positive")
    if model.per_agent and agents is not None:
        _require(len(model.per_agent) == agents, f"model.per_agent lists {len(model.per_agent)} entries for {agents} agents")

    training = config.training
    _require(training.epochs >= 1, f"training.epochs must be positive, got {training.epochs}")
    _require(training.batch_size >= 1, f"training.batch_size must be positive, got {training.batch_size}")
    _require(training.learning_rate >= 0, f"training.learning_rate must be nonnegative, got {training.learning_rate}")
    _require(training.repetitions >= 1, f"training.repetitions must be positive, got {training.repetitions}")

    prediction = config.prediction
    _require(prediction.engine in ENGINES, f"prediction.engine must be one of {ENGINES}, got {prediction.engine!r}")
    if prediction.engine == "sl":
        _require(prediction.delta is None, "prediction.delta must be omitted for engine=sl")
    else:
        _require(prediction.delta is not None, "prediction.delta is required for engine=asl")
        _require(0.0 < prediction.delta < 1.0, f"prediction.delta must lie in (0, 1), got {prediction.delta}")
    _require(prediction.length >= 0, f"prediction.length must be nonnegative, got {prediction.length}")
    _require(prediction.period >= 0, f"prediction.period must be nonnegative, got {prediction.period}")
    _require(bool(prediction.states), "prediction.states must list at least one state")
    _require(set(prediction.states) <= set(classes), f"prediction.states {prediction.states} must be drawn from classes {classes}")
    _require(prediction.statistic in STATISTICS, f"prediction.statistic must be one of {STATISTICS}")
    if prediction.statistic == "true-ratio":
        _require(data.source == "gaussian", "prediction.statistic=true-ratio needs a Gaussian data source")
    if agents is not None:
        _require(0 <= prediction.reference_agent < agents, f"prediction.reference_agent={prediction.reference_agent} outside the network")

    montecarlo = config.montecarlo
    _require(montecarlo.replications >= 1, f"montecarlo.replications must be positive, got {montecarlo.replications}")
    if montecarlo.baseline:
        _require(len(classes) == 2, "the boosting baseline needs a binary class set")

    theory = config.theory
    _require(theory.grid_points >= 1, "theory.grid_points must be positive")
    _require(0.0 < theory.epsilon < 1.0, f"theory.epsilon must lie in (0, 1), got {theory.epsilon}")
    _require(theory.beta_method in BETA_METHODS, f"theory.beta_method must be one of {BETA_METHODS}")
    _require(theory.beta is None or theory.beta > 0, "theory.beta must be positive")
    _require(theory.rho is None or theory.rho >= 0, "theory.rho must be nonnegative")
    _require(theory.target_risk is None or theory.target_risk >= 0, "theory.target_risk must be nonnegative")
    if theory.counts is not None:
        _require(all(n >= 1 for n in theory.counts), "theory.counts must be positive")
    if theory.constants is not None:
        _require(all(c >= 0 for c in theory.constants), "theory.constants must be nonnegative")
        if theory.counts is not None:
            _require(len(theory.constants) == len(theory.counts), "theory.constants and theory.counts differ in length")

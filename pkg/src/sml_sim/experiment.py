from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import asdict, dataclass, field
import json
import logging
import math
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import baselines, data, graph, ingest, model, social_learning, stats, theory, training
from .config import ConfigError, ExperimentConfig, config_to_dict
from .util import config_digest, derive_seed, file_sha256, format_float

CONSISTENCY_SAMPLES = 2000
MANIFEST_NAME = "manifest.json"
# settings that never change results stay out of the digest
DIGEST_EXCLUDED = ("output_dir", "threads", "log_level")

_logger = logging.getLogger("sml_sim.experiment")


class DataValidationError(ValueError):
    pass


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


class ArtifactWriter:
    """Writes CSV/JSON artifacts stamped with the config digest and seed, and indexes them."""

    def __init__(self, out_dir: str, digest: str, seed: int) -> None:
        self._out_dir = out_dir
        self._digest = digest
        self._seed = seed
        self._entries: Dict[str, str] = {}
        os.makedirs(out_dir, exist_ok=True)

    @property
    def out_dir(self) -> str:
        return self._out_dir

    def path(self, name: str) -> str:
        full = os.path.join(self._out_dir, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def record(self, name: str) -> None:
        self._entries[name] = file_sha256(self.path(name))

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        target = self.path(name)
        with open(target, "w", encoding="utf-8", newline="") as handle:
            handle.write(f"# config_sha256={self._digest} seed={self._seed}\n")
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(value) for value in row])
        self.record(name)
        _logger.info("Wrote artifact path=%s", target)
        return target

    def write_json(self, name: str, payload: Dict[str, Any]) -> str:
        target = self.path(name)
        body = {"config_sha256": self._digest, "seed": self._seed, **payload}
        with open(target, "w", encoding="utf-8") as handle:
            json.dump(body, handle, indent=2, sort_keys=True)
            handle.write("\n")
        self.record(name)
        _logger.info("Wrote artifact path=%s", target)
        return target

    def finalize(self) -> str:
        target = os.path.join(self._out_dir, MANIFEST_NAME)
        entries: Dict[str, Any] = {}
        if os.path.exists(target):
            with open(target, "r", encoding="utf-8") as handle:
                entries = json.load(handle).get("artifacts", {})
        entries.update(self._entries)
        with open(target, "w", encoding="utf-8") as handle:
            json.dump({"config_sha256": self._digest, "seed": self._seed, "artifacts": entries}, handle, indent=2, sort_keys=True)
            handle.write("\n")
        return target


@dataclass
class Setup:
    config: ExperimentConfig
    matrix: graph.CombinationMatrix
    perron: graph.PerronVector
    classes: Tuple[int, ...]
    architectures: List[model.MLPArchitecture]
    scene: Optional[data.GaussianSceneSpec] = None
    pool: Optional[data.MultiViewDataset] = None
    layout: Optional[data.PatchLayout] = None
    digest: str = ""

    @property
    def agents(self) -> int:
        return self.matrix.size

    @property
    def seed(self) -> int:
        return self.config.seed


def experiment_digest(config: ExperimentConfig) -> str:
    payload = config_to_dict(config)
    for key in DIGEST_EXCLUDED:
        payload.pop(key, None)
    return config_digest(payload)


def build_matrix(config: ExperimentConfig) -> graph.CombinationMatrix:
    spec = config.graph
    if spec.kind == "ring":
        return graph.build_averaging_matrix(graph.directed_ring_adjacency(spec.agents))
    if spec.kind == "grid":
        return graph.build_averaging_matrix(graph.grid_adjacency(spec.rows, spec.cols))
    if spec.kind == "random":
        adjacency = graph.random_adjacency(spec.agents, spec.edge_probability, derive_seed(config.seed, "graph"))
        return graph.build_averaging_matrix(adjacency)
    if spec.kind == "adjacency":
        return graph.build_averaging_matrix(spec.adjacency)
    return graph.load_matrix(config.resolve(spec.matrix_file))


def build_scene(config: ExperimentConfig) -> data.GaussianSceneSpec:
    spec = config.data
    if spec.scene == "four_agent":
        return data.four_agent_gaussian_scene()
    if spec.scene == "mean_shift":
        return data.mean_shift_scene(spec.shifts, spec.dim)
    return data.scene_from_dict({"classes": config.classes, "agents": spec.agents})


def _load_pool(config: ExperimentConfig) -> Tuple[data.MultiViewDataset, data.PatchLayout]:
    spec = config.data
    if spec.source == "images":
        images, labels = ingest.ImageLoader(ingest.load_manifest(config.resolve(spec.manifest))).load()
    else:
        images, labels = data.synthetic_digits(
            spec.pool_per_class, config.classes, spec.image_size, spec.noise, derive_seed(config.seed, "digits")
        )
    layout = data.PatchLayout(images.shape[1], images.shape[2], int(spec.layout["rows"]), int(spec.layout["cols"]))
    return data.multiview_from_images(images, labels, layout, config.classes), layout


def build_architectures(config: ExperimentConfig, dims: Sequence[int], default_input_bound: Optional[float]) -> List[model.MLPArchitecture]:
    spec = config.model
    result = []
    for agent, dim in enumerate(dims):
        override = spec.per_agent[agent] if spec.per_agent else {}
        hidden = override.get("hidden", spec.hidden)
        input_bound = override.get("input_bound", spec.input_bound)
        result.append(
            model.MLPArchitecture(
                layer_sizes=(dim + 1, *hidden, len(config.classes)),
                activation=override.get("activation", spec.activation),
                norm_bound=override.get("norm_bound", spec.norm_bound),
                input_bound=input_bound if input_bound is not None else default_input_bound,
            )
        )
    return result


def build_setup(config: ExperimentConfig) -> Setup:
    matrix = build_matrix(config)
    perron = graph.perron_eigenvector(matrix)
    classes = tuple(config.classes)
    scene = pool = layout = None
    if config.data.source == "gaussian":
        scene = build_scene(config)
        dims = [scene.dim(k) for k in range(scene.num_agents)]
        architectures = build_architectures(config, dims, None)
    else:
        pool, layout = _load_pool(config)
        architectures = build_architectures(config, layout.patch_sizes(), 1.0)
    if len(architectures) != matrix.size:
        raise ConfigError(f"data source has {len(architectures)} agents but the graph has {matrix.size}")
    digest = experiment_digest(config)
    _logger.info(
        "Setup agents=%s classes=%s source=%s perron=%s config_sha256=%s",
        matrix.size,
        classes,
        config.data.source,
        np.round(perron.values, 6).tolist(),
        digest,
    )
    return Setup(config, matrix, perron, classes, architectures, scene, pool, layout, digest)


def training_set(setup: Setup, replication: int) -> Tuple[data.MultiViewDataset, data.StreamSource]:
    """Balanced training sample for a replication plus the source its prediction stream draws from."""
    spec = setup.config.data
    seed = derive_seed(setup.seed, "replication", replication, "train-data")
    if setup.scene is not None:
        return data.gaussian_training_set(setup.scene, spec.train_per_class, seed), setup.scene
    chosen = data.balanced_indices(setup.pool.labels, setup.classes, spec.train_per_class, seed)
    remaining = np.setdiff1d(np.arange(setup.pool.size), chosen)
    held_out = setup.pool.subset(remaining)
    if any(held_out.indices_of(label).size == 0 for label in setup.classes):
        held_out = setup.pool
    return setup.pool.subset(chosen), held_out


def hyperparameters(setup: Setup, replication: int, agent: int, phase: str, repetition: int = 0) -> model.TrainingHyperparameters:
    spec = setup.config.training
    return model.TrainingHyperparameters(
        epochs=spec.epochs,
        batch_size=spec.batch_size,
        learning_rate=spec.learning_rate,
        seed=derive_seed(setup.seed, "replication", replication, "agent", agent, phase, repetition),
    )


def train_agents(setup: Setup, dataset: data.MultiViewDataset, replication: int, repetition: int = 0) -> List[training.TrainingResult]:
    results = []
    for agent in range(setup.agents):
        hyper = hyperparameters(setup, replication, agent, "train", repetition)
        result = training.train_erm(dataset.agent_dataset(agent), setup.architectures[agent], hyper)
        _logger.info(
            "Agent trained replication=%s repetition=%s agent=%s final_risk=%s",
            replication,
            repetition,
            agent,
            result.risk_trace[-1],
        )
        results.append(result)
    return results


def debiased_statistics(models: Sequence[model.MLPModel], dataset: data.MultiViewDataset) -> List[stats.DebiasedStatistic]:
    return [stats.make_debiased_statistic(m, dataset.agent_dataset(k), agent=k) for k, m in enumerate(models)]


def build_schedule(config: ExperimentConfig) -> social_learning.RegimeSchedule:
    spec = config.prediction
    if spec.period == 0 or len(spec.states) == 1:
        return social_learning.RegimeSchedule.constant(spec.states[0])
    return social_learning.RegimeSchedule.cycle(spec.states, spec.period, spec.length)


def build_provider(setup: Setup, statistics: Optional[Sequence[stats.DebiasedStatistic]]) -> social_learning.StatisticProvider:
    if setup.config.prediction.statistic == "true-ratio":
        return social_learning.GaussianLikelihoodProvider(setup.scene)
    return social_learning.DebiasedProvider(statistics)


def run_engine(setup: Setup, provider: social_learning.StatisticProvider, stream: data.PredictionStream) -> social_learning.PredictionResult:
    spec = setup.config.prediction
    return social_learning.run_prediction(spec.engine, setup.matrix, provider, stream, delta=spec.delta, classes=setup.classes)


def _model_path(agent: int) -> str:
    return os.path.join("models", f"agent_{agent}.json")


def _load_saved_models(setup: Setup, out_dir: str) -> Optional[List[model.MLPModel]]:
    paths = [os.path.join(out_dir, _model_path(k)) for k in range(setup.agents)]
    if not all(os.path.exists(p) for p in paths):
        return None
    models = [model.load_model(p) for p in paths]
    if any(m.architecture != arch for m, arch in zip(models, setup.architectures)):
        _logger.warning("Saved models do not match the configured architectures; retraining")
        return None
    _logger.info("Loaded saved models count=%s dir=%s", len(models), out_dir)
    return models


def cmd_train(setup: Setup, out_dir: str) -> Dict[str, Any]:
    writer = ArtifactWriter(out_dir, setup.digest, setup.seed)
    dataset, _ = training_set(setup, 0)
    repetitions = setup.config.training.repetitions
    traces = np.empty((setup.agents, repetitions, setup.config.training.epochs))
    for repetition in range(repetitions):
        results = train_agents(setup, dataset, 0, repetition)
        for agent, result in enumerate(results):
            traces[agent, repetition] = result.risk_trace
            if repetition == 0:
                model.save_model(result.model, writer.path(_model_path(agent)))
                writer.record(_model_path(agent))

    epochs = traces.shape[2]
    writer.write_csv(
        "risk_trace.csv",
        ["agent", "repetition", "epoch", "empirical_risk"],
        (
            (agent, repetition, epoch + 1, traces[agent, repetition, epoch])
            for agent in range(setup.agents)
            for repetition in range(repetitions)
            for epoch in range(epochs)
        ),
    )
    mean_traces = traces.mean(axis=1)
    writer.write_csv(
        "risk_trace_mean.csv",
        ["agent", "epoch", "mean_empirical_risk"],
        ((agent, epoch + 1, mean_traces[agent, epoch]) for agent in range(setup.agents) for epoch in range(epochs)),
    )
    summary = {
        "agents": setup.agents,
        "repetitions": repetitions,
        "epochs": epochs,
        "final_mean_risk": mean_traces[:, -1].tolist(),
        "training_counts": [int(dataset.size)] * setup.agents,
        "models": [_model_path(k) for k in range(setup.agents)],
    }
    writer.write_json("training_summary.json", summary)
    writer.finalize()
    return summary


def cycle_summary(result: social_learning.PredictionResult, schedule: social_learning.RegimeSchedule, reference: int) -> List[Dict[str, Any]]:
    starts = [0] + schedule.switch_points(result.length)
    ends = starts[1:] + [result.length]
    times = social_learning.adaptation_times(result, starts)
    cycles = []
    for start, end, adaptation in zip(starts, ends, times):
        correct = result.correct[start:end]
        cycles.append(
            {
                "start": start,
                "end": end,
                "state": int(result.states[start]) if end > start else None,
                "network_accuracy": float(correct.mean()) if correct.size else None,
                "reference_accuracy": float(correct[:, reference].mean()) if correct.size else None,
                "adaptation_time": adaptation,
            }
        )
    return cycles


def cmd_predict(setup: Setup, out_dir: str) -> Dict[str, Any]:
    writer = ArtifactWriter(out_dir, setup.digest, setup.seed)
    spec = setup.config.prediction
    dataset, source = training_set(setup, 0)
    statistics = None
    if spec.statistic == "debiased":
        models = _load_saved_models(setup, out_dir)
        if models is None:
            models = [r.model for r in train_agents(setup, dataset, 0)]
        statistics = debiased_statistics(models, dataset)
    provider = build_provider(setup, statistics)
    schedule = build_schedule(setup.config)
    stream = data.prediction_stream(source, schedule, spec.length, derive_seed(setup.seed, "replication", 0, "stream"))
    result = run_engine(setup, provider, stream)

    writer.write_csv(
        "trajectory.csv",
        ["run_id", "i", "agent", "gamma_or_binary", "lambda", "decision", "true_state", "correct"],
        social_learning.trajectory_rows(result, run_id=0),
    )
    reference = spec.reference_agent
    writer.write_csv(
        "beliefs.csv",
        ["i", "agent", "class", "belief"],
        (
            (i + 1, reference, label, belief)
            for i in range(result.length)
            for label, belief in zip(setup.classes, social_learning.beliefs_from_lambda(result.lambdas[i, reference]))
        ),
    )
    summary: Dict[str, Any] = {
        "engine": spec.engine,
        "delta": spec.delta,
        "statistic": provider.source,
        "length": result.length,
        "reference_agent": reference,
        "tie_rule": "sign(0)=+1; multi-class ties to the lowest class index",
        "schedule": schedule.to_dict(),
        "cycles": cycle_summary(result, schedule, reference),
        "overall_accuracy": float(result.correct.mean()) if result.length else None,
    }
    if setup.scene is not None and len(setup.classes) == 2:
        functions = statistics if statistics is not None else [
            (lambda k: (lambda h: setup.scene.log_likelihood_ratio(k, h)))(k) for k in range(setup.agents)
        ]
        means = stats.conditional_means(
            functions, setup.scene.sample, setup.perron, CONSISTENCY_SAMPLES,
            derive_seed(setup.seed, "consistency"), classes=setup.classes,
        )
        summary["conditional_means"] = means.to_dict()
        summary["consistency"] = social_learning.check_consistency_conditions(means).to_dict()
    writer.write_json("prediction_summary.json", summary)
    writer.finalize()
    return summary


@dataclass
class ReplicationErrors:
    sml: np.ndarray
    adaboost: Optional[np.ndarray] = None
    boosting_weights: List[float] = field(default_factory=list)


def run_replication(setup: Setup, replication: int) -> ReplicationErrors:
    spec = setup.config.prediction
    dataset, source = training_set(setup, replication)
    statistics = None
    if spec.statistic == "debiased":
        models = [r.model for r in train_agents(setup, dataset, replication)]
        statistics = debiased_statistics(models, dataset)
    provider = build_provider(setup, statistics)
    schedule = build_schedule(setup.config)
    stream = data.prediction_stream(source, schedule, spec.length, derive_seed(setup.seed, "replication", replication, "stream"))
    result = run_engine(setup, provider, stream)
    errors = ReplicationErrors(sml=(~result.correct[:, spec.reference_agent]).astype(float))
    if setup.config.montecarlo.baseline:
        learner = baselines.mlp_learner(
            setup.architectures,
            [hyperparameters(setup, replication, k, "boost") for k in range(setup.agents)],
        )
        ensemble = baselines.adaboost_train(dataset, learner=learner)
        signed = np.where(stream.states == setup.classes[0], 1, -1)
        decisions = baselines.adaboost_decide(ensemble, stream.views) if stream.length else np.empty(0, dtype=int)
        errors.adaboost = (np.asarray(decisions) != signed).astype(float)
        errors.boosting_weights = ensemble.weights.tolist()
    _logger.info("Replication done replication=%s sml_mean_error=%s", replication, float(errors.sml.mean()) if errors.sml.size else None)
    return errors


def _rate_and_stderr(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rate = samples.mean(axis=0)
    if samples.shape[0] < 2:
        return rate, np.zeros_like(rate)
    return rate, samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])


def cmd_montecarlo(setup: Setup, out_dir: str) -> Dict[str, Any]:
    writer = ArtifactWriter(out_dir, setup.digest, setup.seed)
    count = setup.config.montecarlo.replications
    with ThreadPoolExecutor(max_workers=setup.config.threads) as pool:
        outcomes = list(pool.map(lambda r: run_replication(setup, r), range(count)))

    length = setup.config.prediction.length
    curves: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    curves["sml"] = _rate_and_stderr(np.vstack([o.sml for o in outcomes]).reshape(count, length))
    if setup.config.montecarlo.baseline:
        curves["adaboost"] = _rate_and_stderr(np.vstack([o.adaboost for o in outcomes]).reshape(count, length))

    writer.write_csv(
        "montecarlo.csv",
        ["i", "strategy", "error_rate", "stderr"],
        ((i + 1, name, rate[i], stderr[i]) for i in range(length) for name, (rate, stderr) in curves.items()),
    )
    degenerate = count == 1
    if degenerate:
        _logger.warning("Single replication: standard errors are reported as 0")
    summary = {
        "replications": count,
        "length": length,
        "engine": setup.config.prediction.engine,
        "delta": setup.config.prediction.delta,
        "reference_agent": setup.config.prediction.reference_agent,
        "degenerate_stderr": degenerate,
        "mean_error": {name: float(rate.mean()) if length else None for name, (rate, _) in curves.items()},
        "final_error": {name: float(rate[-1]) if length else None for name, (rate, _) in curves.items()},
    }
    if setup.config.montecarlo.baseline:
        summary["mean_boosting_weights"] = np.mean([o.boosting_weights for o in outcomes], axis=0).tolist()
    writer.write_json("montecarlo_summary.json", summary)
    writer.finalize()
    return summary


def _measured_inputs(setup: Setup) -> Dict[str, Any]:
    dataset, _ = training_set(setup, 0)
    models = [r.model for r in train_agents(setup, dataset, 0)]
    risks = [training.logistic_risk(m, dataset.agent_dataset(k)) for k, m in enumerate(models)]
    betas = [stats.empirical_logit_bound(m, dataset.views[k]) for k, m in enumerate(models)]
    return {
        "empirical_risks": risks,
        "network_empirical_risk": setup.perron.average(risks),
        "empirical_betas": betas,
    }


def cmd_theory(setup: Setup, out_dir: str) -> Dict[str, Any]:
    writer = ArtifactWriter(out_dir, setup.digest, setup.seed)
    spec = setup.config.theory
    writer.write_csv(
        "exponent_curve.csv",
        ["target_risk", "exponent_exact", "exponent_approx"],
        theory.exponent_curve(spec.grid_points),
    )

    counts = spec.counts or [setup.config.data.train_per_class * len(setup.classes)] * setup.agents
    if len(counts) != setup.agents:
        raise ConfigError(f"theory.counts lists {len(counts)} agents, the graph has {setup.agents}")
    profile = theory.TrainingProfile(counts, np.array(setup.perron.values))
    report: Dict[str, Any] = {"profile": profile.to_dict(), "perron": setup.perron.values.tolist()}

    measured: Dict[str, Any] = {}
    if spec.measure:
        if len(setup.classes) != 2:
            raise ConfigError("measured theory inputs need a binary class set")
        measured = _measured_inputs(setup)
        report["measured"] = measured

    target_risk = spec.target_risk
    if target_risk is None:
        target_risk = measured.get("network_empirical_risk", 0.0)
    if target_risk >= theory.LOG2:
        report["uninformative"] = True
        report["target_risk"] = target_risk
        writer.write_json("theory_report.json", report)
        writer.finalize()
        return report

    bounded = all(a.norm_bound is not None and a.input_bound is not None for a in setup.architectures)
    if spec.beta is not None:
        beta: Any = spec.beta
        beta_source = "config"
    elif spec.beta_method == "empirical" and measured:
        beta = np.array(measured["empirical_betas"])
        beta_source = "empirical"
    elif bounded:
        beta = np.array([stats.analytic_logit_bound(a) for a in setup.architectures])
        beta_source = "analytic"
    else:
        beta = 1.0
        beta_source = "default"

    constants = spec.constants
    if constants is None and bounded:
        constants = [stats.mlp_complexity_constant(a) for a in setup.architectures]
    network_constant = None
    if spec.rho is not None:
        rho = spec.rho
        rho_source = "config"
    elif constants is not None:
        rho, network_constant = theory.network_complexity_bound(constants, profile)
        rho_source = "complexity-constants"
    else:
        rho = 0.0
        rho_source = "default"

    inputs = theory.BoundInputs(target_risk, beta, rho, profile)
    bound = theory.pc_lower_bound(inputs)
    report.update(
        {
            "target_risk": target_risk,
            "beta": np.asarray(beta).tolist(),
            "beta_source": beta_source,
            "rho": rho,
            "rho_source": rho_source,
            "constants": constants,
            "network_constant": network_constant,
            "exponent_exact": theory.exact_exponent(target_risk),
            "exponent_approx": theory.approx_exponent(target_risk) / 4.0,
            "bound": bound.to_dict(),
            "vacuous": bound.vacuous,
            "epsilon": spec.epsilon,
        }
    )
    if network_constant is not None and network_constant > 0:
        scalar_beta = inputs.alpha_beta / profile.alpha
        report["sample_complexity"] = theory.sample_complexity(network_constant, target_risk, profile.alpha, scalar_beta, spec.epsilon)
        report["self_consistency"] = theory.self_consistency_check(
            network_constant, target_risk, profile.alpha, scalar_beta, spec.epsilon
        )._asdict()
        if report["self_consistency"]["bound"] is not None:
            report["self_consistency"]["bound"] = report["self_consistency"]["bound"]._asdict()
    writer.write_json("theory_report.json", report)
    writer.finalize()
    return report


def cmd_validate_data(config: ExperimentConfig, out_dir: str) -> Dict[str, Any]:
    if config.data.source != "images":
        raise ConfigError("validate-data needs data.source=images with a manifest")
    manifest = ingest.load_manifest(config.resolve(config.data.manifest))
    checks = ingest.verify_manifest(manifest)
    report: Dict[str, Any] = {"files": [dict(asdict(c), ok=c.ok) for c in checks]}
    try:
        images, labels = ingest.ImageLoader(manifest).load()
        report["images"] = {"count": int(images.shape[0]), "shape": list(images.shape[1:]), "labels": sorted(set(labels.tolist()))}
    except (OSError, ValueError) as exc:
        report["load_error"] = str(exc)
    writer = ArtifactWriter(out_dir, experiment_digest(config), config.seed)
    writer.write_json("data_validation.json", report)
    writer.finalize()
    failed = [c.name for c in checks if not c.ok]
    if failed or "load_error" in report:
        raise DataValidationError(f"dataset validation failed files={failed} load_error={report.get('load_error')}")
    return report

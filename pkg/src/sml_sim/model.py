from __future__ import annotations

from dataclasses import dataclass
import json
import logging
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

BINARY_CLASSES: Tuple[int, int] = (1, -1)
NORM_TOLERANCE = 1e-9
EXP_CLAMP = 500.0

_logger = logging.getLogger("sml_sim.model")


def _tanh_grad(pre: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(pre) ** 2


def _relu(pre: np.ndarray) -> np.ndarray:
    return np.maximum(pre, 0.0)


def _relu_grad(pre: np.ndarray) -> np.ndarray:
    return (pre > 0).astype(float)


class Activation(NamedTuple):
    function: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    lipschitz: float


# every entry satisfies sigma(0) = 0
ACTIVATIONS: Dict[str, Activation] = {
    "tanh": Activation(np.tanh, _tanh_grad, 1.0),
    "relu": Activation(_relu, _relu_grad, 1.0),
}


@dataclass(frozen=True)
class MLPArchitecture:
    """Layer sizes ``n_0..n_L``; ``n_0`` counts the constant bias input when ``augment_bias`` is set."""

    layer_sizes: Tuple[int, ...]
    activation: str = "tanh"
    norm_bound: Optional[float] = None
    input_bound: Optional[float] = None
    augment_bias: bool = True

    def __post_init__(self) -> None:
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError(f"architecture needs at least one layer, got layer_sizes={sizes}")
        if any(n < 1 for n in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.augment_bias and sizes[0] < 2:
            raise ValueError("n_0 must leave room for at least one feature next to the bias input")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation={self.activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if self.norm_bound is not None and self.norm_bound <= 0:
            raise ValueError(f"norm_bound must be positive, got {self.norm_bound}")
        if self.input_bound is not None and self.input_bound <= 0:
            raise ValueError(f"input_bound must be positive, got {self.input_bound}")

    @property
    def depth(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[0] - 1 if self.augment_bias else self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def lipschitz(self) -> float:
        return ACTIVATIONS[self.activation].lipschitz

    @property
    def parameter_count(self) -> int:
        return sum(a * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


def column_norm(weights: np.ndarray) -> float:
    # induced 1-norm: max absolute column sum
    return float(np.max(np.sum(np.abs(weights), axis=0)))


def project_to_norm_ball(weights: np.ndarray, bound: float) -> np.ndarray:
    sums = np.sum(np.abs(weights), axis=0)
    scale = np.where(sums > bound, bound / np.where(sums > 0, sums, 1.0), 1.0)
    return weights * scale[np.newaxis, :]


@dataclass(frozen=True, eq=False)
class MLPModel:
    architecture: MLPArchitecture
    weights: Tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        arch = self.architecture
        weights = tuple(np.array(w, dtype=float) for w in self.weights)
        if len(weights) != arch.depth:
            raise ValueError(f"expected {arch.depth} weight matrices, got {len(weights)}")
        for index, w in enumerate(weights, start=1):
            expected = (arch.layer_sizes[index], arch.layer_sizes[index - 1])
            if w.shape != expected:
                raise ValueError(f"W_{index} has shape {w.shape}, expected {expected}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"W_{index} has non-finite entries")
            if arch.norm_bound is not None and column_norm(w) > arch.norm_bound * (1 + NORM_TOLERANCE):
                raise ValueError(f"W_{index} violates norm bound {arch.norm_bound} (norm={column_norm(w)})")
            w.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    def with_weights(self, weights: Sequence[np.ndarray]) -> "MLPModel":
        return MLPModel(self.architecture, tuple(weights))


class ForwardResult(NamedTuple):
    outputs: np.ndarray
    posteriors: np.ndarray


def zero_model(arch: MLPArchitecture) -> MLPModel:
    return MLPModel(
        arch,
        tuple(np.zeros((n_out, n_in)) for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:])),
    )


def initialize_model(arch: MLPArchitecture, seed: int) -> MLPModel:
    rng = np.random.default_rng(seed)
    weights: List[np.ndarray] = []
    for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        limit = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        if arch.norm_bound is not None:
            w = project_to_norm_ball(w, arch.norm_bound)
        weights.append(w)
    return MLPModel(arch, tuple(weights))


def augment_features(arch: MLPArchitecture, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    batch = np.atleast_2d(features)
    if batch.shape[1] != arch.feature_dim:
        raise ValueError(f"feature dimension {batch.shape[1]} does not match architecture ({arch.feature_dim})")
    if not arch.augment_bias:
        return batch
    return np.hstack([batch, np.ones((batch.shape[0], 1))])


def layer_activations(model: MLPModel, inputs: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Pre-activations ``g_1..g_L`` and the inputs ``a_0..a_{L-1}`` each layer consumed.

    ``inputs`` must already be bias-augmented, one sample per row.
    """
    act = ACTIVATIONS[model.architecture.activation].function
    consumed: List[np.ndarray] = [inputs]
    pre: List[np.ndarray] = []
    current = inputs
    for index, w in enumerate(model.weights):
        g = current @ w.T
        pre.append(g)
        if index < len(model.weights) - 1:
            current = act(g)
            consumed.append(current)
    return pre, consumed


def output_preactivations(model: MLPModel, features: np.ndarray) -> np.ndarray:
    pre, _ = layer_activations(model, augment_features(model.architecture, features))
    return pre[-1]


def softmax_rows(outputs: np.ndarray) -> np.ndarray:
    clipped = np.clip(outputs, -EXP_CLAMP, EXP_CLAMP)
    return np.exp(clipped - logsumexp(clipped, axis=1, keepdims=True))


def forward(model: MLPModel, h: np.ndarray) -> ForwardResult:
    single = np.asarray(h).ndim == 1
    outputs = output_preactivations(model, h)
    posteriors = softmax_rows(outputs)
    if single:
        return ForwardResult(outputs[0], posteriors[0])
    return ForwardResult(outputs, posteriors)


def logits_from_outputs(outputs: np.ndarray) -> np.ndarray:
    # class at output index 0 is the reference: z_0 - z_gamma
    outputs = np.atleast_2d(outputs)
    diffs = outputs[:, :1] - outputs[:, 1:]
    if outputs.shape[1] == 2:
        return diffs[:, 0]
    return diffs


def logit(model: MLPModel, h: np.ndarray) -> Union[float, np.ndarray]:
    single = np.asarray(h).ndim == 1
    values = logits_from_outputs(output_preactivations(model, h))
    if single:
        return float(values[0]) if values.ndim == 1 else values[0]
    return values


LogitFunction = Callable[[np.ndarray], np.ndarray]


def as_logit_function(source: Union[MLPModel, LogitFunction]) -> LogitFunction:
    """Batch logit evaluator: rows of features in, ``(N,)`` or ``(N, M-1)`` logits out."""
    if isinstance(source, MLPModel):
        model = source

        def _evaluate(features: np.ndarray) -> np.ndarray:
            return logits_from_outputs(output_preactivations(model, np.atleast_2d(features)))

        return _evaluate
    if callable(source):
        return source
    raise TypeError(f"expected an MLPModel or a callable, got {type(source).__name__}")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """One agent's view of a labelled sample; ``classes[0]`` is the reference class."""

    features: np.ndarray
    labels: np.ndarray
    classes: Tuple[int, ...] = BINARY_CLASSES

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=int).reshape(-1)
        classes = tuple(int(c) for c in self.classes)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, 0)
        if features.ndim != 2:
            raise ValueError(f"features must be a 2-D array, got ndim={features.ndim}")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(f"features/labels length mismatch: {features.shape[0]} vs {labels.shape[0]}")
        if len(classes) < 2 or len(set(classes)) != len(classes):
            raise ValueError(f"classes must list at least two distinct labels, got {classes}")
        unknown = sorted(set(labels.tolist()) - set(classes))
        if unknown:
            raise ValueError(f"labels outside the class set {classes}: {unknown}")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "classes", classes)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def label_indices(self) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[int(y)] for y in self.labels], dtype=int)

    @property
    def class_counts(self) -> Dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in self.classes}

    @property
    def balanced(self) -> bool:
        return len(set(self.class_counts.values())) == 1

    def signed_labels(self) -> np.ndarray:
        if len(self.classes) != 2:
            raise ValueError(f"signed labels need a binary class set, got {self.classes}")
        return np.where(self.labels == self.classes[0], 1.0, -1.0)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=int)
        return LabeledDataset(self.features[indices].reshape(len(indices), self.dim), self.labels[indices], self.classes)


@dataclass(frozen=True)
class TrainingHyperparameters:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")


def architecture_to_dict(arch: MLPArchitecture) -> dict:
    return {
        "layer_sizes": list(arch.layer_sizes),
        "activation": arch.activation,
        "norm_bound": arch.norm_bound,
        "input_bound": arch.input_bound,
        "augment_bias": arch.augment_bias,
    }


def architecture_from_dict(payload: dict) -> MLPArchitecture:
    return MLPArchitecture(
        layer_sizes=tuple(payload["layer_sizes"]),
        activation=payload.get("activation", "tanh"),
        norm_bound=payload.get("norm_bound"),
        input_bound=payload.get("input_bound"),
        augment_bias=payload.get("augment_bias", True),
    )


def model_to_dict(model: MLPModel) -> dict:
    # json emits floats with repr, the shortest string that round-trips exactly
    return {
        "architecture": architecture_to_dict(model.architecture),
        "weights": [w.tolist() for w in model.weights],
    }


def model_from_dict(payload: dict) -> MLPModel:
    arch = architecture_from_dict(payload["architecture"])
    weights = tuple(np.array(w, dtype=float).reshape(n_out, n_in)
                    for w, n_in, n_out in zip(payload["weights"], arch.layer_sizes[:-1], arch.layer_sizes[1:]))
    return MLPModel(arch, weights)


def save_model(model: MLPModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(model_to_dict(model), handle)
    _logger.debug("Saved model path=%s layers=%s", path, model.architecture.layer_sizes)


def load_model(path: str) -> MLPModel:
    with open(path, "r", encoding="utf-8") as handle:
        return model_from_dict(json.load(handle))

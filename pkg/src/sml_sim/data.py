from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.stats import multivariate_normal

from .model import BINARY_CLASSES, LabeledDataset
from .social_learning import RegimeSchedule
from .util import derive_seed

PIXEL_SCALE = 255.0

_logger = logging.getLogger("sml_sim.data")


@dataclass(frozen=True, eq=False)
class GaussianSceneSpec:
    """Per-agent, per-class Gaussians: ``means[k][j]`` and ``covariances[k][j]`` for ``classes[j]``."""

    means: Tuple[np.ndarray, ...]
    covariances: Tuple[np.ndarray, ...]
    classes: Tuple[int, ...] = BINARY_CLASSES

    def __post_init__(self) -> None:
        if len(self.means) != len(self.covariances) or not self.means:
            raise ValueError("scene needs matching, nonempty per-agent means and covariances")
        classes = tuple(int(c) for c in self.classes)
        means: List[np.ndarray] = []
        covariances: List[np.ndarray] = []
        factors: List[np.ndarray] = []
        for agent, (m, cov) in enumerate(zip(self.means, self.covariances)):
            m = np.array(m, dtype=float)
            cov = np.array(cov, dtype=float)
            if m.ndim != 2 or m.shape[0] != len(classes):
                raise ValueError(f"agent={agent} means must have one row per class, got shape={m.shape}")
            dim = m.shape[1]
            if cov.shape != (len(classes), dim, dim):
                raise ValueError(f"agent={agent} covariances have shape {cov.shape}, expected {(len(classes), dim, dim)}")
            for j in range(len(classes)):
                if not np.allclose(cov[j], cov[j].T, atol=1e-12):
                    raise ValueError(f"agent={agent} class={classes[j]} covariance is not symmetric")
                try:
                    factors.append(np.linalg.cholesky(cov[j]))
                except np.linalg.LinAlgError as exc:
                    raise ValueError(f"agent={agent} class={classes[j]} covariance is not positive definite") from exc
            m.setflags(write=False)
            cov.setflags(write=False)
            means.append(m)
            covariances.append(cov)
        object.__setattr__(self, "means", tuple(means))
        object.__setattr__(self, "covariances", tuple(covariances))
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "_factors", tuple(factors))

    @property
    def num_agents(self) -> int:
        return len(self.means)

    def dim(self, agent: int) -> int:
        return self.means[agent].shape[1]

    def class_index(self, label: int) -> int:
        try:
            return self.classes.index(int(label))
        except ValueError as exc:
            raise ValueError(f"class {label} is not part of the scene classes {self.classes}") from exc

    def factor(self, agent: int, label: int) -> np.ndarray:
        return self._factors[agent * len(self.classes) + self.class_index(label)]

    def logpdf(self, agent: int, label: int, features: np.ndarray) -> np.ndarray:
        j = self.class_index(label)
        features = np.atleast_2d(features)
        density = multivariate_normal(mean=self.means[agent][j], cov=self.covariances[agent][j])
        return np.asarray(density.logpdf(features), dtype=float).reshape(features.shape[0])

    def log_likelihood_ratio(self, agent: int, features: np.ndarray) -> np.ndarray:
        """``log L(h | classes[0]) - log L(h | gamma)``; ``(N,)`` for two classes, else ``(N, M-1)``."""
        reference = self.logpdf(agent, self.classes[0], features)
        ratios = np.column_stack([reference - self.logpdf(agent, gamma, features) for gamma in self.classes[1:]])
        return ratios[:, 0] if ratios.shape[1] == 1 else ratios

    def sample(self, agent: int, label: int, n: int, seed: int) -> np.ndarray:
        return gaussian_sample(self, agent, label, n, seed)


def gaussian_sample(spec: GaussianSceneSpec, agent: int, label: int, n: int, seed: int) -> np.ndarray:
    if not 0 <= agent < spec.num_agents:
        raise ValueError(f"agent={agent} outside scene with {spec.num_agents} agents")
    if n < 0:
        raise ValueError(f"sample count must be nonnegative, got {n}")
    j = spec.class_index(label)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((n, spec.dim(agent)))
    return spec.means[agent][j] + draws @ spec.factor(agent, label).T


def four_agent_gaussian_scene() -> GaussianSceneSpec:
    """Two-dimensional scene where only agent index 1 sees a wider Gaussian under class -1."""
    narrow = np.eye(2)
    wide = 1.5 * np.eye(2)
    zeros = np.zeros((2, 2))
    covariances = [np.stack([narrow, narrow]) for _ in range(4)]
    covariances[1] = np.stack([narrow, wide])
    return GaussianSceneSpec(means=tuple(zeros for _ in range(4)), covariances=tuple(covariances))


def mean_shift_scene(shifts: Sequence[float], dim: int = 2, variance: float = 1.0) -> GaussianSceneSpec:
    """Class +1 centred at ``+shift`` and class -1 at ``-shift`` in every coordinate, per agent."""
    if dim < 1 or variance <= 0:
        raise ValueError(f"mean shift scene needs dim >= 1 and variance > 0, got dim={dim} variance={variance}")
    means = tuple(np.array([np.full(dim, s), np.full(dim, -s)], dtype=float) for s in shifts)
    cov = np.stack([variance * np.eye(dim)] * 2)
    return GaussianSceneSpec(means=means, covariances=tuple(cov for _ in shifts))


def scene_from_dict(payload: dict) -> GaussianSceneSpec:
    classes = tuple(payload.get("classes", BINARY_CLASSES))
    agents = payload["agents"]
    means = tuple(np.array(agent["means"], dtype=float) for agent in agents)
    covariances = []
    for agent, m in zip(agents, means):
        if "covariances" in agent:
            covariances.append(np.array(agent["covariances"], dtype=float))
        else:
            variances = np.array(agent.get("variances", [1.0] * len(classes)), dtype=float)
            covariances.append(np.stack([v * np.eye(m.shape[1]) for v in variances]))
    return GaussianSceneSpec(means=means, covariances=tuple(covariances), classes=classes)


@dataclass(frozen=True)
class PatchLayout:
    """``rows x cols`` grid over ``height x width`` images; the last row/column absorbs remainders."""

    height: int
    width: int
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if min(self.height, self.width, self.rows, self.cols) < 1:
            raise ValueError(f"layout dimensions must be positive: {self}")
        if self.rows > self.height or self.cols > self.width:
            raise ValueError(f"grid {self.rows}x{self.cols} is larger than image {self.height}x{self.width}")

    @property
    def num_agents(self) -> int:
        return self.rows * self.cols

    @staticmethod
    def _bounds(length: int, parts: int) -> List[Tuple[int, int]]:
        step = length // parts
        edges = [p * step for p in range(parts)] + [length]
        return list(zip(edges[:-1], edges[1:]))

    def patch_bounds(self, agent: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        if not 0 <= agent < self.num_agents:
            raise ValueError(f"agent={agent} outside layout with {self.num_agents} patches")
        row, col = divmod(agent, self.cols)
        return self._bounds(self.height, self.rows)[row], self._bounds(self.width, self.cols)[col]

    def pixel_indices(self, agent: int) -> np.ndarray:
        (top, bottom), (left, right) = self.patch_bounds(agent)
        grid = np.arange(self.height * self.width).reshape(self.height, self.width)
        return grid[top:bottom, left:right].reshape(-1)

    def patch_sizes(self) -> List[int]:
        return [self.pixel_indices(k).size for k in range(self.num_agents)]

    def to_dict(self) -> Dict[str, object]:
        return {
            "height": self.height,
            "width": self.width,
            "rows": self.rows,
            "cols": self.cols,
            "remainder": "last-row-and-column",
            "patch_sizes": self.patch_sizes(),
        }


def split_patches(images: np.ndarray, layout: PatchLayout, scale: float = PIXEL_SCALE) -> List[np.ndarray]:
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[np.newaxis]
    if images.shape[1:] != (layout.height, layout.width):
        raise ValueError(f"images have shape {images.shape[1:]}, layout expects {(layout.height, layout.width)}")
    flat = images.reshape(images.shape[0], -1).astype(float) / scale
    return [flat[:, layout.pixel_indices(k)] for k in range(layout.num_agents)]


def reassemble(views: Sequence[np.ndarray], layout: PatchLayout, scale: float = PIXEL_SCALE) -> np.ndarray:
    if len(views) != layout.num_agents:
        raise ValueError(f"expected {layout.num_agents} views, got {len(views)}")
    count = views[0].shape[0]
    flat = np.empty((count, layout.height * layout.width))
    for k, view in enumerate(views):
        flat[:, layout.pixel_indices(k)] = view
    return (flat * scale).reshape(count, layout.height, layout.width)


@dataclass(frozen=True, eq=False)
class MultiViewDataset:
    """Common labelled sample seen by every agent through its own feature view."""

    views: Tuple[np.ndarray, ...]
    labels: np.ndarray
    classes: Tuple[int, ...] = BINARY_CLASSES

    def __post_init__(self) -> None:
        labels = np.array(self.labels, dtype=int).reshape(-1)
        views = tuple(np.array(v, dtype=float) for v in self.views)
        if not views:
            raise ValueError("multi-view dataset needs at least one view")
        for k, view in enumerate(views):
            if view.ndim != 2 or view.shape[0] != labels.shape[0]:
                raise ValueError(f"view {k} has shape {view.shape}, expected {labels.shape[0]} rows")
            view.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))

    @property
    def num_agents(self) -> int:
        return len(self.views)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def agent_dataset(self, agent: int) -> LabeledDataset:
        return LabeledDataset(self.views[agent], self.labels, self.classes)

    def subset(self, indices: Sequence[int]) -> "MultiViewDataset":
        indices = np.asarray(indices, dtype=int)
        return MultiViewDataset(tuple(v[indices] for v in self.views), self.labels[indices], self.classes)

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def multiview_from_images(
    images: np.ndarray,
    labels: np.ndarray,
    layout: PatchLayout,
    classes: Sequence[int],
) -> MultiViewDataset:
    labels = np.asarray(labels, dtype=int)
    keep = np.isin(labels, list(classes))
    return MultiViewDataset(tuple(split_patches(np.asarray(images)[keep], layout)), labels[keep], tuple(classes))


def balanced_indices(labels: np.ndarray, classes: Sequence[int], per_class: int, seed: int) -> np.ndarray:
    if per_class < 0:
        raise ValueError(f"per-class count must be nonnegative, got {per_class}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    chosen: List[np.ndarray] = []
    for label in classes:
        pool = np.flatnonzero(labels == label)
        if pool.size < per_class:
            raise ValueError(f"class {label} has {pool.size} samples, {per_class} requested")
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=int)


def balanced_sample(
    dataset: Union[LabeledDataset, MultiViewDataset],
    per_class: int,
    seed: int,
) -> Union[LabeledDataset, MultiViewDataset]:
    return dataset.subset(balanced_indices(dataset.labels, dataset.classes, per_class, seed))


def gaussian_training_set(spec: GaussianSceneSpec, per_class: int, seed: int) -> MultiViewDataset:
    """Balanced common sample: each row is one scene, every agent observes its own view of it."""
    labels = np.repeat(np.array(spec.classes), per_class)
    views = []
    for agent in range(spec.num_agents):
        blocks = [
            gaussian_sample(spec, agent, label, per_class, derive_seed(seed, "train", agent, label))
            for label in spec.classes
        ]
        views.append(np.vstack(blocks) if blocks else np.empty((0, spec.dim(agent))))
    return MultiViewDataset(tuple(views), labels, spec.classes)


@dataclass(frozen=True, eq=False)
class PredictionStream:
    """``views[k][i]`` is agent ``k``'s observation at step ``i``; ``states[i]`` the true class."""

    views: Tuple[np.ndarray, ...]
    states: np.ndarray

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @property
    def num_agents(self) -> int:
        return len(self.views)


StreamSource = Union[GaussianSceneSpec, MultiViewDataset]


def prediction_stream(source: StreamSource, schedule: RegimeSchedule, length: int, seed: int) -> PredictionStream:
    states = schedule.states(length)
    rng = np.random.default_rng(seed)
    if isinstance(source, GaussianSceneSpec):
        views = []
        for agent in range(source.num_agents):
            view = np.empty((length, source.dim(agent)))
            for label in set(states.tolist()):
                steps = np.flatnonzero(states == label)
                view[steps] = gaussian_sample(source, agent, label, steps.size, derive_seed(seed, "stream", agent, label))
            views.append(view)
        return PredictionStream(tuple(views), states)

    rows = np.empty(length, dtype=int)
    for label in sorted(set(states.tolist())):
        pool = source.indices_of(label)
        if pool.size == 0:
            raise ValueError(f"stream source has no samples of class {label}")
        steps = np.flatnonzero(states == label)
        rows[steps] = rng.choice(pool, size=steps.size, replace=True)
    return PredictionStream(tuple(v[rows] for v in source.views), states)


def synthetic_digits(
    per_class: int,
    classes: Sequence[int] = tuple(range(10)),
    size: int = 8,
    noise: float = 0.25,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Class templates of random strokes plus pixel noise, as uint8 images."""
    if per_class < 0 or size < 2 or noise < 0:
        raise ValueError(f"invalid synthetic digit parameters per_class={per_class} size={size} noise={noise}")
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for label in classes:
        template_rng = np.random.default_rng(derive_seed(seed, "template", label))
        template = (template_rng.random((size, size)) < 0.35).astype(float)
        sample_rng = np.random.default_rng(derive_seed(seed, "digits", label))
        noisy = template[np.newaxis] + noise * sample_rng.standard_normal((per_class, size, size))
        images.append(np.clip(np.rint(noisy * PIXEL_SCALE), 0, PIXEL_SCALE).astype(np.uint8))
        labels.append(np.full(per_class, label, dtype=int))
    _logger.debug("Synthetic digits classes=%s per_class=%s size=%s", list(classes), per_class, size)
    return np.concatenate(images), np.concatenate(labels)

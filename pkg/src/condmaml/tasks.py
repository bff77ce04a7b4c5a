"""Few-shot episodes: synthetic Gaussian clusters, CSV feature datasets with
class-disjoint splits, and the two-dimensional quadratic demo problem."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    q_queries: int

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        return self.support_x, self.support_y

    @property
    def query(self) -> tuple[np.ndarray, np.ndarray]:
        return self.query_x, self.query_y


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for episode ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _labels(n_way: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(n_way), per_class)


@dataclass(frozen=True)
class GaussianTaskGen:
    dim: int = 16
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 16
    mean_scale: float = 3.0
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.mean_scale <= 0:
            raise ValueError("mean_scale must be positive")
        if min(self.dim, self.n_way, self.k_shot, self.q_queries) < 1:
            raise ValueError("dim, n_way, k_shot and q_queries must be positive")


def sample_gaussian_episode(gen: GaussianTaskGen, rng: np.random.Generator) -> Task:
    n, k, q, d = gen.n_way, gen.k_shot, gen.q_queries, gen.dim
    # centers uniform in the ball of radius mean_scale
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = gen.mean_scale * rng.uniform(size=(n, 1)) ** (1.0 / d)
    centers = direction * radius
    noise = gen.noise_sigma * rng.standard_normal((n, k + q, d))
    samples = centers[:, None, :] + noise
    return Task(
        support_x=samples[:, :k].reshape(n * k, d),
        support_y=_labels(n, k),
        query_x=samples[:, k:].reshape(n * q, d),
        query_y=_labels(n, q),
        n_way=n,
        k_shot=k,
        q_queries=q,
    )


@dataclass(frozen=True)
class CsvDataset:
    features: np.ndarray
    labels: np.ndarray
    split: dict[str, tuple[int, ...]]

    def __post_init__(self):
        classes = set(np.unique(self.labels).tolist())
        seen: set[int] = set()
        for name, members in self.split.items():
            if name not in SPLITS:
                raise ValueError(f"unknown split {name!r}")
            overlap = seen & set(members)
            if overlap:
                raise ValueError(f"class {min(overlap)} assigned to more than one split")
            seen |= set(members)
        if seen != classes:
            missing = sorted(classes - seen)
            extra = sorted(seen - classes)
            raise ValueError(
                f"split does not cover the label set (unassigned {missing}, unknown {extra})"
            )

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def rows_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def check_episode_shape(self, split: str, n_way: int, k_shot: int, q_queries: int):
        classes = self.split.get(split, ())
        if len(classes) < n_way:
            raise EpisodeError(
                f"split {split!r} has {len(classes)} classes, need at least {n_way}"
            )
        for c in classes:
            have = self.rows_of(c).size
            if have < k_shot + q_queries:
                raise EpisodeError(
                    f"class {c} in split {split!r} has {have} rows, "
                    f"need {k_shot + q_queries}"
                )


def load_csv_dataset(path, split_path) -> CsvDataset:
    """Read ``f0..f{d-1},label`` rows plus a ``class_id,split`` sidecar."""
    path, split_path = Path(path), Path(split_path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        expected = [f"f{i}" for i in range(len(header) - 1)] + ["label"]
        if header != expected or len(header) < 2:
            raise ValueError(f"{path}: header must be f0..f{{d-1}},label; got {header}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    features = np.asarray(feats, dtype=np.float64).reshape(len(feats), len(header) - 1)
    if not np.all(np.isfinite(features)):
        raise ValueError(f"{path}: non-finite feature values")

    split: dict[str, list[int]] = {}
    with split_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip() in ("", "class_id"):
                continue
            if len(row) != 2:
                raise ValueError(f"{split_path}:{lineno}: expected class_id,split")
            split.setdefault(row[1].strip(), []).append(int(row[0]))
    return CsvDataset(
        features=features,
        labels=np.asarray(labels, dtype=np.int64),
        split={k: tuple(sorted(v)) for k, v in split.items()},
    )


def sample_csv_episode(
    ds: CsvDataset, split: str, n_way: int, k_shot: int, q_queries: int, rng
) -> Task:
    ds.check_episode_shape(split, n_way, k_shot, q_queries)
    classes = np.asarray(ds.split[split])
    chosen = rng.choice(classes, size=n_way, replace=False)
    support_rows, query_rows = [], []
    for c in chosen:
        rows = rng.choice(ds.rows_of(int(c)), size=k_shot + q_queries, replace=False)
        support_rows.append(rows[:k_shot])
        query_rows.append(rows[k_shot:])
    s = np.concatenate(support_rows)
    q = np.concatenate(query_rows)
    # i-th drawn class becomes episode label i
    return Task(
        support_x=ds.features[s],
        support_y=_labels(n_way, k_shot),
        query_x=ds.features[q],
        query_y=_labels(n_way, q_queries),
        n_way=n_way,
        k_shot=k_shot,
        q_queries=q_queries,
    )


@dataclass(frozen=True)
class QuadraticProblem:
    A: np.ndarray
    theta0: np.ndarray
    optimum: np.ndarray


def quadratic_problem(kappa: float, theta0=(1.0, 1.0), angle_deg: float = 30.0):
    """Loss ½θᵀAθ with A = R diag(1/κ, 1) Rᵀ, so λ_max = 1 and cond(A) = κ."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    phi = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    a = rot @ np.diag([1.0 / kappa, 1.0]) @ rot.T
    a = 0.5 * (a + a.T)
    return QuadraticProblem(A=a, theta0=np.asarray(theta0, dtype=np.float64), optimum=np.zeros(2))


def quadratic_descent(problem: QuadraticProblem, lr: float, steps: int) -> list[np.ndarray]:
    """Gradient descent iterates θ_0..θ_steps, gradients taken by the autodiff engine."""
    from . import autodiff as ad

    thetas = [problem.theta0.copy()]
    for _ in range(steps):
        g = ad.Graph()
        theta = g.leaf(thetas[-1].reshape(2, 1), differentiable=True)
        a = g.const(problem.A)
        loss = ad.scale(ad.sum_(ad.mul(theta, ad.matmul(a, theta))), 0.5)
        (grad,) = ad.gradient(loss, [theta])
        thetas.append((theta.value - lr * grad.value).reshape(2))
    return thetas


def quadratic_loss(problem: QuadraticProblem, theta: np.ndarray) -> float:
    return float(0.5 * theta @ problem.A @ theta)

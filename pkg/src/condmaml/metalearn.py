"""MAML inner/outer loops with the conditioning penalty on the inner steps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .conditioning import (
    EIG_FLOOR,
    LOSS_FLOOR,
    EigRecord,
    condition_loss,
    gram_eigenvalues,
    gram_from_residuals,
    residuals_from_losses,
    select_nodes,
)
from .linalg import condition_number, jacobi_eigh
from .models import ParamSet, accuracy, forward, per_sample_loss
from .tasks import Task


@dataclass(frozen=True)
class MetaConfig:
    K: int = 5
    alpha: float = 0.01
    beta: float = 0.001
    gamma: float = 1.0
    meta_batch: int = 4
    subset_groups: tuple[str, ...] = ("cls",)
    conditioning_enabled: bool = True
    first_order: bool = False
    optimizer: str = "sgd"  # "sgd" or "adam"
    grad_clip: float | None = None
    loss_floor: float = LOSS_FLOOR
    eig_floor: float = EIG_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "subset_groups", tuple(sorted(set(self.subset_groups))))
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if not self.subset_groups:
            raise ValueError("subset_groups must be non-empty")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class InnerTrajectory:
    per_step_params: list[ParamSet]
    eig_records: EigRecord
    per_step_support_loss: list[float] = field(default_factory=list)


def select_subset(params: ParamSet, groups) -> tuple[list[tuple[str, str, ad.Node]], int]:
    """Entries whose group is in ``groups`` (entry order) and their flat size."""
    chosen = select_nodes(params, groups)
    return chosen, sum(node.value.size for _, _, node in chosen)


def classifier_losses(params: ParamSet, x, y) -> ad.Node:
    return per_sample_loss(forward(params, x), y)


def inner_adapt(
    theta_star: ParamSet, task: Task, cfg: MetaConfig, loss_fn=classifier_losses
) -> InnerTrajectory:
    """K support-set gradient steps from θ*, recording JJᵀ eigenvalues before
    each step when conditioning is enabled.

    ``loss_fn(params, x, y)`` returns the per-sample losses as a [B] node.
    """
    sx, sy = task.support
    if len(sy) == 0:
        raise ValueError("inner_adapt: empty support set")
    theta = theta_star
    params = [theta]
    losses = []
    records = EigRecord(support_size=len(sy))
    for k in range(1, cfg.K + 1):
        try:
            per_sample = loss_fn(theta, sx, sy)
            loss = ad.mean(per_sample)
            if cfg.conditioning_enabled:
                subset, size = select_subset(theta, cfg.subset_groups)
                records.subset_size = size
                r = residuals_from_losses(per_sample, cfg.loss_floor).values
                gram = gram_from_residuals(r, [n for _, _, n in subset], create_graph=True)
                records.append(gram_eigenvalues(gram))
            grads = ad.gradient(loss, theta.nodes, create_graph=not cfg.first_order)
            theta = theta.replace(
                [ad.sub(p, ad.scale(g, cfg.alpha)) for p, g in zip(theta.nodes, grads)]
            )
        except ArithmeticError as exc:
            raise ad.NonFiniteError(f"inner step {k}: {exc}") from exc
        losses.append(loss.item())
        params.append(theta)
    return InnerTrajectory(params, records, losses)


def query_loss(params: ParamSet, task: Task, loss_fn=classifier_losses) -> ad.Node:
    qx, qy = task.query
    return ad.mean(loss_fn(params, qx, qy))


def task_loss(
    traj: InnerTrajectory, task: Task, cfg: MetaConfig, loss_fn=classifier_losses
) -> ad.Node:
    """Query loss at θ^(K), plus γ·L_κ when conditioning is enabled."""
    loss = query_loss(traj.per_step_params[-1], task, loss_fn)
    if cfg.conditioning_enabled and len(traj.eig_records):
        penalty = condition_loss(traj.eig_records, cfg.eig_floor)
        loss = ad.add(loss, ad.scale(penalty, cfg.gamma))
    return loss


class MetaOptimizer:
    """Plain gradient descent, or Adam when configured."""

    def __init__(self, cfg: MetaConfig, b1=0.9, b2=0.999, eps=1e-8):
        self.cfg = cfg
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        beta = self.cfg.beta
        if self.cfg.optimizer == "sgd":
            return {k: arrays[k] - beta * grads[k] for k in arrays}
        self.t += 1
        out = {}
        for k in arrays:
            m = self.m.get(k, np.zeros_like(grads[k]))
            v = self.v.get(k, np.zeros_like(grads[k]))
            m = self.b1 * m + (1 - self.b1) * grads[k]
            v = self.b2 * v + (1 - self.b2) * grads[k] ** 2
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[k] = arrays[k] - beta * mhat / (np.sqrt(vhat) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.asarray(v) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v) for k, v in state["v"].items()}


@dataclass
class StepMetrics:
    query_loss: float
    cond_loss: float
    kappa0: float
    meta_loss: float


def meta_gradient(
    theta_star: ParamSet, tasks: list[Task], cfg: MetaConfig, loss_fn=classifier_losses
):
    """∇θ* Σ_i task_loss_i, plus per-task diagnostics."""
    if not tasks:
        raise ValueError("meta_step: need at least one task")
    arrays = theta_star.arrays()
    total = {k: np.zeros_like(v) for k, v in arrays.items()}
    q_losses, c_losses, kappas, meta_loss = [], [], [], 0.0
    for task in tasks:
        # one graph per task; θ* enters as fresh leaves
        ps = theta_star.fresh(arrays)
        traj = inner_adapt(ps, task, cfg, loss_fn)
        q = query_loss(traj.per_step_params[-1], task, loss_fn)
        loss = q
        if cfg.conditioning_enabled:
            penalty = condition_loss(traj.eig_records, cfg.eig_floor)
            loss = ad.add(q, ad.scale(penalty, cfg.gamma))
            c_losses.append(penalty.item())
            kappas.append(condition_number(traj.eig_records.per_step[0].value, cfg.eig_floor))
        grads = ad.gradient(loss, ps.nodes)
        for name, g in zip(ps.names, grads):
            total[name] += g.value
        q_losses.append(q.item())
        meta_loss += loss.item()
    for name, g in total.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite meta-gradient for parameter {name}")
    metrics = StepMetrics(
        query_loss=float(np.mean(q_losses)),
        cond_loss=float(np.mean(c_losses)) if c_losses else float("nan"),
        kappa0=float(np.mean(kappas)) if kappas else float("nan"),
        meta_loss=meta_loss,
    )
    return total, metrics


def meta_step(
    theta_star: ParamSet,
    tasks: list[Task],
    cfg: MetaConfig,
    optimizer: MetaOptimizer | None = None,
    loss_fn=classifier_losses,
) -> tuple[ParamSet, StepMetrics]:
    """θ* ← θ* − β ∇θ* Σ_i task_loss_i."""
    grads, metrics = meta_gradient(theta_star, tasks, cfg, loss_fn)
    if cfg.grad_clip is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    optimizer = optimizer if optimizer is not None else MetaOptimizer(cfg)
    updated = optimizer.update(theta_star.arrays(), grads)
    return theta_star.fresh(updated), metrics


# ---- replay without outer gradients (evaluation and tracing) ----


def adapt_arrays(params: ParamSet, x, y, alpha: float) -> ParamSet:
    """One plain gradient step, returned on a fresh graph."""
    graph_params = params.fresh()
    loss = ad.mean(per_sample_loss(forward(graph_params, x), y))
    grads = ad.gradient(loss, graph_params.nodes)
    new = {
        name: node.value - alpha * g.value
        for name, node, g in zip(graph_params.names, graph_params.nodes, grads)
    }
    return params.fresh(new)


def adapted_accuracies(params: ParamSet, task: Task, steps, alpha: float) -> dict[int, float]:
    """Query accuracy after each requested number of support steps (0 = θ*)."""
    steps = sorted(set(int(s) for s in steps))
    wanted = set(steps)
    out = {}
    current = params
    for s in range(0, steps[-1] + 1):
        if s > 0:
            current = adapt_arrays(current, task.support_x, task.support_y, alpha)
        if s in wanted:
            logits = forward(current, task.query_x)
            out[s] = accuracy(logits, task.query_y)
    return out


def gram_matrix_value(params: ParamSet, groups, x, y, loss_floor=LOSS_FLOOR) -> np.ndarray:
    ps = params.fresh()
    wrt = [n for _, _, n in select_nodes(ps, groups)]
    per_sample = per_sample_loss(forward(ps, x), y)
    r = residuals_from_losses(per_sample, loss_floor).values
    return gram_from_residuals(r, wrt, create_graph=False).value


def step_kappas(
    params: ParamSet,
    task: Task,
    K: int,
    alpha: float,
    groups,
    include_full: bool = False,
    eig_floor: float = EIG_FLOOR,
    loss_floor: float = LOSS_FLOOR,
) -> tuple[list[float], list[float] | None]:
    """κ of JJᵀ at each pre-update stage 0..K−1 (subset and optionally all params)."""
    all_groups = sorted({g for _, g, _ in params.entries})
    subset, full = [], [] if include_full else None
    current = params
    for k in range(K):
        sx, sy = task.support
        lam, _ = jacobi_eigh(gram_matrix_value(current, groups, sx, sy, loss_floor))
        subset.append(condition_number(np.maximum(lam, eig_floor), eig_floor))
        if include_full:
            lam, _ = jacobi_eigh(gram_matrix_value(current, all_groups, sx, sy, loss_floor))
            full.append(condition_number(np.maximum(lam, eig_floor), eig_floor))
        if k < K - 1:
            current = adapt_arrays(current, sx, sy, alpha)
    return subset, full


def step_condition_losses(params: ParamSet, task: Task, cfg: MetaConfig) -> float:
    """L_κ value along the inner trajectory, no outer graph kept."""
    current = params
    lams = []
    for k in range(cfg.K):
        gram = gram_matrix_value(current, cfg.subset_groups, *task.support, cfg.loss_floor)
        lams.append(jacobi_eigh(gram)[0])
        if k < cfg.K - 1:
            current = adapt_arrays(current, *task.support, cfg.alpha)
    return condition_loss(lams, cfg.eig_floor).item()

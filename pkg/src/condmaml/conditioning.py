"""Residual reformulation of the support loss, the Jacobian Gram product and
the log-eigenvalue variance penalty.

The support loss mean(ℓ_i) is rewritten as Σ r_i² with r_i = sqrt(ℓ_i / |D|).
Rows of J are ∂r_i/∂ψ for a parameter subset ψ; the |D|×|D| product JJᵀ shares
its nonzero eigenvalues with the Gauss-Newton factor JᵀJ. The factor 2 of the
Gauss-Newton Hessian is dropped since both the penalty and κ are scale-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .linalg import sym_eigen
from .models import ParamSet, forward, per_sample_loss

LOSS_FLOOR = 1e-8
EIG_FLOOR = 1e-12


@dataclass
class ResidualVector:
    values: ad.Node
    loss_floor: float = LOSS_FLOOR


@dataclass
class EigRecord:
    per_step: list[ad.Node] = field(default_factory=list)
    subset_size: int = 0
    support_size: int = 0

    def __len__(self) -> int:
        return len(self.per_step)

    def append(self, eigenvalues: ad.Node) -> None:
        self.per_step.append(eigenvalues)

    def arrays(self) -> list[np.ndarray]:
        return [lam.value.copy() for lam in self.per_step]


def residuals_from_losses(losses: ad.Node, loss_floor: float = LOSS_FLOOR) -> ResidualVector:
    n = losses.shape[0]
    if n == 0:
        raise ValueError("residuals: empty support set")
    r = ad.sqrt(ad.scale(ad.clamp_floor(losses, loss_floor), 1.0 / n))
    return ResidualVector(r, loss_floor)


def residuals(params: ParamSet, support, loss_floor: float = LOSS_FLOOR) -> ResidualVector:
    x, y = support
    if len(y) == 0:
        raise ValueError("residuals: empty support set")
    return residuals_from_losses(per_sample_loss(forward(params, x), y), loss_floor)


def select_nodes(params: ParamSet, groups) -> list[tuple[str, str, ad.Node]]:
    groups = set(groups)
    if not groups:
        raise ValueError("subset groups must be non-empty")
    chosen = [e for e in params.entries if e[1] in groups]
    if not chosen:
        raise ValueError(f"no parameter entry belongs to groups {sorted(groups)}")
    return chosen


def gram_from_residuals(r: ad.Node, wrt: list[ad.Node], create_graph: bool = True) -> ad.Node:
    """JJᵀ where row i of J is the flattened gradient of r_i w.r.t. ``wrt``."""
    if not wrt:
        raise ValueError("jacobian_gram: empty parameter subset")
    n = r.shape[0]
    rows = []
    for i in range(n):
        grads = ad.gradient(ad.index(r, i), wrt, create_graph=create_graph)
        rows.append(ad.concat(grads))
    width = rows[0].shape[0]
    jac = ad.reshape(ad.concat(rows), (n, width))
    return ad.matmul(jac, ad.transpose(jac))


def jacobian_gram(
    params: ParamSet,
    subset_groups,
    support,
    create_graph: bool = True,
    loss_floor: float = LOSS_FLOOR,
) -> ad.Node:
    wrt = [node for _, _, node in select_nodes(params, subset_groups)]
    r = residuals(params, support, loss_floor).values
    return gram_from_residuals(r, wrt, create_graph)


def gram_eigenvalues(gram: ad.Node) -> ad.Node:
    return sym_eigen(gram).eigenvalues


def log_eig_variance(eigenvalues: ad.Node, eig_floor: float = EIG_FLOOR) -> ad.Node:
    if eigenvalues.value.size < 2:
        raise ValueError("condition_loss: need at least 2 eigenvalues per step")
    logs = ad.scale(ad.log(ad.clamp_floor(eigenvalues, eig_floor)), 1.0 / np.log(10.0))
    return ad.variance(logs)


def condition_loss(records, eig_floor: float = EIG_FLOOR) -> ad.Node:
    """Mean over inner steps of Var(log10(max(λ, floor))), population variance."""
    steps = records.per_step if isinstance(records, EigRecord) else list(records)
    if not steps:
        raise ValueError("condition_loss: no recorded steps")
    if not isinstance(steps[0], ad.Node):
        graph = ad.Graph()
        steps = [graph.const(np.asarray(lam, dtype=np.float64)) for lam in steps]
    total = log_eig_variance(steps[0], eig_floor)
    for lam in steps[1:]:
        total = ad.add(total, log_eig_variance(lam, eig_floor))
    return ad.scale(total, 1.0 / len(steps))

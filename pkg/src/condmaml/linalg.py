"""Symmetric eigendecomposition by cyclic Jacobi rotations, with a
differentiable eigenvalue op, and the condition-number report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

MAX_SWEEPS = 100
REL_TOL = 1e-12


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EigDecomposition:
    eigenvalues: ad.Node  # ascending, differentiable
    eigenvectors: np.ndarray  # column i pairs with eigenvalue i; constant


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ad.ShapeError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(a, max_sweeps: int = MAX_SWEEPS, tol: float = REL_TOL):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    Converged when the off-diagonal Frobenius norm drops below
    ``tol * ||A||_F``. Raises :class:`ConvergenceError` otherwise.
    """
    a = symmetrize(a).copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = float(np.linalg.norm(a))
    if scale == 0.0 or n == 1:
        return np.diag(a).copy(), v
    threshold = tol * scale
    for _ in range(max_sweeps):
        if _off_norm(a) < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- R^T A R with R the (p, q) plane rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        residual = _off_norm(a)
        if residual >= threshold:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps; "
                f"off-diagonal norm {residual:.3e}"
            )
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _fwd_eigvalsh(vals, attrs):
    w, v = jacobi_eigh(vals[0])
    attrs["vectors"] = v
    return w


def _bwd_eigvalsh(out, ins, g, attrs):
    # dL/dA = V diag(g) V^T, with V held constant
    graph = g.graph
    v = attrs["vectors"]
    n = v.shape[0]
    g_rows = ad.matmul(graph.const(np.ones((n, 1))), ad.reshape(g, (1, n)))
    return [ad.matmul(ad.mul(graph.const(v), g_rows), graph.const(v.T))]


ad.register_op("eigvalsh", _fwd_eigvalsh, _bwd_eigvalsh)


def sym_eigen(a: ad.Node) -> EigDecomposition:
    """Full decomposition of the symmetrized node ``(A + A^T) / 2``.

    Eigenvalues carry the rule dλ_i/dA = v_i v_i^T. Under degenerate
    eigenvalues that rule is applied to whichever basis Jacobi returned.
    """
    if a.value.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ad.ShapeError(f"sym_eigen: expected a square matrix, got shape {a.shape}")
    sym = ad.scale(ad.add(a, ad.transpose(a)), 0.5)
    attrs: dict = {}
    w = ad.apply("eigvalsh", [sym], attrs)
    return EigDecomposition(w, attrs["vectors"])


def condition_number(eigenvalues, floor: float = 1e-12) -> float:
    """|λ_max| / max(|λ_min|, floor) over the absolute eigenvalues."""
    lam = np.abs(np.asarray(eigenvalues, dtype=np.float64).reshape(-1))
    if lam.size == 0:
        raise ValueError("condition_number: empty eigenvalue vector")
    if floor <= 0:
        raise ValueError("condition_number: floor must be positive")
    return float(lam.max() / max(lam.min(), floor))

import numpy as np

from condmaml import autodiff as ad


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar numpy function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return grad


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def ad_grad(build, *arrays):
    """Gradient of ``build(*nodes)`` w.r.t. all inputs, as arrays."""
    g = ad.Graph()
    nodes = [g.leaf(a, differentiable=True) for a in arrays]
    out = build(*nodes)
    return [n.value for n in ad.gradient(out, nodes)]


def scalar_of(build, *arrays) -> float:
    g = ad.Graph()
    return build(*[g.const(a) for a in arrays]).item()

import math

import numpy as np
import pytest

from condmaml import autodiff as ad
from condmaml.models import MLPConfig, ParamSet, forward, init, per_sample_loss
from helpers import central_diff, rel_err


def test_init_shapes_and_groups():
    p = init(MLPConfig(4, (8,), 3, seed=1))
    layout = [(n, g, node.shape) for n, g, node in p.entries]
    assert layout == [
        ("W1", "emb", (4, 8)),
        ("b1", "emb", (8,)),
        ("W2", "cls", (8, 3)),
        ("b2", "cls", (3,)),
    ]
    assert all(node.requires_grad for node in p.nodes)


def test_init_deterministic_and_zero_bias():
    cfg = MLPConfig(4, (8, 6), 3, seed=123)
    a, b = init(cfg), init(cfg)
    for x, y in zip(a.nodes, b.nodes):
        assert x.value.tobytes() == y.value.tobytes()
    assert not np.any(a["b1"].value) and not np.any(a["b2"].value) and not np.any(a["b3"].value)


def test_init_glorot_bounds():
    p = init(MLPConfig(10, (20,), 5, seed=0))
    assert np.max(np.abs(p["W1"].value)) <= math.sqrt(6 / 30)
    assert np.max(np.abs(p["W2"].value)) <= math.sqrt(6 / 25)


@pytest.mark.parametrize(
    "kwargs",
    [dict(input_dim=0, hidden_dims=(3,), n_classes=2), dict(input_dim=2, hidden_dims=(), n_classes=2), dict(input_dim=2, hidden_dims=(3,), n_classes=1)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        MLPConfig(**kwargs)


def test_flatten_roundtrip():
    p = init(MLPConfig(3, (4,), 2, seed=5))
    flat = p.flatten()
    q = p.unflatten(flat)
    assert q.flatten().tobytes() == flat.tobytes()
    assert q.names == p.names


def test_zero_params_give_zero_logits():
    cfg = MLPConfig(3, (4,), 2)
    zeros = {n: np.zeros(s) for n, _, s in cfg.entry_layout()}
    p = ParamSet.from_arrays(cfg, zeros)
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.array_equal(forward(p, x).value, np.zeros((5, 2)))


def test_batch_independence():
    p = init(MLPConfig(3, (4,), 2, seed=2))
    row = np.array([[0.3, -1.0, 2.0]])
    one = forward(p, row).value
    seven = forward(p, np.repeat(row, 7, axis=0)).value
    assert np.allclose(seven, np.repeat(one, 7, axis=0), rtol=0, atol=1e-15)


def test_forward_vs_hand_computation():
    cfg = MLPConfig(2, (2,), 2)
    arrays = {
        "W1": np.array([[1.0, -1.0], [2.0, 0.5]]),
        "b1": np.array([0.1, -0.2]),
        "W2": np.array([[1.0, 0.0], [-1.0, 3.0]]),
        "b2": np.array([0.0, 1.0]),
    }
    p = ParamSet.from_arrays(cfg, arrays)
    x = np.array([[1.0, 1.0], [-1.0, 2.0]])
    # row 0: h = relu([3.1, -0.7]) = [3.1, 0];  logits = [3.1, 1.0]
    # row 1: h = relu([3.1, 1.8]) = [3.1, 1.8]; logits = [1.3, 6.4]
    assert np.allclose(forward(p, x).value, [[3.1, 1.0], [1.3, 6.4]], atol=1e-12)


def test_forward_shape_error():
    p = init(MLPConfig(3, (4,), 2))
    with pytest.raises(ad.ShapeError):
        forward(p, np.ones((2, 5)))


def test_uniform_logits_loss():
    g = ad.Graph()
    loss = per_sample_loss(g.const(np.zeros((4, 5))), [0, 1, 2, 4])
    assert np.allclose(loss.value, math.log(5), atol=1e-12)


def test_loss_decreases_with_margin():
    g = ad.Graph()
    losses = []
    for m in (1.0, 5.0, 10.0):
        losses.append(per_sample_loss(g.const([[m, 0.0, 0.0]]), [0]).item())
    assert losses[0] > losses[1] > losses[2] > 0


def test_label_out_of_range():
    g = ad.Graph()
    with pytest.raises(ValueError):
        per_sample_loss(g.const(np.zeros((2, 3))), [0, 3])


def test_mean_loss_equals_batch_cross_entropy():
    rng = np.random.default_rng(9)
    z = rng.standard_normal((6, 3))
    y = rng.integers(0, 3, 6)
    g = ad.Graph()
    ours = ad.mean(per_sample_loss(g.const(z), y)).item()
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    direct = -np.mean(np.log(p[np.arange(6), y]))
    assert abs(ours - direct) < 1e-12


def test_mean_loss_gradient_vs_finite_differences():
    rng = np.random.default_rng(4)
    cfg = MLPConfig(3, (4,), 3, seed=4)
    p0 = init(cfg)
    arrays = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p0.arrays().items()}
    x = rng.standard_normal((5, 3))
    y = rng.integers(0, 3, 5)
    p = ParamSet.from_arrays(cfg, arrays)
    grads = ad.gradient(ad.mean(per_sample_loss(forward(p, x), y)), p.nodes)
    flat = p.flatten()

    def f(v):
        q = p.unflatten(v)
        return ad.mean(per_sample_loss(forward(q, x), y)).item()

    fd = central_diff(f, flat)
    assert rel_err(np.concatenate([g.value.ravel() for g in grads]), fd) < 1e-5

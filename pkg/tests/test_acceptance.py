"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-9 train two twin models (γ=0 and γ=1, same seed) for 2000
meta-iterations and rerun them for the determinism check; they are marked
``slow`` and take several minutes on one core.  Run only the fast criteria
with ``pytest tests/test_acceptance.py -m "not slow"``.
"""

import dataclasses
import time

import numpy as np
import pytest

import conftest
from condmaml import autodiff as ad
from condmaml import harness
from condmaml.conditioning import condition_loss, gram_eigenvalues, jacobian_gram
from condmaml.linalg import jacobi_eigh
from condmaml.metalearn import MetaConfig, inner_adapt, meta_gradient, task_loss
from condmaml.models import MLPConfig, ParamSet, init
from condmaml.tasks import Task
from helpers import central_diff, rel_err
from oracles import (
    OP_CASES,
    bisection_eigenvalues,
    hand_meta_grad,
    logistic_losses,
    op_gradient_error,
    scalar_params,
    scalar_task,
)

# Twin-training configuration for criteria 7-9 (5-way 1-shot Gaussian, d=16,
# noise 0.5, K=5, subset cls, 2000 iterations).
TWIN = dict(
    K=5,
    alpha=0.1,
    beta=0.1,
    optimizer="sgd",
    meta_batch=2,
    subset_groups=("cls",),
    hidden_dims=(32, 32),
    dim=16,
    n_way=5,
    k_shot=1,
    q_queries=16,
    noise_sigma=0.5,
    episodes=2000,
    eval_every=250,
    eval_episodes=100,
    eval_steps=(0, 1, 2, 3, 4, 5),
    trace_episodes=16,
    seed=0,
)
TEST_EPISODES = 600
HORIZON = (5, 10, 25, 50, 100)


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    print(line)
    conftest.VERDICTS.append(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_1_eigensolver_oracle():
    rng = np.random.default_rng(2024)
    worst_eig = worst_rec = 0.0
    solver_seconds = 0.0
    for i in range(200):
        n = 1 + i % 8
        m = rng.standard_normal((n, n))
        a = 0.5 * (m + m.T)
        start = time.perf_counter()
        w, v = jacobi_eigh(a)
        solver_seconds += time.perf_counter() - start
        worst_eig = max(worst_eig, float(np.max(np.abs(w - bisection_eigenvalues(a)))))
        rec = np.linalg.norm(v @ np.diag(w) @ v.T - a) / np.linalg.norm(a)
        worst_rec = max(worst_rec, float(rec))
    ok = worst_eig <= 1e-9 and worst_rec <= 1e-8 and solver_seconds < 5.0
    report(
        1,
        ok,
        f"200 matrices n<=8: max |λ-oracle| {worst_eig:.2e} (<=1e-9), "
        f"max rel reconstruction {worst_rec:.2e} (<=1e-8), solver time {solver_seconds:.2f}s (<5s)",
    )


# ---------------------------------------------------------------- 2


def _tiny_classifier():
    rng = np.random.default_rng(31)
    cfg = MLPConfig(3, (4,), 4, seed=31)  # 12 + 4 + 16 + 4 = 36 parameters
    arrays = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in init(cfg).arrays().items()}
    task = Task(
        support_x=rng.standard_normal((4, 3)),
        support_y=np.arange(4),
        query_x=rng.standard_normal((8, 3)),
        query_y=np.repeat(np.arange(4), 2),
        n_way=4,
        k_shot=1,
        q_queries=2,
    )
    return cfg, arrays, task


def _fd_error(p: ParamSet, scalar_fn) -> float:
    grads = ad.gradient(scalar_fn(p), p.nodes)
    flat = np.concatenate([g.value.ravel() for g in grads])
    return rel_err(flat, central_diff(lambda v: scalar_fn(p.unflatten(v)).item(), p.flatten()))


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    op_errors = {name: op_gradient_error(name) for name in OP_CASES}
    worst_op = max(op_errors, key=op_errors.get)

    cfg, arrays, task = _tiny_classifier()
    p = ParamSet.from_arrays(cfg, arrays)

    def cond(q):
        return condition_loss([gram_eigenvalues(jacobian_gram(q, {"cls"}, task.support))])

    mc = MetaConfig(K=2, alpha=0.4, gamma=1.0)

    def tl(q):
        return task_loss(inner_adapt(q, task, mc), task, mc)

    cond_err = _fd_error(p, cond)
    task_err = _fd_error(p, tl)
    elapsed = time.perf_counter() - start
    ok = max(op_errors.values()) < 1e-4 and cond_err < 1e-4 and task_err < 1e-4 and elapsed < 30
    report(
        2,
        ok,
        f"{len(op_errors)} ops worst {worst_op} {op_errors[worst_op]:.1e}; "
        f"condition_loss {cond_err:.1e}; second-order task_loss {task_err:.1e} "
        f"({p.size()} params, |D|=4; tol 1e-4); {elapsed:.1f}s (<30s)",
    )


# ---------------------------------------------------------------- 3


def test_criterion_3_gauss_newton_exactness():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((6, 4))
    y = rng.standard_normal(6)
    g = ad.Graph()
    theta = g.leaf(rng.standard_normal(4), True)
    pred = ad.reshape(ad.matmul(g.const(x), ad.reshape(theta, (4, 1))), (6,))
    r = ad.scale(ad.sub(pred, g.const(y)), 1 / np.sqrt(6))
    (grad,) = ad.gradient(ad.sum_(ad.mul(r, r)), [theta], create_graph=True)
    hessian = np.array([ad.gradient(ad.index(grad, j), [theta])[0].value for j in range(4)])
    jac = np.array([ad.gradient(ad.index(r, i), [theta])[0].value for i in range(6)])
    err = float(np.max(np.abs(2 * jac.T @ jac - hessian)))
    report(3, err <= 1e-10, f"max |2JᵀJ - H| = {err:.1e} (<=1e-10)")


# ---------------------------------------------------------------- 4


def test_criterion_4_condition_loss_properties():
    small = condition_loss([np.array([0.1, 0.2])]).item()
    large = condition_loss([np.array([10.0, 20.0])]).item()
    equal = condition_loss([np.full(5, 0.7)]).item()
    ok = abs(small - large) <= 1e-12 and abs(small - 0.022655) < 5e-7 and equal == 0.0
    report(
        4,
        ok,
        f"L({{0.1,0.2}})={small:.6f}, L({{10,20}})={large:.6f} (diff {abs(small - large):.1e}), "
        f"equal eigenvalues -> {equal}",
    )


# ---------------------------------------------------------------- 5


def test_criterion_5_quadratic_demo():
    start = time.perf_counter()
    rows = harness.demo_quadratic([1.0, 50.0], lr=0.5, steps=10)
    elapsed = time.perf_counter() - start
    final = {r["kappa"]: r["distance_ratio"] for r in rows if r["step"] == 10}
    ok = final[1.0] <= 1.1 * 0.5**10 and final[50.0] >= 0.3 and elapsed < 1.0
    report(
        5,
        ok,
        f"κ=1 ratio {final[1.0]:.3e} (<= {1.1 * 0.5**10:.3e}), "
        f"κ=50 ratio {final[50.0]:.3f} (>=0.3), {elapsed * 1000:.0f} ms (<1s)",
    )


# ---------------------------------------------------------------- 6


def test_criterion_6_maml_reduction():
    tasks = [scalar_task(1), scalar_task(2), scalar_task(3)]
    worst = 0.0
    for K in (1, 2, 5):
        cfg = MetaConfig(K=K, alpha=0.5, gamma=0.0, conditioning_enabled=True)
        grads, _ = meta_gradient(scalar_params(-0.2), tasks, cfg, logistic_losses)
        hand = sum(hand_meta_grad(-0.2, t, 0.5, K) for t in tasks)
        worst = max(worst, abs(grads["theta"][0] - hand))
    report(6, worst <= 1e-10, f"|meta-gradient - hand MAML| = {worst:.1e} for K in 1,2,5 (<=1e-10)")


# ---------------------------------------------------------------- 7-9


def _twin_configs(root):
    base = harness.TrainConfig(**TWIN, output_dir="")
    plain = dataclasses.replace(
        base, gamma=0.0, conditioning_enabled=False, output_dir=str(root / "gamma0")
    )
    conditioned = dataclasses.replace(
        base, gamma=1.0, conditioning_enabled=True, output_dir=str(root / "gamma1")
    )
    return plain, conditioned


def _test_report(result, cfg, steps):
    source = harness.TaskSource(cfg.task_source_spec(), cfg.seed)
    return harness.evaluate_params(
        result.best.params(), source, TEST_EPISODES, steps, cfg.alpha, "test"
    )


@pytest.fixture(scope="session")
def twins(tmp_path_factory):
    root = tmp_path_factory.mktemp("twins")
    plain_cfg, cond_cfg = _twin_configs(root)
    start = time.perf_counter()
    plain = harness.train(plain_cfg)
    cond = harness.train(cond_cfg)
    train_seconds = time.perf_counter() - start
    return {
        "root": root,
        "configs": (plain_cfg, cond_cfg),
        "results": (plain, cond),
        "train_seconds": train_seconds,
        "reports": (
            _test_report(plain, plain_cfg, (0, 1, 5)),
            _test_report(cond, cond_cfg, (0, 1) + HORIZON),
        ),
    }


def _final_kappa0(result) -> float:
    rows = harness.read_metric_csv(result.output_dir / "trace.csv")
    return float(rows[-1]["kappa_subset_0"])


@pytest.mark.slow
def test_criterion_7_directional_reproduction(twins):
    plain, cond = twins["results"]
    plain_rep, cond_rep = twins["reports"]
    k_plain, k_cond = _final_kappa0(plain), _final_kappa0(cond)
    part_a = k_cond <= 0.5 * k_plain

    p1, p1_ci = plain_rep.at(1)
    c1, c1_ci = cond_rep.at(1)
    c5, _ = cond_rep.at(5)
    beats_plain = c1 >= p1 and (c1 - c1_ci) > (p1 + p1_ci)
    fast_adapt = c1 >= 0.85 * c5
    part_b = beats_plain or fast_adapt
    report(
        7,
        part_a and part_b,
        f"(a) final κ0 γ=1 {k_cond:.3g} vs γ=0 {k_plain:.3g} (ratio {k_cond / k_plain:.3g}, need <=0.5); "
        f"(b) step-1 acc γ=1 {c1:.3f}±{c1_ci:.3f} vs γ=0 {p1:.3f}±{p1_ci:.3f} "
        f"[non-overlapping: {beats_plain}], γ=1 step1/step5 {c1 / c5:.3f} [>=0.85: {fast_adapt}]; "
        f"twin training {twins['train_seconds']:.0f}s",
    )


@pytest.mark.slow
def test_criterion_8_beyond_horizon(twins):
    rep = twins["reports"][1]
    pairs = list(zip(HORIZON, HORIZON[1:]))
    drops = []
    for a, b in pairs:
        (ma, ca), (mb, cb) = rep.at(a), rep.at(b)
        if mb < ma - max(ca, cb):
            drops.append((a, b))
    text = ", ".join(f"{s}:{rep.at(s)[0]:.3f}±{rep.at(s)[1]:.3f}" for s in HORIZON)
    report(8, not drops, f"γ=1 accuracy by step {text}; drops beyond one CI: {drops or 'none'}")


@pytest.mark.slow
def test_criterion_9_determinism(twins, tmp_path):
    rerun_cfgs = _twin_configs(tmp_path)
    differing = []
    for first, cfg in zip(twins["results"], rerun_cfgs):
        second = harness.train(cfg)
        for name in ("eval.csv", "trace.csv"):
            a = (first.output_dir / name).read_text().splitlines()
            b = (second.output_dir / name).read_text().splitlines()
            assert a[0].startswith("# created") and b[0].startswith("# created")
            if a[1:] != b[1:]:
                differing.append(f"{first.output_dir.name}/{name}")
        if harness.checkpoint_bytes(first.final) != harness.checkpoint_bytes(second.final):
            differing.append(f"{first.output_dir.name}/final.ckpt")
    report(9, not differing, f"rerun of both twins: differing files {differing or 'none'}")

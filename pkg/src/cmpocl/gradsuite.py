"""Randomised finite-difference and gradient-barrier checks for every loss.

Each check draws random shapes (N <= 4 patches, batch <= 6, d <= 8), packs
the differentiable inputs into one matrix and compares the tape gradient
with central differences. Inputs behind a stop-gradient are held constant
in the finite-difference check (differences would see through the
barrier) and are instead verified to receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T


@dataclass
class SuiteResult:
    max_error: dict[str, float] = field(default_factory=dict)
    barrier_violations: dict[str, int] = field(default_factory=dict)
    instances: int = 0

    def failures(self, tol: float = 1e-5) -> list[str]:
        bad = [name for name, err in self.max_error.items() if not err < tol]
        bad += [name for name, n in self.barrier_violations.items() if n]
        return sorted(set(bad))


def _split(x: T.Node, groups: int, b: int) -> list[T.Node]:
    return [T.row_slice(x, i * b, (i + 1) * b) for i in range(groups)]


def _hp(rng, n, alpha=None, beta=None) -> L.CmpHyperParams:
    return L.CmpHyperParams(
        alpha=float(rng.uniform(0.5, 2.0)) if alpha is None else alpha,
        beta=float(rng.uniform(0.5, 2.0)) if beta is None else beta,
        eps_sq=float(rng.uniform(0.1, 1.0)),
        n_patches=n,
        tcr_pooling=str(rng.choice(L.POOLINGS)),
        mse_form=str(rng.choice(L.MSE_FORMS)),
    )


def _instance(rng):
    n = int(rng.integers(2, 5))
    b = int(rng.integers(2, 7))
    d = int(rng.integers(2, 9))
    return n, b, d


def _check_tcr(rng):
    n, b, d = _instance(rng)
    hp = _hp(rng, n)
    x0 = rng.standard_normal((n * b, d))
    f = lambda x: L.tcr_loss(L.PatchEmbeddings(_split(x, n, b)), hp)
    return T.grad_check(f, x0), 0


def _check_simsiam(rng):
    _, b, d = _instance(rng)
    z = rng.standard_normal((2 * b, d))
    p0 = rng.standard_normal((2 * b, d))

    def f(p):
        zs = _split(p.graph.constant(z), 2, b)
        ps = _split(p, 2, b)
        return L.simsiam_loss(zs[0], zs[1], ps[0], ps[1])

    err = T.grad_check(f, p0)
    g = T.Graph()
    zl = g.leaf(z)
    zs, ps = _split(zl, 2, b), _split(g.leaf(p0), 2, b)
    T.backward(g, L.simsiam_loss(zs[0], zs[1], ps[0], ps[1]))
    return err, int(np.count_nonzero(zl.grad))


def _check_byol(rng):
    _, b, d = _instance(rng)
    form = str(rng.choice(L.MSE_FORMS))
    t = rng.standard_normal((2 * b, d))
    p0 = rng.standard_normal((2 * b, d))

    def f(p):
        ts = _split(p.graph.constant(t), 2, b)
        ps = _split(p, 2, b)
        return L.byol_loss(ts[0], ts[1], ps[0], ps[1], form)

    err = T.grad_check(f, p0)
    g = T.Graph()
    tl = g.leaf(t)
    ts, ps = _split(tl, 2, b), _split(g.leaf(p0), 2, b)
    T.backward(g, L.byol_loss(ts[0], ts[1], ps[0], ps[1], form))
    return err, int(np.count_nonzero(tl.grad))


def _check_simsiam_cmp(rng):
    n, b, d = _instance(rng)
    hp = _hp(rng, n)
    z = rng.standard_normal((n * b, d))
    p0 = rng.standard_normal((n * b, d))

    def f_p(p):
        return L.simsiam_cmp_loss(L.PatchEmbeddings(_split(p.graph.constant(z), n, b), _split(p, n, b)), hp)

    # z only reaches the loss through the coding-rate term once the average is frozen
    hp_tcr = L.CmpHyperParams(0.0, hp.beta, hp.eps_sq, n, hp.tcr_pooling, hp.normalize_tcr, hp.mse_form)

    def f_z(zz):
        return L.simsiam_cmp_loss(L.PatchEmbeddings(_split(zz, n, b), _split(zz.graph.constant(p0), n, b)), hp_tcr)

    err = max(T.grad_check(f_p, p0), T.grad_check(f_z, z))

    hp_ssl = L.CmpHyperParams(hp.alpha, 0.0, hp.eps_sq, n, hp.tcr_pooling, hp.normalize_tcr, hp.mse_form)
    g = T.Graph()
    zl = g.leaf(z)
    T.backward(g, L.simsiam_cmp_loss(L.PatchEmbeddings(_split(zl, n, b), _split(g.leaf(p0), n, b)), hp_ssl))
    frozen = [node for node in g.nodes if node.op == "stop_gradient"]
    leaks = int(np.count_nonzero(zl.grad)) + sum(int(np.count_nonzero(node.grad)) for node in frozen)
    return err, leaks


def _check_byol_cmp(rng):
    n, b, d = _instance(rng)
    hp = _hp(rng, n)
    t = rng.standard_normal((n * b, d))
    x0 = rng.standard_normal((2 * n * b, d))

    def f(x):
        zs = _split(T.row_slice(x, 0, n * b), n, b)
        ps = _split(T.row_slice(x, n * b, 2 * n * b), n, b)
        return L.byol_cmp_loss(L.PatchEmbeddings(zs, ps, _split(x.graph.constant(t), n, b)), hp)

    err = T.grad_check(f, x0)
    g = T.Graph()
    tl = g.leaf(t)
    xl = g.leaf(x0)
    zs = _split(T.row_slice(xl, 0, n * b), n, b)
    ps = _split(T.row_slice(xl, n * b, 2 * n * b), n, b)
    T.backward(g, L.byol_cmp_loss(L.PatchEmbeddings(zs, ps, _split(tl, n, b)), hp))
    return err, int(np.count_nonzero(tl.grad))


def _check_empssl(rng):
    n, b, d = _instance(rng)
    hp = _hp(rng, n)
    x0 = rng.standard_normal((n * b, d))
    f = lambda x: L.empssl_loss(L.PatchEmbeddings(_split(x, n, b)), hp)
    return T.grad_check(f, x0), 0


CHECKS: dict[str, Callable] = {
    "tcr_loss": _check_tcr,
    "simsiam_loss": _check_simsiam,
    "byol_loss": _check_byol,
    "simsiam_cmp_loss": _check_simsiam_cmp,
    "byol_cmp_loss": _check_byol_cmp,
    "empssl_loss": _check_empssl,
}


def run_loss_suite(instances: int = 100, seed: int = 0, names=None) -> SuiteResult:
    result = SuiteResult(instances=instances)
    for name in names or CHECKS:
        check = CHECKS[name]
        rng = np.random.default_rng([seed, list(CHECKS).index(name)])
        worst, leaks = 0.0, 0
        for _ in range(instances):
            err, leak = check(rng)
            worst = max(worst, err)
            leaks += leak
        result.max_error[name] = worst
        result.barrier_violations[name] = leaks
    return result


def _op_checks(rng) -> dict[str, float]:
    """One random instance per differentiable tensor op."""
    n, m, k = (int(v) for v in rng.integers(1, 9, size=3))
    a = rng.standard_normal((n, m))
    b = rng.standard_normal((m, k))
    c = rng.standard_normal((n, m))
    w = rng.standard_normal((1, m))
    return {
        "matmul": T.grad_check(lambda x: T.total(T.mul(T.matmul(x, x.graph.constant(b)), x.graph.constant(_ramp(n, k)))), a),
        "l2_normalize_rows": T.grad_check(lambda x: T.total(T.mul(T.l2_normalize_rows(x), x.graph.constant(c))), a),
        "cosine_rows": T.grad_check(lambda x: T.total(T.cosine_rows(x, x.graph.constant(c))), a),
        "mse": T.grad_check(lambda x: T.mse(x, x.graph.constant(c)), a),
        "mse_sum": T.grad_check(lambda x: T.mse_sum(x, x.graph.constant(c)), a),
        "logdet_gram": T.grad_check(lambda x: T.logdet_gram(x, 2.0), a),
        "mean_stack": T.grad_check(lambda x: T.total(T.mul(T.mean_stack([x, T.scale(x, 2.0)]), x.graph.constant(c))), a),
        "relu": T.grad_check(lambda x: T.total(T.mul(T.relu(x), x.graph.constant(c))), a + np.sign(a) * 0.01),
        "add_broadcast": T.grad_check(lambda x: T.total(T.square(T.add(x.graph.constant(c), x))), w),
        "standardize_rows": T.grad_check(lambda x: T.total(T.mul(T.standardize_rows(x), x.graph.constant(c))), a)
        if m > 1 else 0.0,
    }


def _ramp(n, k):
    return np.linspace(-1.0, 1.0, n * k).reshape(n, k)


def run_op_suite(instances: int = 100, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, err in _op_checks(rng).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst

"""Self-contained oracle suite behind ``regmix verify``.

Every check compares library output with something computed independently:
central finite differences, closed-form arithmetic via :mod:`math`, or an
exact argument about linear objectives over a box. Library functions are
looked up through their modules at call time, so a patched implementation
is what gets verified.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from regmix import attacks, losses, nn
from regmix import tensor as T

FD_STEP = 1e-5
FD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0


def _central_diff(f, x, h=FD_STEP):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def _grad_error(fn, *inputs):
    """Worst relative error over inputs of reverse-mode vs finite-difference gradients."""
    leaves = [T.Tensor(v.copy(), requires_grad=True) for v in inputs]
    T.backward(fn(*leaves))
    worst = 0.0
    for k, v in enumerate(inputs):
        def f(z, k=k):
            args = [T.Tensor(z) if j == k else T.Tensor(inputs[j]) for j in range(len(inputs))]
            return fn(*args).item()
        worst = max(worst, _rel_err(leaves[k].grad, _central_diff(f, v)))
    return worst


def _op_cases(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w = rng.normal(size=(3, 4)) * 0.3
    img, ker = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    y = np.array([0, 3, 1])
    s = lambda t: T.tsum(T.mul(t, T.Tensor(w)))  # noqa: E731  random projection to a scalar
    return {
        "add": (lambda p, q: s(T.add(p, q)), a, b),
        "sub": (lambda p, q: s(T.sub(p, q)), a, b),
        "mul": (lambda p, q: s(T.mul(p, q)), a, b),
        "div": (lambda p, q: s(T.div(p, q)), a, pos),
        "exp": (lambda p: s(T.exp(p)), a),
        "log": (lambda p: s(T.log(p)), pos),
        "relu": (lambda p: s(T.relu(p)), a + np.sign(a) * 0.1),
        "mean": (lambda p: T.mean(T.mul(p, p)), a),
        "amax": (lambda p: T.tsum(T.amax(p, 1)), a),
        "log_softmax": (lambda p: s(T.log_softmax(p, 1)), a),
        "pick": (lambda p: T.tsum(T.pick(T.mul(p, p), y)), a),
        "matmul": (lambda p, q: T.tsum(T.matmul(p, q)), a, b.T.copy()),
        "conv2d": (lambda p, q: T.tsum(T.mul(T.conv2d(p, q, stride=2, padding=1),
                                             T.Tensor(np.linspace(-1, 1, 2 * 3 * 3 * 3).reshape(2, 3, 3, 3)))),
                   img, ker),
    }


def check_op_gradients():
    rng = np.random.default_rng(0)
    worst, where = 0.0, ""
    for name, (fn, *inputs) in _op_cases(rng).items():
        err = _grad_error(fn, *inputs)
        if err > worst:
            worst, where = err, name
    return worst, FD_TOL, f"worst op: {where}"


def _tiny_problem():
    rng = np.random.default_rng(7)
    spec = nn.ModelSpec("mlp", (2,), 2, hidden=(8,))
    model = nn.init_model(spec, 11)
    x = rng.random((6, 2)) * 0.8 + 0.1
    y = rng.integers(0, 2, size=6)
    return model, x, y, rng.uniform(-0.05, 0.05, size=x.shape), rng.uniform(-0.05, 0.05, size=x.shape)


def _check_total_loss(mode):
    model, x, y, d_init, d_final = _tiny_problem()
    cfg = losses.RegMixConfig(mode, alpha=5.0, beta=2.0, gamma=2.0, lam=1.0)
    err = _grad_error(lambda p: losses.total_loss(model, x, y, d_init, d_final, cfg, params=p), model.params)
    return err, FD_TOL, f"{model.params.size} parameters"


def check_kl_hand_value():
    oracle = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    got = losses.kl_div([0.25, 0.75], [0.5, 0.5]).item()
    return max(abs(got - 0.143841), abs(got - oracle)), 1e-6, f"kl = {got:.9f}"


def check_kl_properties():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(5), size=1000)
    q = rng.dirichlet(np.ones(5), size=1000)
    self_kl = max(abs(losses.kl_div(p[i:i + 1], p[i:i + 1]).item()) for i in range(100))
    neg = min(losses.kl_div(p[i:i + 1], q[i:i + 1]).item() for i in range(1000))
    fwd = losses.kl_div([0.9, 0.1], [0.5, 0.5]).item()
    rev = losses.kl_div([0.5, 0.5], [0.9, 0.1]).item()
    ok = self_kl == 0.0 and neg >= 0.0 and fwd != rev
    return (0.0 if ok else max(self_kl, -neg, 1.0 if fwd == rev else 0.0)), 0.0, \
        f"min kl over 1000 pairs {neg:.3g}"


def check_projection():
    rng = np.random.default_rng(2)
    worst = 0.0
    for eps in (0.0, 1 / 255, 8 / 255, 0.3):
        x = rng.random((64, 10))
        x[:, :3] = rng.choice([0.0, 1.0], size=(64, 3))
        d = attacks.project(rng.normal(scale=0.5, size=x.shape), eps, x)
        adv = x + d
        worst = max(worst, float(np.max(np.abs(d))) - eps, -float(adv.min()), float(adv.max()) - 1.0,
                    float(np.max(np.abs(attacks.project(d, eps, x) - d))))
    return max(worst, 0.0), 0.0, "|delta| <= eps, x+delta in [0,1], idempotent"


def check_fgsm_linear():
    """On a binary linear model CE is monotone in a linear function of the input,
    and the feasible set is a box, so the sign step is the exact maximizer."""
    rng = np.random.default_rng(3)
    spec = nn.ModelSpec("mlp", (10,), 2)
    model = nn.init_model(spec, 5)
    x = rng.random((200, 10))
    y = rng.integers(0, 2, size=200)
    eps = 0.05
    zero = attacks.PerturbationBatch(np.zeros_like(x), eps)
    adv = attacks.fgsm_step(model, x, zero, y, eps, eps).apply(x)

    def per_example_ce(z):
        logp = T.log_softmax(nn.forward(model, z), 1).data
        return -logp[np.arange(len(y)), y]

    best = per_example_ce(adv)
    beaten = np.zeros(len(y), dtype=bool)
    for _ in range(100):
        d = attacks.project(rng.uniform(-eps, eps, size=x.shape), eps, x)
        beaten |= per_example_ce(x + d) > best + 1e-12
    frac = float(np.mean(~beaten))
    return 1.0 - frac, 0.01, f"FGSM optimal on {100 * frac:.1f}% of points"


CHECKS = [
    ("grad/ops", check_op_gradients),
    ("grad/total_loss[l2]", lambda: _check_total_loss("l2")),
    ("grad/total_loss[amr]", lambda: _check_total_loss("amr")),
    ("grad/total_loss[agr]", lambda: _check_total_loss("agr")),
    ("kl/hand-value", check_kl_hand_value),
    ("kl/properties", check_kl_properties),
    ("projection/invariants", check_projection),
    ("fgsm/linear-optimality", check_fgsm_linear),
]


def run_checks():
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            err, tol, detail = fn()
            passed = bool(np.isfinite(err) and err <= tol)
        except Exception as exc:  # a crashing check is a failing check
            err, tol, detail, passed = float("nan"), float("nan"), f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, passed, float(err), float(tol), detail, time.perf_counter() - t0))
    return results


def format_table(results):
    w = max(len(r.name) for r in results)
    lines = [f"{'check':<{w}}  result  {'max error':>10}  {'tolerance':>9}  detail"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  {r.max_error:>10.3g}  "
                     f"{r.tolerance:>9.3g}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed"
                 + (f"; failed: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)

"""l-inf bounded perturbation generation.

Every emitted :class:`PerturbationBatch` is checked against the budget and
the valid pixel range before it leaves this module; ``BUDGET`` counts those
checks so callers can prove the assertion actually ran.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from regmix import losses, nn
from regmix import tensor as T

KINDS = ("random", "prior", "refined")


class BudgetViolation(AssertionError):
    pass


class BudgetMonitor:
    def __init__(self):
        self.reset()

    def reset(self):
        self.checks = 0
        self.elements = 0

    def check(self, delta, epsilon, x=None):
        if delta.size and np.max(np.abs(delta)) > epsilon:
            raise BudgetViolation(f"max |delta| = {np.max(np.abs(delta))!r} exceeds epsilon {epsilon!r}")
        if x is not None and delta.size:
            adv = x + delta
            if adv.min() < 0.0 or adv.max() > 1.0:
                raise BudgetViolation(f"x + delta leaves [0, 1]: range [{adv.min()!r}, {adv.max()!r}]")
        self.checks += 1
        self.elements += delta.size


BUDGET = BudgetMonitor()


@dataclass
class PerturbationBatch:
    delta: np.ndarray
    epsilon: float
    kind: str = "random"

    def tensor(self):
        return T.Tensor(self.delta.copy())

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) + self.delta


def _emit(delta, epsilon, x, kind):
    BUDGET.check(delta, epsilon, x)
    return PerturbationBatch(delta, float(epsilon), kind)


def project(delta, epsilon, x=None):
    """Clamp to [-eps, eps], then keep x + delta inside [0, 1]. Idempotent."""
    delta = np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)
    if x is None:
        return delta
    x = np.asarray(x, dtype=np.float64)
    # clipping to [-x, 1-x] directly keeps |delta| <= eps exact after the pixel clamp
    return np.clip(delta, -x, 1.0 - x)


def random_init(x, epsilon, rng):
    """Uniform(-eps, eps) noise, detached and clamped into the pixel range."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    noise = rng.uniform(-epsilon, epsilon, size=x.shape)
    return _emit(project(noise, epsilon, x), epsilon, x, "random")


def input_gradient(model, x_adv, y, loss="ce", use_ema=False):
    """Gradient of the batch attack loss with respect to the input."""
    xt = T.Tensor(np.array(x_adv, dtype=np.float64), requires_grad=True)
    logits = nn.forward(model, xt, use_ema=use_ema)
    if loss == "ce":
        objective = losses.cross_entropy(logits, y)
    elif loss == "margin":
        objective = T.mean(margin(logits, y))
    else:
        raise ValueError(f"unknown attack loss {loss!r}")
    T.backward(objective)
    return xt.grad


def margin(logits, y):
    """Best wrong-class logit minus true-class logit, per example."""
    y = np.asarray(y, dtype=np.int64)
    offset = np.zeros(logits.shape)
    offset[np.arange(logits.shape[0]), y] = -1e300
    masked = T.add(logits, T.Tensor(offset))
    return T.sub(T.amax(masked, 1), T.pick(logits, y))


def fgsm_step(model, x, delta_init, y, step_size, epsilon, use_ema=False, loss="ce"):
    x = np.asarray(x, dtype=np.float64)
    d0 = delta_init.delta if isinstance(delta_init, PerturbationBatch) else np.asarray(delta_init, np.float64)
    if d0.shape != x.shape:
        raise T.ShapeError(f"perturbation shape {list(d0.shape)} does not match input {list(x.shape)}")
    BUDGET.check(d0, epsilon, x)
    g = input_gradient(model, x + d0, y, loss=loss, use_ema=use_ema)
    delta = project(d0 + step_size * np.sign(g), epsilon, x)
    return _emit(delta, epsilon, x, "refined")


def pgd(model, x, y, epsilon, step_size, steps, init=None, use_ema=False, loss="ce"):
    """``steps`` sign-gradient ascent steps, projecting after each one."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    current = init if init is not None else PerturbationBatch(np.zeros_like(x), float(epsilon), "random")
    for _ in range(steps):
        current = fgsm_step(model, x, current, y, step_size, epsilon, use_ema=use_ema, loss=loss)
    return current


def cw_margin_attack(model, x, y, epsilon, steps, step_size, init=None, use_ema=False):
    """PGD on the logit margin instead of cross-entropy."""
    return pgd(model, x, y, epsilon, step_size, steps, init=init, use_ema=use_ema, loss="margin")


def default_step_size(epsilon, steps):
    """1.25*eps for single-step attacks, eps/4 for multi-step ones."""
    return 1.25 * epsilon if steps == 1 else epsilon / 4.0


class PriorStore:
    """Per-example buffer of the latest final perturbation, keyed by dataset index."""

    def __init__(self, n_examples, input_shape, momentum=0.9, factor=0.5, reset_period=10):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("prior momentum must lie in [0, 1]")
        self.momentum = float(momentum)
        self.factor = float(factor)
        self.reset_period = int(reset_period)
        self.buffer = np.zeros((int(n_examples),) + tuple(input_shape))
        self.filled = np.zeros(int(n_examples), dtype=bool)

    def __len__(self):
        return self.buffer.shape[0]

    def clear(self):
        self.buffer[:] = 0.0
        self.filled[:] = False

    def start_epoch(self, epoch):
        """Clear the buffer at every multiple of ``reset_period`` (0-based epochs)."""
        if self.reset_period > 0 and epoch > 0 and epoch % self.reset_period == 0:
            self.clear()
            return True
        return False

    def _check(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= len(self)):
            raise IndexError(f"prior-store index out of range [0, {len(self)}): "
                             f"got [{indices.min()}, {indices.max()}]")
        return indices

    def update(self, indices, delta):
        indices = self._check(indices)
        self.buffer[indices] = delta
        self.filled[indices] = True

    def to_bytes(self):
        out = io.BytesIO()
        meta = json.dumps({"momentum": self.momentum, "factor": self.factor,
                           "reset_period": self.reset_period})
        np.savez(out, buffer=self.buffer, filled=self.filled, meta=np.frombuffer(meta.encode(), np.uint8))
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf):
        with np.load(io.BytesIO(buf)) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            store = cls(z["buffer"].shape[0], z["buffer"].shape[1:], **meta)
            store.buffer[:] = z["buffer"]
            store.filled[:] = z["filled"]
        return store


def prior_init(store, indices, x, epsilon, rng):
    """momentum*stored + factor*U(-eps, eps), projected; unseeded rows fall back to random."""
    indices = store._check(indices)
    x = np.asarray(x, dtype=np.float64)
    if store.momentum == 0.0 or not store.filled[indices].any():
        return random_init(x, epsilon, rng)
    noise = rng.uniform(-epsilon, epsilon, size=x.shape)
    have = store.filled[indices].reshape((-1,) + (1,) * (x.ndim - 1))
    mixed = store.momentum * store.buffer[indices] + store.factor * noise
    delta = project(np.where(have, mixed, noise), epsilon, x)
    return _emit(delta, epsilon, x, "prior")

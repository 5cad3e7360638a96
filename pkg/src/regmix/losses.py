"""Classification loss, output-consistency regularizers and the training objective.

KL argument convention: ``kl_div(pred, target)`` is KL(target || pred), the
loss that pulls ``pred`` toward ``target``. No stop-gradient is applied to
either argument.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from regmix import nn
from regmix import tensor as T

LOG_FLOOR = 1e-12
NORM_TOL = 1e-6
MODES = ("l2", "amr", "agr")


@dataclass
class ProbDist:
    """Row-wise class probabilities with matching log-probabilities."""

    probs: T.Tensor
    log_probs: T.Tensor

    @classmethod
    def from_logits(cls, logits, axis=-1):
        logp = T.log_softmax(logits, axis)
        return cls(T.exp(logp), T.clamp_min(logp, math.log(LOG_FLOOR)))

    @classmethod
    def from_probs(cls, probs):
        probs = T.as_tensor(probs)
        if np.any(probs.data < 0):
            raise ValueError("probabilities must be non-negative")
        return cls(probs, T.log(T.clamp_min(probs, LOG_FLOOR)))

    def check_normalized(self, tol=NORM_TOL):
        err = np.max(np.abs(self.probs.data.sum(axis=-1) - 1.0)) if self.probs.size else 0.0
        if err > tol:
            raise ValueError(f"distribution rows are not normalized (max |sum - 1| = {err:.3g})")


def _dist(d):
    if isinstance(d, ProbDist):
        return d
    return ProbDist.from_probs(np.atleast_2d(np.asarray(d, dtype=np.float64)))


def cross_entropy(logits, y):
    logits = T.as_tensor(logits)
    y = np.asarray(y, dtype=np.int64)
    c = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    return T.neg(T.mean(T.pick(T.log_softmax(logits, 1), y)))


def kl_div(pred, target):
    """Batch mean of sum_c target_c * (log target_c - log pred_c)."""
    pred, target = _dist(pred), _dist(target)
    if pred.probs.shape != target.probs.shape:
        raise T.ShapeError(f"kl_div shapes differ: {list(pred.probs.shape)} vs {list(target.probs.shape)}")
    pred.check_normalized()
    target.check_normalized()
    per_row = T.tsum(T.mul(target.probs, T.sub(target.log_probs, pred.log_probs)), 1)
    return T.mean(per_row)


def l2_reg(out_final, out_initial):
    """Batch mean of the squared euclidean distance between two logit batches."""
    a, b = T.as_tensor(out_final), T.as_tensor(out_initial)
    if a.shape != b.shape:
        raise T.ShapeError(f"l2_reg shapes differ: {list(a.shape)} vs {list(b.shape)}")
    d = T.sub(a, b)
    return T.mean(T.tsum(T.mul(d, d), 1))


def amr_loss(out_final, out_initial, alpha, beta):
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    p_final = ProbDist.from_logits(out_final)
    p_init = ProbDist.from_logits(out_initial)
    primary = kl_div(p_final, p_init)
    auxiliary = kl_div(p_init, p_final)
    return T.add(T.mul(primary, float(alpha)), T.mul(auxiliary, float(beta)))


def agr_loss(out_final, out_initial, out_clean, alpha, beta, gamma):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    shapes = {tuple(T.as_tensor(o).shape) for o in (out_final, out_initial, out_clean)}
    if len(shapes) != 1:
        raise T.ShapeError(f"agr_loss needs three same-shape outputs, got {sorted(map(list, shapes))}")
    toward_clean = kl_div(ProbDist.from_logits(out_final), ProbDist.from_logits(out_clean))
    return T.add(amr_loss(out_final, out_initial, alpha, beta), T.mul(toward_clean, float(gamma)))


@dataclass
class RegMixConfig:
    mode: str = "agr"
    alpha: float = 50.0
    beta: float = 20.0
    gamma: float = 20.0
    lam: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown regularizer mode {self.mode!r}; expected one of {MODES}")
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def regularizer(self, out_final, out_initial, out_clean=None):
        if self.mode == "l2":
            return l2_reg(out_final, out_initial)
        if self.mode == "amr":
            return amr_loss(out_final, out_initial, self.alpha, self.beta)
        return agr_loss(out_final, out_initial, out_clean, self.alpha, self.beta, self.gamma)


def total_loss(model, x, y, delta_init, delta_final, cfg, params=None, terms=None):
    """CE on the final adversarial batch plus ``cfg.lam`` times the regularizer.

    Runs the forward passes itself (two, or three for AGR). ``delta_*`` may be
    arrays or PerturbationBatch objects. When ``terms`` is a dict it receives
    the scalar values of each component.
    """
    x = np.asarray(x, dtype=np.float64)
    d_init = np.asarray(getattr(delta_init, "delta", delta_init), dtype=np.float64)
    d_final = np.asarray(getattr(delta_final, "delta", delta_final), dtype=np.float64)
    out_final = nn.forward(model, x + d_final, params)
    ce = cross_entropy(out_final, y)
    if cfg.lam == 0.0:
        loss = ce
        reg_value = 0.0
    else:
        out_initial = nn.forward(model, x + d_init, params)
        out_clean = nn.forward(model, x, params) if cfg.mode == "agr" else None
        reg = cfg.regularizer(out_final, out_initial, out_clean)
        reg_value = reg.item()
        loss = T.add(ce, T.mul(reg, float(cfg.lam)))
    if terms is not None:
        terms.update(ce=ce.item(), reg=reg_value, total=loss.item())
    return loss

"""Adversarial training loop with SGD+momentum, EMA, prior-guided starts and best/last selection."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from regmix import attacks, evalkit, nn
from regmix import tensor as T
from regmix.data import BatchPlan, batches
from regmix.losses import RegMixConfig, total_loss

PRIOR_MODES = ("random", "prior")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    epsilon: float
    regmix: RegMixConfig = field(default_factory=RegMixConfig)
    lr_milestones: tuple = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    attack_steps: int = 1
    attack_step_size: float | None = None
    ema_decay: float | None = None
    prior_mode: str = "random"
    prior_reset: int = 10
    prior_momentum: float = 0.9
    prior_factor: float = 0.5
    seed: int = 0
    eval_pgd_steps: int = 10
    eval_examples: int = 512

    def __post_init__(self):
        if isinstance(self.regmix, dict):
            self.regmix = RegMixConfig(**self.regmix)
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.attack_steps < 1:
            raise ValueError("attack_steps must be >= 1")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    @property
    def step_size(self):
        if self.attack_step_size is not None:
            return self.attack_step_size
        return attacks.default_step_size(self.epsilon, self.attack_steps)

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** sum(1 for m in self.lr_milestones if epoch >= m)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    clean_acc: float
    robust_acc: float
    lr: float
    wall_time: float


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    best_epoch: int | None = None

    HEADER = ("epoch", "train_loss", "clean_acc", "robust_acc", "lr", "wall_time", "best")

    def robust(self):
        return [r.robust_acc for r in self.rows]

    def metrics(self):
        """Rows without wall-clock time: the part that is reproducible bit-for-bit."""
        return [(r.epoch, r.train_loss, r.clean_acc, r.robust_acc, r.lr) for r in self.rows], self.best_epoch

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.clean_acc), repr(r.robust_acc),
                            repr(r.lr), f"{r.wall_time:.3f}", int(r.epoch == self.best_epoch)])

    @classmethod
    def from_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                rep.rows.append(EpochRow(int(d["epoch"]), float(d["train_loss"]), float(d["clean_acc"]),
                                         float(d["robust_acc"]), float(d["lr"]), float(d["wall_time"])))
                if d["best"] == "1":
                    rep.best_epoch = int(d["epoch"])
        return rep


def sgd_step(params, grads, lr, momentum, velocity):
    """In place: v <- momentum*v + g; w <- w - lr*v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError(f"length mismatch: params {len(params)}, grads {len(grads)}, velocity {len(velocity)}")
    velocity *= momentum
    velocity += grads
    params -= lr * velocity


def detect_catastrophic_overfitting(report, window=3, drop_threshold=20.0):
    """First epoch whose robust accuracy sits more than ``drop_threshold``
    percentage points below the max of the preceding ``window`` epochs.

    ``report`` is a TrainReport (accuracies stored as fractions) or a plain
    sequence of accuracies in percent. Epochs are numbered from 1.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if isinstance(report, TrainReport):
        series = [100.0 * a for a in report.robust()]
        epochs = [r.epoch for r in report.rows]
    else:
        series = [float(a) for a in report]
        epochs = list(range(1, len(series) + 1))
    for i in range(1, len(series)):
        recent = max(series[max(0, i - window):i])
        if recent - series[i] > drop_threshold:
            return epochs[i]
    return None


def _selection_metrics(model, ds_eval, cfg, use_ema):
    ev = ds_eval.head(cfg.eval_examples)
    clean = evalkit.accuracy(model, ev.x, ev.y, use_ema)
    tag = f"pgd-{cfg.eval_pgd_steps}"
    robust = evalkit.robust_accuracy(model, ev.x, ev.y, tag, cfg.epsilon, cfg.seed, use_ema)
    return clean, robust


def _trainer_state(model):
    state = json.loads(model.extensions.get("trainer", b"{}").decode() or "{}")
    velocity = None
    if "velocity" in model.extensions:
        velocity = np.frombuffer(model.extensions["velocity"], dtype="<f8").astype(np.float64)
    store = None
    if "prior" in model.extensions:
        store = attacks.PriorStore.from_bytes(model.extensions["prior"])
    return state, velocity, store


def train(ds_train, ds_eval, cfg, spec, resume=None, on_batch=None, log=None):
    """Train from scratch (or continue from a ``last`` snapshot).

    Returns ``(best, last, report)``. ``on_batch(epoch, batch, indices, d_init,
    d_final)`` is an optional instrumentation hook.
    """
    use_ema = cfg.ema_decay is not None
    if resume is None:
        model = nn.init_model(spec, cfg.seed)
        velocity = np.zeros_like(model.params)
        store = None
        start, best_key = 0, None
    else:
        model = resume.copy(tag="last")
        state, velocity, store = _trainer_state(resume)
        velocity = np.zeros_like(model.params) if velocity is None else velocity
        start = int(state.get("epochs_done", 0))
        best_key = tuple(state["best_key"]) if state.get("best_key") else None
    if cfg.prior_mode == "prior" and store is None:
        store = attacks.PriorStore(len(ds_train), ds_train.input_shape, cfg.prior_momentum,
                                   cfg.prior_factor, cfg.prior_reset)
    report = TrainReport()
    best = resume.copy(tag="best") if resume is not None else None
    eps = cfg.epsilon

    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        if store is not None:
            store.start_epoch(epoch)
        total, count = 0.0, 0
        plan = BatchPlan(cfg.batch_size, cfg.seed, epoch)
        for b, (idx, xb, yb) in enumerate(batches(ds_train, plan)):
            rng = np.random.default_rng([cfg.seed, epoch, b])
            if store is not None:
                d_init = attacks.prior_init(store, idx, xb, eps, rng)
            else:
                d_init = attacks.random_init(xb, eps, rng)
            d_final = attacks.pgd(model, xb, yb, eps, cfg.step_size, cfg.attack_steps, init=d_init)
            attacks.BUDGET.check(d_init.delta, eps, xb)
            attacks.BUDGET.check(d_final.delta, eps, xb)

            params = T.Tensor(model.params.copy(), requires_grad=True)
            terms = {}
            loss = total_loss(model, xb, yb, d_init, d_final, cfg.regmix, params=params, terms=terms)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {b}: "
                                       + ", ".join(f"{k}={v!r}" for k, v in terms.items()))
            T.backward(loss)
            sgd_step(model.params, params.grad, lr, cfg.momentum, velocity)
            if use_ema:
                nn.ema_update(model, cfg.ema_decay)
            if store is not None:
                store.update(idx, d_final.delta)
            if on_batch is not None:
                on_batch(epoch, b, idx, d_init, d_final)
            total += loss.item() * len(yb)
            count += len(yb)

        clean, robust = _selection_metrics(model, ds_eval, cfg, use_ema)
        row = EpochRow(epoch + 1, total / max(count, 1), clean, robust, lr, time.perf_counter() - t0)
        report.rows.append(row)
        key = (robust, clean)
        if best_key is None or key > best_key:
            best_key = key
            best = model.copy(tag="best")
            best.extensions = {}
            report.best_epoch = row.epoch
        if log is not None:
            log(row)

    model.extensions = {
        "trainer": json.dumps({"epochs_done": cfg.epochs, "best_key": list(best_key)}).encode(),
        "velocity": velocity.astype("<f8").tobytes(),
    }
    if store is not None:
        model.extensions["prior"] = store.to_bytes()
    return best, model, report

"""Robustness tables, loss-landscape grids and probability dumps.

Attack tags understood by :func:`evaluate`:

``clean``         no perturbation
``fgsm``          one sign step of size eps from the clean point
``pgd-K``         K steps of size eps/4 from a uniform random start
``cw`` / ``cw-K`` K (default 20) margin-loss steps of size eps/4, random start
``aa``            reserved for AutoAttack; not implemented
"""
from __future__ import annotations

import csv
import json
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from regmix import attacks, losses, nn
from regmix import tensor as T

CW_DEFAULT_STEPS = 20
EVAL_CHUNK = 512
SWEEP_EPSILONS = tuple(k / 255 for k in (8, 10, 12, 14, 16))

_TAG = re.compile(r"^(clean|fgsm|aa|pgd-(\d+)|cw(?:-(\d+))?)$")


class UnknownAttack(ValueError):
    pass


def parse_attack(tag):
    """Return ``(family, steps)`` for an attack tag."""
    m = _TAG.match(tag)
    if not m:
        raise UnknownAttack(f"unknown attack tag {tag!r}; expected clean, fgsm, pgd-K, cw, cw-K or aa")
    if tag in ("clean", "fgsm", "aa"):
        return tag, {"clean": 0, "fgsm": 1, "aa": 0}[tag]
    if tag.startswith("pgd"):
        steps = int(m.group(2))
        family = "pgd"
    else:
        steps = int(m.group(3)) if m.group(3) else CW_DEFAULT_STEPS
        family = "cw"
    if steps < 1:
        raise UnknownAttack(f"attack {tag!r} needs at least one step")
    return family, steps


def _cell_rng(seed, tag, epsilon):
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode()), int(round(epsilon * 255 * 1000))])


def attack_inputs(model, x, y, tag, epsilon, seed=0, use_ema=False):
    """Adversarial inputs for one (attack, epsilon) cell; deterministic in ``seed``."""
    family, steps = parse_attack(tag)
    x = np.asarray(x, dtype=np.float64)
    if family == "aa":
        raise UnknownAttack("AutoAttack ('aa') is reserved in the report schema but not implemented")
    if family == "clean" or len(x) == 0:
        return x
    if family == "fgsm":
        zero = attacks.PerturbationBatch(np.zeros_like(x), float(epsilon), "random")
        return attacks.fgsm_step(model, x, zero, y, epsilon, epsilon, use_ema=use_ema).apply(x)
    init = attacks.random_init(x, epsilon, _cell_rng(seed, tag, epsilon))
    loss = "ce" if family == "pgd" else "margin"
    out = np.empty_like(x)
    for s in range(0, len(x), EVAL_CHUNK):
        sl = slice(s, s + EVAL_CHUNK)
        chunk_init = attacks.PerturbationBatch(init.delta[sl], init.epsilon, init.kind)
        res = attacks.pgd(model, x[sl], y[sl], epsilon, epsilon / 4.0, steps, init=chunk_init,
                          use_ema=use_ema, loss=loss)
        out[sl] = res.apply(x[sl])
    return out


def accuracy(model, x, y, use_ema=False):
    if len(y) == 0:
        return 0.0
    pred = np.concatenate([nn.predict(model, x[s:s + EVAL_CHUNK], use_ema)
                           for s in range(0, len(x), EVAL_CHUNK)])
    return float(np.mean(pred == np.asarray(y)))


def robust_accuracy(model, x, y, tag, epsilon, seed=0, use_ema=False):
    return accuracy(model, attack_inputs(model, x, y, tag, epsilon, seed, use_ema), y, use_ema)


# ---------------------------------------------------------------- reports

@dataclass
class EvalRow:
    snapshot: str
    attack: str
    steps: int
    epsilon: float
    accuracy: float
    n: int


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    HEADER = ("snapshot", "attack", "steps", "epsilon", "accuracy", "n")

    def cell(self, attack, epsilon, snapshot=None):
        for r in self.rows:
            if r.attack == attack and (attack == "clean" or r.epsilon == epsilon) \
                    and (snapshot is None or r.snapshot == snapshot):
                return r.accuracy
        raise KeyError((attack, epsilon, snapshot))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r.snapshot, r.attack, r.steps, repr(r.epsilon), repr(r.accuracy), r.n])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            return cls([EvalRow(d["snapshot"], d["attack"], int(d["steps"]), float(d["epsilon"]),
                                float(d["accuracy"]), int(d["n"])) for d in reader])


def evaluate(model, ds, attack_tags, epsilons, seed=0, use_ema=None, tag=None):
    """Accuracy for every (attack, epsilon) cell, plus one clean row.

    ``use_ema=None`` evaluates the EMA shadow whenever the snapshot carries one.
    """
    if not attack_tags:
        raise ValueError("attack list is empty")
    if not epsilons:
        raise ValueError("epsilon list is empty")
    for a in attack_tags:
        if parse_attack(a)[0] == "aa":
            raise UnknownAttack("AutoAttack ('aa') is reserved in the report schema but not implemented")
    if use_ema is None:
        use_ema = model.ema is not None
    label = tag or model.tag
    if use_ema:
        label += "+ema"
    x, y = ds.x, ds.y
    report = EvalReport([EvalRow(label, "clean", 0, 0.0, accuracy(model, x, y, use_ema), len(y))])
    for a in attack_tags:
        if a == "clean":
            continue
        _, steps = parse_attack(a)
        for eps in epsilons:
            acc = robust_accuracy(model, x, y, a, float(eps), seed, use_ema)
            report.rows.append(EvalRow(label, a, steps, float(eps), acc, len(y)))
    return report


# ---------------------------------------------------------------- landscape

def _probe_loss(model, x, y, loss, use_ema):
    logits = nn.forward(model, x, use_ema=use_ema)
    if loss == "ce":
        return losses.cross_entropy(logits, y).item()
    if loss == "logit":
        return -float(np.mean(T.pick(logits, y).data))
    raise ValueError(f"unknown landscape loss {loss!r}")


@dataclass
class LandscapeGrid:
    a: np.ndarray
    b: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)
    u: np.ndarray | None = None
    v: np.ndarray | None = None

    @property
    def center(self):
        return self.values[len(self.a) // 2, len(self.b) // 2]

    def to_csv(self, path, with_meta=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a\\b"] + [repr(float(b)) for b in self.b])
            for a, row in zip(self.a, self.values):
                w.writerow([repr(float(a))] + [repr(float(v)) for v in row])
        if with_meta:
            with open(str(path) + ".json", "w") as fh:
                json.dump(self.meta, fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        b = np.array([float(v) for v in rows[0][1:]])
        a = np.array([float(r[0]) for r in rows[1:]])
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        meta = {}
        try:
            with open(str(path) + ".json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            pass
        return cls(a, b, values, meta)


def landscape(model, probe_x, probe_y, eta=8 / 255, resolution=21, seed=0, attack_steps=10,
              loss="ce", use_ema=False):
    """Mean loss over probes on the plane spanned by an adversarial and a Rademacher direction.

    u = eta * sign(grad_x CE) taken at the PGD-``attack_steps`` adversarial
    point; v = eta * Rademacher(seed). Cell (i, j) is the loss at
    clip(x + a_i*u + b_j*v, 0, 1) with a, b on a symmetric grid over [-1, 1].
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be an odd integer >= 3")
    x = np.asarray(probe_x, dtype=np.float64)
    y = np.asarray(probe_y, dtype=np.int64)
    rng = np.random.default_rng([int(seed), 0x1A4D])
    init = attacks.random_init(x, eta, rng)
    x_hat = attacks.pgd(model, x, y, eta, eta / 4.0, attack_steps, init=init, use_ema=use_ema).apply(x)
    u = eta * np.sign(attacks.input_gradient(model, x_hat, y, use_ema=use_ema))
    v = eta * rng.choice(np.array([-1.0, 1.0]), size=x.shape)
    half = resolution // 2
    coeffs = (np.arange(resolution) - half) / half
    values = np.empty((resolution, resolution))
    for i, a in enumerate(coeffs):
        for j, b in enumerate(coeffs):
            values[i, j] = _probe_loss(model, np.clip(x + a * u + b * v, 0.0, 1.0), y, loss, use_ema)
    meta = {"eta": eta, "resolution": resolution, "seed": int(seed), "attack_steps": attack_steps,
            "loss": loss, "reduction": "mean", "n_probes": int(len(y))}
    return LandscapeGrid(coeffs, coeffs.copy(), values, meta, u, v)


# ---------------------------------------------------------------- distribution dumps

@dataclass
class DistributionTable:
    index: np.ndarray
    label: np.ndarray
    p_clean: np.ndarray
    p_adv: np.ndarray

    def header(self):
        c = self.p_clean.shape[1]
        return (["index", "label"] + [f"p_clean_{k}" for k in range(c)]
                + [f"p_adv_{k}" for k in range(c)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for i, lab, pc, pa in zip(self.index, self.label, self.p_clean, self.p_adv):
                w.writerow([int(i), int(lab)] + [repr(float(p)) for p in pc] + [repr(float(p)) for p in pa])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        c = (len(rows[0]) - 2) // 2
        body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, 2 + 2 * c)
        return cls(body[:, 0].astype(np.int64), body[:, 1].astype(np.int64), body[:, 2:2 + c], body[:, 2 + c:])


def _softmax(model, x, use_ema):
    return np.exp(T.log_softmax(nn.forward(model, x, use_ema=use_ema), 1).data)


def dump_distributions(model, ds, attack="pgd-10", epsilon=8 / 255, class_filter=None, seed=0, use_ema=False):
    """Clean and attacked softmax rows per example, optionally restricted to some labels."""
    mask = np.ones(len(ds), dtype=bool)
    if class_filter is not None:
        wanted = sorted(set(int(c) for c in class_filter))
        bad = [c for c in wanted if not 0 <= c < ds.classes]
        if bad:
            raise ValueError(f"class filter entries {bad} outside [0, {ds.classes})")
        mask = np.isin(ds.y, wanted)
    x, y, idx = ds.x[mask], ds.y[mask], ds.indices[mask]
    x_adv = attack_inputs(model, x, y, attack, epsilon, seed, use_ema)
    return DistributionTable(idx, y, _softmax(model, x, use_ema), _softmax(model, x_adv, use_ema))


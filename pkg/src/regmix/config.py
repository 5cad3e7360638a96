"""JSON run configuration with a closed schema.

A config document has four sections::

    {
      "data":  {"source": "blobs", "n": 4500, "classes": 10, "dim": 60, ...},
      "model": {"arch": "mlp", "hidden": [64]},
      "train": {"epochs": 30, "batch_size": 64, "lr": 0.05, "epsilon": 0.05,
                "regmix": {"mode": "agr", "alpha": 20, "beta": 8, "gamma": 2}},
      "eval":  {"attacks": ["fgsm", "pgd-10"], "epsilons": ["8/255", 0.05]}
    }

``train`` mirrors :class:`regmix.trainer.TrainConfig` field for field and
``train.regmix`` mirrors :class:`regmix.losses.RegMixConfig`. Unknown keys
anywhere are errors; missing required keys are reported together by name.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from regmix import data, nn
from regmix.losses import RegMixConfig
from regmix.trainer import TrainConfig

PRESET_DIR = Path(__file__).parent / "presets"
DATA_DIR_ENV = "REGMIX_DATA_DIR"


class ConfigError(ValueError):
    pass


class ConfigWarning(UserWarning):
    pass


DATA_KEYS = {
    "blobs": ({"n", "classes", "dim", "separation"},
              {"robust_dims", "weak_separation", "seed", "n_test", "split_seed"}),
    "idx": ({"train_images", "train_labels", "test_images", "test_labels"}, {"limit", "classes"}),
    "cifar10": ({"train_files", "test_file"}, {"limit"}),
}
MODEL_KEYS = ({"arch"}, {"hidden", "channels"})
TRAIN_REQUIRED = {"epochs", "batch_size", "lr", "epsilon"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
REGMIX_KEYS = {f.name for f in dataclasses.fields(RegMixConfig)}
EVAL_KEYS = {"attacks", "epsilons", "seed", "offset", "examples", "landscape", "dump"}
LANDSCAPE_KEYS = {"eta", "resolution", "probes", "attack_steps", "loss"}
DUMP_KEYS = {"attack", "epsilon", "classes", "limit"}


@dataclass
class LandscapeConfig:
    eta: float = 8 / 255
    resolution: int = 21
    probes: int = 256
    attack_steps: int = 10
    loss: str = "ce"


@dataclass
class DumpConfig:
    attack: str = "pgd-10"
    epsilon: float = 8 / 255
    classes: list | None = None
    limit: int | None = None


@dataclass
class EvalConfig:
    attacks: list = field(default_factory=lambda: ["fgsm", "pgd-10", "cw"])
    epsilons: list = field(default_factory=lambda: [k / 255 for k in (8, 10, 12, 14, 16)])
    seed: int | None = None
    offset: int = 0
    examples: int | None = None
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)
    dump: DumpConfig = field(default_factory=DumpConfig)


@dataclass
class RunConfig:
    data: dict
    spec_args: dict
    train: TrainConfig
    eval: EvalConfig
    source: str | None = None

    @property
    def eval_seed(self):
        return self.train.seed if self.eval.seed is None else self.eval.seed

    def to_dict(self):
        train = self.train.to_dict()
        return {
            "data": copy.deepcopy(self.data),
            "model": copy.deepcopy(self.spec_args),
            "train": train,
            "eval": dataclasses.asdict(self.eval),
        }

    def with_seed(self, seed):
        """Copy with the training and evaluation seeds replaced (the dataset seed stays)."""
        out = copy.deepcopy(self)
        out.train.seed = int(seed)
        out.eval.seed = int(seed)
        return out


def parse_epsilon(value):
    """A float, or a string such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"epsilon must be a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse epsilon {value!r}") from None


def _check_keys(section, obj, required, optional, missing):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(obj) - required - optional)
    if unknown:
        raise ConfigError(f"unknown field(s) in {section}: " + ", ".join(f"{section}.{k}" for k in unknown))
    missing.extend(f"{section}.{k}" for k in sorted(required - set(obj)))


def _sub(cls, section, obj, keys):
    if obj is None:
        return cls()
    _check_keys(section, obj, set(), keys, [])
    return cls(**obj)


def parse(doc, source=None):
    """Validate a decoded JSON document and build a :class:`RunConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    missing = []
    _check_keys("config", doc, {"data", "model", "train"}, {"eval", "description"}, missing)
    if missing:
        raise ConfigError("missing required field(s): " + ", ".join(m.split(".", 1)[1] for m in missing))

    d = doc["data"]
    if not isinstance(d, dict) or "source" not in d:
        raise ConfigError("missing required field(s): data.source")
    if d["source"] not in DATA_KEYS:
        raise ConfigError(f"unknown data.source {d['source']!r}; expected one of {sorted(DATA_KEYS)}")
    req, opt = DATA_KEYS[d["source"]]
    _check_keys("data", d, req | {"source"}, opt, missing)
    _check_keys("model", doc["model"], *MODEL_KEYS, missing)
    t = doc["train"]
    _check_keys("train", t, TRAIN_REQUIRED, TRAIN_KEYS - TRAIN_REQUIRED, missing)
    rm = t.get("regmix", {}) if isinstance(t, dict) else {}
    _check_keys("train.regmix", rm, set(), REGMIX_KEYS, missing)
    if missing:
        raise ConfigError("missing required field(s): " + ", ".join(missing))

    mode = rm.get("mode", RegMixConfig.mode)
    if mode == "amr" and "gamma" in rm:
        warnings.warn("train.regmix.gamma is ignored when mode is 'amr'", ConfigWarning, stacklevel=2)
    if mode == "l2":
        ignored = [k for k in ("alpha", "beta", "gamma") if k in rm]
        if ignored:
            warnings.warn(f"train.regmix.{'/'.join(ignored)} ignored when mode is 'l2'", ConfigWarning,
                          stacklevel=2)

    t = dict(t)
    for k in ("epsilon", "attack_step_size"):
        if t.get(k) is not None:
            t[k] = parse_epsilon(t[k])
    try:
        train = TrainConfig(**{**t, "regmix": RegMixConfig(**rm)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from None

    e = dict(doc.get("eval") or {})
    _check_keys("eval", e, set(), EVAL_KEYS, [])
    e["landscape"] = _sub(LandscapeConfig, "eval.landscape", e.get("landscape"), LANDSCAPE_KEYS)
    e["dump"] = _sub(DumpConfig, "eval.dump", e.get("dump"), DUMP_KEYS)
    if "epsilons" in e:
        e["epsilons"] = [parse_epsilon(v) for v in e["epsilons"]]
    e["dump"].epsilon = parse_epsilon(e["dump"].epsilon)
    e["landscape"].eta = parse_epsilon(e["landscape"].eta)
    ev = EvalConfig(**e)
    if not ev.attacks:
        raise ConfigError("eval.attacks is empty")
    if not ev.epsilons:
        raise ConfigError("eval.epsilons is empty")

    return RunConfig(dict(d), dict(doc["model"]), train, ev, str(source) if source else None)


def resolve_config_path(path):
    """A path as given, else a bundled preset of that name (with or without ``.json``)."""
    p = Path(path)
    if p.is_file():
        return p
    for cand in (PRESET_DIR / p.name, PRESET_DIR / f"{p.name}.json"):
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"config not found: {path}")


def load(path):
    p = resolve_config_path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    return parse(doc, p)


def presets():
    return sorted(p.stem for p in PRESET_DIR.glob("*.json"))


# ---------------------------------------------------------------- datasets

def resolve_data_path(name, base=None):
    """Absolute paths as-is; relative ones against the config directory, then ``$REGMIX_DATA_DIR``."""
    p = Path(name)
    if p.is_absolute():
        return p
    tried = []
    for root in (base, os.environ.get(DATA_DIR_ENV)):
        if root:
            cand = Path(root) / p
            tried.append(str(cand))
            if cand.exists():
                return cand
    raise FileNotFoundError(f"data file {name!r} not found (tried: {', '.join(tried) or 'nothing'}; "
                            f"set {DATA_DIR_ENV} to a dataset root)")


def load_datasets(cfg):
    """``(train, test)`` datasets for the configured source."""
    d = cfg.data
    base = Path(cfg.source).parent if cfg.source else None
    if d["source"] == "blobs":
        ds = data.synth_blobs(d["n"], d["classes"], d["dim"], d["separation"], d.get("seed", 0),
                              robust_dims=d.get("robust_dims"), weak_separation=d.get("weak_separation", 0.0))
        return data.train_test_split(ds, d.get("n_test", max(1, d["n"] // 5)), d.get("split_seed", 0))
    if d["source"] == "idx":
        path = lambda k: resolve_data_path(d[k], base)  # noqa: E731
        tr = data.read_idx(path("train_images"), path("train_labels"), "train", d.get("classes"))
        te = data.read_idx(path("test_images"), path("test_labels"), "test", tr.classes)
    else:
        parts = [data.read_cifar_binary(resolve_data_path(f, base)) for f in d["train_files"]]
        tr = data.Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), 10)
        te = data.read_cifar_binary(resolve_data_path(d["test_file"], base), "test")
    if d.get("limit"):
        tr, te = tr.head(d["limit"]), te.head(d["limit"])
    return tr, te


def model_spec(cfg, ds):
    m = cfg.spec_args
    kw = {k: tuple(m[k]) for k in ("hidden", "channels") if k in m}
    return nn.ModelSpec(m["arch"], ds.input_shape, ds.classes, **kw)

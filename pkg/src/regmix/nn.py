"""Model definitions, flat-parameter snapshots and the checkpoint container.

All parameters of a model live in one flat float64 vector. Forward passes
slice that vector into layer tensors, so the gradient with respect to the
flat vector comes out of a single ``backward`` call.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"RGMXCKPT"
    u32       format version (1)
    u32       header length H
    H bytes   UTF-8 JSON: {"spec", "tag", "n_params", "has_ema", "blocks": [{"name", "nbytes"}]}
    8*n       float64 parameters
    8*n       float64 EMA shadow (only if has_ema)
    ...       extension blocks, concatenated in header order
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from regmix import tensor as T
from regmix.tensor import ShapeError, Tensor

MAGIC = b"RGMXCKPT"
FORMAT_VERSION = 1

ARCHITECTURES = ("mlp", "smallconv")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple
    classes: int
    hidden: tuple = ()
    channels: tuple = (16, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        object.__setattr__(self, "channels", tuple(int(d) for d in self.channels))
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.classes < 2:
            raise ValueError(f"class count must be >= 2, got {self.classes}")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ValueError(f"invalid input shape {list(self.input_shape)}")
        if self.arch == "smallconv":
            if len(self.input_shape) != 3:
                raise ValueError(f"smallconv needs a (C, H, W) input shape, got {list(self.input_shape)}")
            if len(self.channels) != 2:
                raise ValueError("smallconv needs exactly two conv channel counts")

    def to_dict(self):
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "hidden": list(self.hidden),
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(arch=d["arch"], input_shape=tuple(d["input_shape"]), classes=int(d["classes"]),
                   hidden=tuple(d.get("hidden", ())), channels=tuple(d.get("channels", (16, 32))))

    def layout(self):
        """Ordered ``(name, shape, fan_in)`` for every parameter block."""
        blocks = []
        if self.arch == "mlp":
            width = math.prod(self.input_shape)
            for i, h in enumerate(self.hidden + (self.classes,)):
                blocks.append((f"fc{i}.w", (width, h), width))
                blocks.append((f"fc{i}.b", (h,), width))
                width = h
        else:
            c, h, w = self.input_shape
            c1, c2 = self.channels
            blocks.append(("conv1.w", (c1, c, 3, 3), c * 9))
            blocks.append(("conv1.b", (c1,), c * 9))
            blocks.append(("conv2.w", (c2, c1, 3, 3), c1 * 9))
            blocks.append(("conv2.b", (c2,), c1 * 9))
            h2, w2 = (h - 1) // 2 + 1, (w - 1) // 2 + 1  # stride 2, pad 1, 3x3
            flat = c2 * h2 * w2
            blocks.append(("fc.w", (flat, self.classes), flat))
            blocks.append(("fc.b", (self.classes,), flat))
        return blocks

    @property
    def n_params(self):
        return sum(math.prod(shape) for _, shape, _ in self.layout())


@dataclass
class ModelSnapshot:
    params: np.ndarray
    spec: ModelSpec
    ema: np.ndarray | None = None
    tag: str = "last"
    extensions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ShapeError(f"parameter vector has shape {list(self.params.shape)}, "
                             f"spec implies [{self.spec.n_params}]")
        if self.ema is not None:
            self.ema = np.ascontiguousarray(self.ema, dtype=np.float64)
            if self.ema.shape != self.params.shape:
                raise ShapeError(f"EMA shadow shape {list(self.ema.shape)} differs from "
                                 f"parameters {list(self.params.shape)}")

    def copy(self, tag=None):
        return ModelSnapshot(self.params.copy(), self.spec,
                             None if self.ema is None else self.ema.copy(),
                             self.tag if tag is None else tag, dict(self.extensions))

    def weights(self, use_ema=False):
        if use_ema:
            if self.ema is None:
                raise ValueError("snapshot has no EMA shadow")
            return self.ema
        return self.params


def init_model(spec, seed):
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape, fan_in in spec.layout():
        if name.endswith(".b"):
            chunks.append(np.zeros(math.prod(shape)))
        else:
            bound = 1.0 / math.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=math.prod(shape)))
    return ModelSnapshot(np.concatenate(chunks), spec)


def unflatten(spec, flat):
    """Slice a flat parameter tensor into named layer tensors."""
    out, offset = {}, 0
    for name, shape, _ in spec.layout():
        size = math.prod(shape)
        out[name] = T.flat_slice(flat, offset, offset + size, shape)
        offset += size
    return out


def forward(model, x, params=None, use_ema=False):
    """Logits of ``model`` on a batch ``x`` of shape (N, *input_shape).

    ``params`` may be a 1-D Tensor (typically ``requires_grad=True``) that
    replaces the snapshot's stored weights; gradients then flow into it.
    """
    spec = model.spec
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input shape {list(x.shape)} does not match model input "
                         f"[N, {', '.join(map(str, spec.input_shape))}]")
    if params is None:
        params = Tensor(model.weights(use_ema))
    elif params.shape != (spec.n_params,):
        raise ShapeError(f"parameter tensor {list(params.shape)} vs spec [{spec.n_params}]")
    p = unflatten(spec, params)
    n = x.shape[0]
    if spec.arch == "mlp":
        h = T.reshape(x, (n, -1))
        depth = len(spec.hidden) + 1
        for i in range(depth):
            h = T.add(T.matmul(h, p[f"fc{i}.w"]), p[f"fc{i}.b"])
            if i < depth - 1:
                h = T.relu(h)
        return h
    c1, c2 = spec.channels
    h = T.conv2d(x, p["conv1.w"], stride=1, padding=1)
    h = T.relu(T.add(h, T.reshape(p["conv1.b"], (1, c1, 1, 1))))
    h = T.conv2d(h, p["conv2.w"], stride=2, padding=1)
    h = T.relu(T.add(h, T.reshape(p["conv2.b"], (1, c2, 1, 1))))
    h = T.reshape(h, (n, -1))
    return T.add(T.matmul(h, p["fc.w"]), p["fc.b"])


def predict(model, x, use_ema=False):
    return np.argmax(forward(model, x, use_ema=use_ema).data, axis=1)


def ema_update(model, decay):
    """shadow <- decay*shadow + (1-decay)*current; the first call copies current."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    if model.ema is None:
        model.ema = model.params.copy()
        return
    model.ema = decay * model.ema + (1.0 - decay) * model.params


# ---------------------------------------------------------------- checkpoints

def to_bytes(model):
    names = sorted(model.extensions)
    header = {
        "spec": model.spec.to_dict(),
        "tag": model.tag,
        "n_params": int(model.params.size),
        "has_ema": model.ema is not None,
        "blocks": [{"name": k, "nbytes": len(model.extensions[k])} for k in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head,
             model.params.astype("<f8").tobytes()]
    if model.ema is not None:
        parts.append(model.ema.astype("<f8").tobytes())
    parts.extend(bytes(model.extensions[k]) for k in names)
    return b"".join(parts)


def from_bytes(buf):
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:8]!r}")
    if len(buf) < 16:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    n = header["n_params"]
    need = pos + 8 * n * (2 if header["has_ema"] else 1) + sum(b["nbytes"] for b in header["blocks"])
    if len(buf) != need:
        raise CheckpointError(f"checkpoint size {len(buf)} bytes, header implies {need}")
    params = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
    pos += 8 * n
    ema = None
    if header["has_ema"]:
        ema = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
    ext = {}
    for block in header["blocks"]:
        ext[block["name"]] = bytes(buf[pos:pos + block["nbytes"]])
        pos += block["nbytes"]
    return ModelSnapshot(params, ModelSpec.from_dict(header["spec"]), ema, header["tag"], ext)


def save_checkpoint(path, model):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

"""``regmix`` command-line entry point.

    regmix train     --config blobs-agr --out runs/agr [--seed N] [--resume runs/agr/last.ckpt]
    regmix evaluate  --config blobs-agr --out runs/agr [--snapshot best|last] [--checkpoint PATH]
    regmix landscape --config blobs-agr --out runs/agr [--snapshot best|last]
    regmix dump      --config blobs-agr --out runs/agr [--snapshot best|last]
    regmix verify

``--config`` takes a path or the name of a bundled preset. Every command that
writes into ``--out`` also records its outputs in ``manifest.json`` there.
Exit codes: 0 success, 1 failed verification or diverged training,
2 bad arguments, config or inputs.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from regmix import BACKEND, __version__, config, evalkit, nn, verify
from regmix.trainer import TrainingDiverged, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class CliError(Exception):
    pass


def _say(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- manifest

def _git_commit():
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(out, cfg, command, files, seconds):
    """Merge one command's outputs into ``out/manifest.json``."""
    path = out / MANIFEST
    man = json.loads(path.read_text()) if path.exists() else {}
    man["config"] = cfg.to_dict()
    man["config_source"] = cfg.source
    man["seeds"] = {"data": cfg.data.get("seed", 0), "split": cfg.data.get("split_seed", 0),
                    "train": cfg.train.seed, "eval": cfg.eval_seed}
    man["build"] = {"version": __version__, "backend": BACKEND, "git": _git_commit(),
                    "numpy": np.__version__, "python": sys.version.split()[0]}
    man.setdefault("files", {})
    for f in files:
        man["files"][f.name] = {"sha256": _sha256(f), "command": command}
    man.setdefault("timings", {})[command] = round(seconds, 3)
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- helpers

def _load_config(args):
    """Config from a path, a preset name, or a previous run's manifest."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", config.ConfigWarning)
        try:
            path = config.resolve_config_path(args.config)
        except FileNotFoundError as exc:
            raise CliError(str(exc)) from None
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON: {exc}") from None
        if isinstance(doc, dict) and "files" in doc and "config" in doc:
            src = doc.get("config_source")
            doc = doc["config"]
            path = Path(src) if src else path
        try:
            cfg = config.parse(doc, path)
        except config.ConfigError as exc:
            raise CliError(f"{path}: {exc}") from None
    for w in caught:
        _say(f"warning: {w.message}")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _datasets(cfg):
    try:
        return config.load_datasets(cfg)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from None


def _eval_split(cfg, test):
    start = cfg.eval.offset
    stop = len(test) if cfg.eval.examples is None else start + cfg.eval.examples
    if not 0 <= start < len(test):
        raise CliError(f"eval.offset {start} outside the {len(test)}-example test split")
    return test.subset(np.arange(start, min(stop, len(test))), "test")


def _snapshots(args, out):
    """``[(tag, snapshot)]`` to operate on."""
    if args.checkpoint:
        paths = [Path(args.checkpoint)]
    else:
        names = [args.snapshot] if args.snapshot else ["best", "last"]
        paths = [out / f"{n}.ckpt" for n in names if (out / f"{n}.ckpt").exists() or args.snapshot]
        if not paths:
            raise CliError(f"no best.ckpt or last.ckpt in {out}; pass --checkpoint or train first")
    snaps = []
    for p in paths:
        try:
            snap = nn.load_checkpoint(p)
        except FileNotFoundError:
            raise CliError(f"checkpoint not found: {p}") from None
        except nn.CheckpointError as exc:
            raise CliError(str(exc)) from None
        snaps.append((snap.tag or p.stem, snap))
    return snaps


def _check_spec(snap, ds):
    s = snap.spec
    if tuple(s.input_shape) != tuple(ds.input_shape) or s.classes != ds.classes:
        raise CliError(f"checkpoint/dataset mismatch: checkpoint expects input shape {list(s.input_shape)} "
                       f"with {s.classes} classes, dataset provides {list(ds.input_shape)} with {ds.classes}")


@contextlib.contextmanager
def _thread_cap(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------- commands

def cmd_train(args):
    cfg = _load_config(args)
    tr, te = _datasets(cfg)
    spec = config.model_spec(cfg, tr)
    resume = None
    if args.resume:
        try:
            resume = nn.load_checkpoint(args.resume)
        except (FileNotFoundError, nn.CheckpointError) as exc:
            raise CliError(str(exc)) from None
        _check_spec(resume, tr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def log(row):
        _say(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  clean {100 * row.clean_acc:5.1f}  "
             f"pgd-{cfg.train.eval_pgd_steps} {100 * row.robust_acc:5.1f}  lr {row.lr:.4g}  {row.wall_time:.1f}s")

    try:
        best, last, report = train(tr, te, cfg.train, spec, resume=resume, log=log)
    except TrainingDiverged as exc:
        _say(f"error: training diverged: {exc}")
        return EXIT_FAIL
    files = [out / "best.ckpt", out / "last.ckpt", out / "train_report.csv"]
    nn.save_checkpoint(files[0], best)
    nn.save_checkpoint(files[1], last)
    report.to_csv(files[2])
    update_manifest(out, cfg, "train", files, time.perf_counter() - t0)
    _say(f"best epoch {report.best_epoch}; wrote {', '.join(f.name for f in files)} to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_config(args)
    out = Path(args.out)
    _, te = _datasets(cfg)
    ev = _eval_split(cfg, te)
    snaps = _snapshots(args, out)
    for _, snap in snaps:
        _check_spec(snap, ev)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    files = []
    for tag, snap in snaps:
        try:
            rep = evalkit.evaluate(snap, ev, cfg.eval.attacks, cfg.eval.epsilons, cfg.eval_seed, tag=tag)
        except evalkit.UnknownAttack as exc:
            raise CliError(str(exc)) from None
        path = out / f"eval_{tag}.csv"
        rep.to_csv(path)
        files.append(path)
        for r in rep.rows:
            print(f"{r.snapshot:<10} {r.attack:<8} eps={r.epsilon:.4f}  acc={100 * r.accuracy:6.2f}%  n={r.n}")
    update_manifest(out, cfg, "evaluate", files, time.perf_counter() - t0)
    return EXIT_OK


def cmd_landscape(args):
    cfg = _load_config(args)
    out = Path(args.out)
    _, te = _datasets(cfg)
    lc = cfg.eval.landscape
    probes = _eval_split(cfg, te).head(lc.probes)
    snaps = _snapshots(args, out)
    for _, snap in snaps:
        _check_spec(snap, probes)
    t0 = time.perf_counter()
    files = []
    for tag, snap in snaps:
        try:
            grid = evalkit.landscape(snap, probes.x, probes.y, lc.eta, lc.resolution, cfg.eval_seed,
                                     lc.attack_steps, lc.loss, use_ema=snap.ema is not None)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        grid.meta["snapshot"] = tag
        path = out / f"landscape_{tag}.csv"
        grid.to_csv(path)
        files += [path, Path(str(path) + ".json")]
        print(f"{tag}: {lc.resolution}x{lc.resolution} grid, center {grid.center:.6f}, "
              f"max {grid.values.max():.6f} -> {path}")
    update_manifest(out, cfg, "landscape", files, time.perf_counter() - t0)
    return EXIT_OK


def cmd_dump(args):
    cfg = _load_config(args)
    out = Path(args.out)
    _, te = _datasets(cfg)
    dc = cfg.eval.dump
    ev = _eval_split(cfg, te)
    if dc.limit:
        ev = ev.head(dc.limit)
    snaps = _snapshots(args, out)
    for _, snap in snaps:
        _check_spec(snap, ev)
    t0 = time.perf_counter()
    files = []
    for tag, snap in snaps:
        try:
            table = evalkit.dump_distributions(snap, ev, dc.attack, dc.epsilon, dc.classes, cfg.eval_seed,
                                               use_ema=snap.ema is not None)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        path = out / f"distributions_{tag}.csv"
        table.to_csv(path)
        files.append(path)
        print(f"{tag}: {len(table.index)} rows -> {path}")
    update_manifest(out, cfg, "dump", files, time.perf_counter() - t0)
    return EXIT_OK


def cmd_verify(args):
    results = verify.run_checks()
    print(verify.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="regmix", description="Adversarial training with KL mixture regularizers.")
    p.add_argument("--version", action="version", version=f"regmix {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_out=True):
        sp.add_argument("--config", required=True, help="config JSON path or preset name "
                                                         f"({', '.join(config.presets())})")
        sp.add_argument("--out", required=needs_out, help="run directory")
        sp.add_argument("--seed", type=int, help="override the training and evaluation seeds")
        sp.add_argument("--threads", type=int, help="cap BLAS/OpenMP worker threads")

    t = sub.add_parser("train", help="train and write best/last checkpoints")
    common(t)
    t.add_argument("--resume", help="continue from a last.ckpt written by an earlier run")
    t.set_defaults(func=cmd_train)
    for name, fn, help_ in [("evaluate", cmd_evaluate, "robust accuracy table per snapshot"),
                            ("landscape", cmd_landscape, "loss-surface grid around test probes"),
                            ("dump", cmd_dump, "clean and adversarial softmax rows")]:
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--snapshot", choices=("best", "last"), help="default: every snapshot present")
        sp.add_argument("--checkpoint", help="explicit checkpoint file instead of the run directory")
        sp.set_defaults(func=fn)
    v = sub.add_parser("verify", help="run the embedded oracle suite")
    v.add_argument("--threads", type=int)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        _say("error: --threads must be >= 1")
        return EXIT_USAGE
    try:
        with _thread_cap(args.threads):
            return args.func(args)
    except CliError as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

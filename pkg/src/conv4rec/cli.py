"""Command-line entry point: train, evaluate, predict, bounds, synth-tv, gradcheck.

Configuration is a flat ``key = value`` file; command-line flags override it
and built-in defaults fill the rest. Every run writes the resolved
configuration to ``<out>/config.txt``, which can be passed back with
``--config`` to replay the run.

Output layout under ``--out``::

    config.txt          resolved configuration
    split.tsv           train/validation/test manifest
    history.tsv         per-epoch losses
    checkpoints/        one block_NNN.npz per block of epochs
    reports/            metric tables (.tsv) and figures (.png)

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation, plotting, theory
from .dataset import (
    DataError,
    ObservedDataset,
    RatingScale,
    SplitSpec,
    load_ratings,
    read_split_manifest,
    split,
    write_split_manifest,
)
from .model import (
    DecoderSpec,
    EncoderSpec,
    embedding_norm_max,
    forward_trace,
    init_params,
    load_checkpoint,
    outputs_from_probs,
    save_checkpoint,
)
from .numerics import make_rng
from .training import NumericalError, TrainConfig, TrainState, gradcheck, train, write_history

_log = logging.getLogger("conv4rec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict[str, Any] = {
    "data": "",
    "scale": "auto",
    "split": "0.9,0.05,0.05",
    "stratify": False,
    "seed": 0,
    "out": "run",
    # model and schedule
    "lr": 1e-3,
    "batch_size": 64,
    "epoch_block": 10,
    "max_blocks": 4,
    "metric": "validation-loss",
    "L": 3,
    "r": 32,
    "K": 12,
    "enc_K": 0,
    "L0": 1,
    "biases": False,
    "weight_decay": 0.0,
    "flatten_lr_scale": 1.0,
    # evaluation
    "ks": "50,100",
    "exclude_cold": False,
    "lambda_density": False,
    "percentile": 0.5,
    "top": 10,
    # predict
    "user": "",
    "item": "",
    # bounds
    "delta": 0.05,
    # synthetic recovery
    "synth_m": 50,
    "synth_n": 80,
    "synth_rank": 2,
    "synth_k": 5,
    "synth_N": "1000,10000,100000",
    "synth_seeds": "0,1,2",
    "synth_r": 4,
    "synth_K": 8,
    "synth_steps": 3000,
    "synth_lr": 0.01,
    "synth_noiseless": False,
    # gradient check
    "gc_m": 8,
    "gc_n": 12,
    "gc_k": 5,
    "gc_r": 4,
    "gc_L": 3,
    "gc_K": 6,
    "gc_h": 1e-5,
    "gc_tol": 1e-4,
}

COMMANDS = ("train", "evaluate", "predict", "bounds", "synth-tv", "gradcheck")


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, value: Any) -> Any:
    if key not in DEFAULTS:
        raise UsageError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None
    return value.strip()


def read_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out: dict[str, Any] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def write_config(path: Path, cfg: dict[str, Any]) -> None:
    with path.open("w") as fh:
        for key in sorted(cfg):
            val = cfg[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            fh.write(f"{key} = {val}\n")


def resolve_config(file_cfg: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    cfg.update(file_cfg)
    for key, value in overrides.items():
        cfg[key] = _coerce(key, value)
    return cfg


def _ints(text: str) -> list[int]:
    return [int(float(t)) for t in str(text).split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: cfg[k] for k in names if k in cfg}
    kw["enc_K"] = cfg["enc_K"] or None
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _scale(cfg: dict[str, Any]) -> RatingScale | None:
    if cfg["scale"] in ("", "auto"):
        return None
    return RatingScale(tuple(_floats(cfg["scale"])))


def _split_spec(cfg: dict[str, Any]) -> SplitSpec:
    fr = _floats(cfg["split"])
    if len(fr) != 3:
        raise UsageError("split needs three fractions")
    try:
        return SplitSpec(*fr, seed=cfg["seed"], stratify=cfg["stratify"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_parts(cfg: dict[str, Any], out: Path) -> dict[str, ObservedDataset]:
    if not cfg["data"]:
        raise UsageError("no dataset path given (data = ...)")
    data = load_ratings(cfg["data"], _scale(cfg))
    manifest = out / "split.tsv"
    if manifest.exists():
        return read_split_manifest(manifest, data)
    tr, va, te = split(data, _split_spec(cfg))
    return {"train": tr, "validation": va, "test": te}


def _checkpoints(out: Path):
    files = sorted((out / "checkpoints").glob("block_*.npz"))
    if not files:
        raise FileNotFoundError(f"no checkpoints under {out / 'checkpoints'}")
    return [load_checkpoint(f)[0] for f in files]


class _Averaged:
    """Checkpoint-averaging predictor rebuilt from files."""

    def __init__(self, params, train: ObservedDataset):
        self.params = params
        self.train = train
        self.scale = params[0].scale

    def predict_users(self, users):
        from .training import averaged_probs

        return averaged_probs(self.params, self.train, users)


# --- commands ------------------------------------------------------------------

def cmd_train(cfg: dict[str, Any]) -> TrainState:
    out = Path(cfg["out"])
    tcfg = train_config(cfg)
    if not cfg["data"]:
        raise UsageError("no dataset path given (data = ...)")
    data = load_ratings(cfg["data"], _scale(cfg))
    tr, va, te = split(data, _split_spec(cfg))
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    for old in (out / "checkpoints").glob("block_*.npz"):
        old.unlink()
    write_config(out / "config.txt", cfg)
    write_split_manifest(out / "split.tsv", {"train": tr, "validation": va, "test": te})

    def save_block(state: TrainState) -> None:
        idx = len(state.checkpoints)
        extra = {"block": idx, "epoch": state.epoch, "metric": state.block_metrics[-1]}
        save_checkpoint(out / "checkpoints" / f"block_{idx:03d}.npz", state.checkpoints[-1], extra)
        write_history(out / "history.tsv", state.history)

    state = train(tcfg, tr, va, on_block=save_block)
    write_history(out / "history.tsv", state.history)
    plotting.plot_convergence(state.history, out / "reports" / "convergence.png")
    print(f"trained {state.epoch} epochs in {len(state.checkpoints)} blocks; "
          f"best validation {tcfg.metric} = {state.best_block_metric:.6g}")
    return state


def cmd_evaluate(cfg: dict[str, Any]) -> evaluation.MetricReport:
    out = Path(cfg["out"])
    parts = _load_parts(cfg, out)
    pred = _Averaged(_checkpoints(out), parts["train"])
    report = evaluation.evaluate(pred, parts["test"], _ints(cfg["ks"]), cfg["exclude_cold"])
    (out / "reports").mkdir(parents=True, exist_ok=True)
    report.write(out / "reports" / "metrics.tsv")
    if cfg["lambda_density"]:
        choice = evaluation.tune_lambda_per_user(pred, parts["validation"])
        dens = evaluation.lambda_density(choice)
        with (out / "reports" / "lambda_density.tsv").open("w") as fh:
            fh.write("lambda\tusers\n")
            for lam, count in dens:
                fh.write(f"{lam!r}\t{count}\n")
        plotting.plot_lambda_density(dens, out / "reports" / "lambda_density.png")
    for name, value in report.rows():
        print(f"{name}\t{value:.6g}")
    return report


def _lookup(ids: tuple, key: str, what: str) -> int:
    try:
        return ids.index(key)
    except ValueError:
        raise DataError(f"unknown {what} id {key!r}") from None


def cmd_predict(cfg: dict[str, Any]) -> list[dict[str, Any]]:
    out = Path(cfg["out"])
    parts = _load_parts(cfg, out)
    tr = parts["train"]
    if not cfg["user"]:
        raise UsageError("predict needs user = <id>")
    user = _lookup(tr.user_ids, str(cfg["user"]), "user")
    pred = _Averaged(_checkpoints(out), tr)
    G = pred.predict_users([user])[0]
    o = outputs_from_probs(G, pred.scale)
    seen, _ = tr.user_items(user)
    cand = np.setdiff1d(np.arange(tr.n), seen)
    med_i = float(np.median(o.interaction[cand])) if cand.size else math.nan
    med_f = float(np.median(o.prediction[cand])) if cand.size else math.nan
    if cfg["item"]:
        items = [_lookup(tr.item_ids, str(cfg["item"]), "item")]
    else:
        rep = evaluation.serendipity_report(pred, user, cfg["percentile"], cfg["top"])
        items = [int(j) for j in rep.items]
    records = []
    for j in items:
        rec = {"user": tr.user_ids[user], "item": tr.item_ids[j]}
        for c in range(G.shape[1]):
            rec[f"G{c}"] = float(G[j, c])
        for c in range(o.cond.shape[1]):
            rec[f"cond{c + 1}"] = float(o.cond[j, c])
        rec["F"] = float(o.prediction[j])
        rec["interaction"] = float(o.interaction[j])
        rec["interaction_quantile"] = float(np.mean(o.interaction <= o.interaction[j]))
        rec["serendipitous"] = bool(o.interaction[j] < med_i and o.prediction[j] > med_f)
        records.append(rec)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    path = out / "reports" / f"predict_{tr.user_ids[user]}.tsv"
    with path.open("w") as fh:
        if records:
            keys = list(records[0])
            fh.write("\t".join(keys) + "\n")
            for rec in records:
                fh.write("\t".join(str(rec[k]) for k in keys) + "\n")
    marks = {"all items": float(o.interaction[items[0]])} if items else None
    plotting.plot_interaction_boxplot({"all items": o.interaction}, out / "reports" / f"predict_{tr.user_ids[user]}.png",
                                      marks)
    for rec in records:
        print("\t".join(f"{k}={v}" for k, v in rec.items()))
    return records


def cmd_bounds(cfg: dict[str, Any]) -> dict[str, float]:
    out = Path(cfg["out"])
    parts = _load_parts(cfg, out)
    tr = parts["train"]
    try:
        params = _checkpoints(out)[-1]
        source = "checkpoint"
    except FileNotFoundError:
        tcfg = train_config(cfg)
        enc, dec = tcfg.specs(tr.n, tr.k)
        params = init_params(enc, dec, tr.scale, tcfg.seed)
        source = "init"
    dec = params.dec
    dist = theory.distance_to_init(dec, params.dec_w, params.dec_init)
    chi = max(embedding_norm_max(params, tr), 1e-12)
    x = np.zeros((1, tr.n, tr.k + 1))
    x[..., 0] = 1.0
    b = theory.BoundInputs(cfg["delta"], float(tr.N), tr.m, dec.r, dec.D2, tr.scale.span, dec.L,
                           dist.beta, dist.nu, chi, tuple(dist.a), tuple(dist.s), dec.n)
    report = {
        "source_is_checkpoint": float(source == "checkpoint"),
        "beta": dist.beta,
        "nu": dist.nu,
        "chi": chi,
        "D2": float(dec.D2),
        "N": float(tr.N),
        "bound_param_count": theory.bound_param_count(b),
        "bound_norm_based": theory.bound_norm_based(b),
    }
    for ell, (d, a, s) in enumerate(zip(dist.dist, dist.a, dist.s), start=1):
        report[f"dist_{ell}"] = d
        report[f"a_{ell}"] = a
        report[f"s_{ell}"] = s
    (out / "reports").mkdir(parents=True, exist_ok=True)
    with (out / "reports" / "bounds.tsv").open("w") as fh:
        fh.write("quantity\tvalue\n")
        for k, v in report.items():
            fh.write(f"{k}\t{v!r}\n")
    for k, v in report.items():
        print(f"{k}\t{v:.6g}")
    return report


def cmd_synth_tv(cfg: dict[str, Any]) -> list[theory.TVRow]:
    out = Path(cfg["out"])
    (out / "reports").mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    rows = theory.tv_recovery_experiment(
        cfg["synth_m"], cfg["synth_n"], cfg["synth_rank"], cfg["synth_k"], _ints(cfg["synth_N"]),
        seeds=_ints(cfg["synth_seeds"]), r_model=cfg["synth_r"], K_model=cfg["synth_K"],
        steps=cfg["synth_steps"], lr=cfg["synth_lr"], noiseless=cfg["synth_noiseless"], delta=cfg["delta"],
    )
    cols = ["seed", "N", "tv", "tv_marginal", "kl", "excess", "mse", "q_bound", "final_loss", "status"]
    with (out / "reports" / "tv.tsv").open("w") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(repr(getattr(r, c)) if c != "status" else r.status for c in cols) + "\n")
    plotting.plot_tv_curve(rows, out / "reports" / "tv.png")
    for N in sorted({r.N for r in rows}):
        print(f"N={N}\tmean_tv={np.nanmean([r.tv for r in rows if r.N == N]):.6g}")
    return rows


def cmd_gradcheck(cfg: dict[str, Any]) -> float:
    m, n, k = cfg["gc_m"], cfg["gc_n"], cfg["gc_k"]
    rng = make_rng(cfg["seed"])
    mask = rng.random((m, n)) < 0.4
    users, items = np.nonzero(mask)
    data = ObservedDataset(m, n, users, items, rng.integers(1, k + 1, size=users.size), RatingScale.integer(1, k))
    enc = EncoderSpec(n, k, (cfg["gc_K"],), (cfg["gc_r"],))
    dec = DecoderSpec.uniform(n, k, cfg["gc_r"], cfg["gc_L"], cfg["gc_K"])
    params = init_params(enc, dec, data.scale, cfg["seed"])
    err = float(gradcheck(params, np.arange(m), data, h=cfg["gc_h"]))
    passed = err <= cfg["gc_tol"]
    out = Path(cfg["out"])
    (out / "reports").mkdir(parents=True, exist_ok=True)
    with (out / "reports" / "gradcheck.tsv").open("w") as fh:
        fh.write(f"max_relative_error\t{err!r}\ntolerance\t{cfg['gc_tol']!r}\npassed\t{passed}\n")
    print(f"gradcheck {'PASS' if passed else 'FAIL'}: max relative error {err:.3e} (tolerance {cfg['gc_tol']:.0e})")
    if not passed:
        raise NumericalError(f"gradient check failed: {err:.3e} > {cfg['gc_tol']:.0e}")
    return err


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "bounds": cmd_bounds,
    "synth-tv": cmd_synth_tv,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conv4rec", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--data", help="rating file")
    ap.add_argument("--user", help="external user id (predict)")
    ap.add_argument("--item", help="external item id (predict)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config key; repeatable")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = read_config(args.config) if args.config else {}
        overrides: dict[str, Any] = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value
        for key in ("seed", "out", "data", "user", "item"):
            val = getattr(args, key)
            if val is not None:
                overrides[key] = val if isinstance(val, str) else str(val)
        cfg = resolve_config(file_cfg, overrides)
        with threadpool_limits(limits=args.threads):
            HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

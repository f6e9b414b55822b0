"""Command line: synth, train, eval, bias-check and sweep.

Every command resolves its parameters (flags over ``--config`` file over
defaults), writes them to ``resolved_config.json`` and produces all outputs
inside one run directory that appears atomically.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import estimators as est
from .evaluation import evaluate, write_histogram_csv, write_report
from .features import encode, load_dataset, load_schema
from .model import VARIANTS, load_checkpoint, save_checkpoint
from .synth import SynthConfig, SynthConfigError, write as write_synth
from .train import SWEEP_PARAMS, TrainConfig, TrainingDiverged, sweep, train

log = logging.getLogger("dcmt")

OUT_ROOT_ENV = "DCMT_OUT_ROOT"
EXIT_USAGE = 2
EXIT_FAILED_CHECK = 1
EXIT_DIVERGED = 3

SYNTH_DEFAULTS = {
    "users": 1000, "items": 500, "exposures": 50, "latent_dim": 8, "latent_std": 1.0,
    "latent_mean": 0.0, "ctr_bias": -1.5, "cvr_bias": -1.0, "correlation": 0.8,
    "noise_fields": 0, "noise_width": 4, "embedding_dim": 32, "seed": 0,
    "test_ratio": 0.2, "split_by": "user",
}
TRAIN_DEFAULTS = {
    "variant": "dcmt", "lr": 0.001, "lambda1": 0.001, "lambda2": 0.0001, "batch_size": 1024,
    "epochs": 5, "embedding_dim": None, "hidden_dims": "64-64-32", "shared_depth": None,
    "eps": est.DEFAULT_EPS, "snips": True, "shuffle": True, "seed": 0,
    "detach_propensity": False, "imputation_weighted": False, "l2_scope": "batch",
}
EVAL_DEFAULTS = {"space": None, "buckets": 10}
BIAS_DEFAULTS = {"estimator": "dr", "instance": "random", "seed": 0, "size": 10,
                 "trials": 100_000, "eps": est.DEFAULT_EPS, "tolerance": None}
SWEEP_DEFAULTS = dict(TRAIN_DEFAULTS, param="lambda1", values="1e-5,1e-4,1e-3,1e-2,1e-1,1",
                      space=None)

PATH_KEYS = ("data", "schema", "checkpoint", "eval_data")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def format_bias(x: float) -> str:
    """Short scientific notation without padding, ``0.0e0`` for zero."""
    if x == 0 or not math.isfinite(x):
        return "0.0e0" if x == 0 else str(x)
    exp = int(math.floor(math.log10(abs(x))))
    mant = x / 10 ** exp
    if round(abs(mant), 1) >= 10.0:
        exp += 1
        mant = x / 10 ** exp
    return f"{mant:.1f}e{exp}"


def _hidden(value) -> List[int]:
    if isinstance(value, (list, tuple)):
        dims = [int(v) for v in value]
    else:
        dims = [int(v) for v in str(value).replace(",", "-").split("-") if v.strip()]
    if not dims or min(dims) < 1:
        raise UsageError(f"invalid hidden dims {value!r}")
    return dims


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    raw = dict(raw.get("params", raw))
    raw.pop("command", None)
    return raw


def resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags given on the command line."""
    params = dict(defaults)
    from_file = _load_config_file(getattr(args, "config", None))
    unknown = set(from_file) - set(defaults) - set(PATH_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    params.update(from_file)
    for key, value in vars(args).items():
        if key in ("config", "out", "func", "command", "verbose"):
            continue
        params[key] = value
    return params


def _check_paths(params: dict) -> None:
    for key in PATH_KEYS:
        value = params.get(key)
        if value is not None and not Path(value).is_file():
            raise UsageError(f"{key.replace('_', '-')} file not found: {value}")


def _out_dir(command: str, args: argparse.Namespace, params: dict) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:10]
    return root / f"{command}-{digest}"


class RunDir:
    """Stage outputs in a sibling temporary directory and swap it in on success."""

    def __init__(self, target: Path):
        self.target = target
        self.tmp: Optional[Path] = None

    def __enter__(self) -> Path:
        parent = self.target.resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        old = None
        if self.target.exists():
            old = self.target.resolve().parent / f".{self.target.name}.old-{os.getpid()}"
            os.replace(self.target, old)
        os.replace(self.tmp, self.target)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
        return False


def _write_resolved(run: Path, command: str, params: dict) -> None:
    body = {"command": command, "params": params}
    (run / "resolved_config.json").write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")


def _train_config(params: dict) -> TrainConfig:
    try:
        return TrainConfig(
            variant=params["variant"], lr=float(params["lr"]), lambda1=float(params["lambda1"]),
            lambda2=float(params["lambda2"]), batch_size=int(params["batch_size"]),
            max_epochs=int(params["epochs"]),
            embedding_dim=None if params["embedding_dim"] is None else int(params["embedding_dim"]),
            hidden_dims=tuple(_hidden(params["hidden_dims"])),
            shared_depth=None if params["shared_depth"] is None else int(params["shared_depth"]),
            eps=float(params["eps"]), snips=bool(params["snips"]),
            seed=int(params["seed"]), shuffle=bool(params["shuffle"]),
            detach_propensity=bool(params["detach_propensity"]),
            imputation_weighted=bool(params["imputation_weighted"]),
            l2_scope=str(params["l2_scope"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc))


def _load(path: str, schema):
    samples, _ = load_dataset(path, schema)
    return encode(samples, schema)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    params = resolve(SYNTH_DEFAULTS, args)
    try:
        cfg = SynthConfig(
            num_users=int(params["users"]), num_items=int(params["items"]),
            exposures_per_user=int(params["exposures"]), latent_dim=int(params["latent_dim"]),
            latent_std=float(params["latent_std"]), latent_mean=float(params["latent_mean"]),
            ctr_bias=float(params["ctr_bias"]), cvr_bias=float(params["cvr_bias"]),
            rho=float(params["correlation"]), noise_dense_fields=int(params["noise_fields"]),
            noise_dense_width=int(params["noise_width"]),
            embedding_dim=int(params["embedding_dim"]), seed=int(params["seed"]),
        )
    except SynthConfigError as exc:
        raise UsageError(str(exc))
    out = _out_dir("synth", args, params)
    with RunDir(out) as run:
        write_synth(run, cfg, float(params["test_ratio"]), params["split_by"])
        _write_resolved(run, "synth", params)
    print(f"wrote {out}/schema.json, train.csv, test.csv")
    return 0


def cmd_train(args) -> int:
    params = resolve(dict(TRAIN_DEFAULTS, data=None, schema=None), args)
    if not params.get("data") or not params.get("schema"):
        raise UsageError("train needs --data and --schema")
    _check_paths(params)
    cfg = _train_config(params)
    schema = load_schema(params["schema"])
    data = _load(params["data"], schema)
    out = _out_dir("train", args, params)
    with RunDir(out) as run:
        res = train(data, schema, cfg)
        save_checkpoint(run / "checkpoint.bin", res.model)
        with open(run / "train_log.jsonl", "w") as fh:
            for rec in res.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        _write_resolved(run, "train", params)
    log.info("trained %s in %.1fs", cfg.variant, res.seconds)
    last = res.log[-1]["train_loss"]["total"] if res.log else float("nan")
    print(f"variant {cfg.variant} epochs {len(res.log)} final loss {last:.6f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    params = resolve(dict(EVAL_DEFAULTS, data=None, checkpoint=None), args)
    if not params.get("data") or not params.get("checkpoint"):
        raise UsageError("eval needs --checkpoint and --data")
    _check_paths(params)
    if params["space"] not in (None, "entire", "click"):
        raise UsageError("space must be entire or click")
    model = load_checkpoint(params["checkpoint"])
    data = _load(params["data"], model.schema)
    # without full labels only the click space can be scored
    space = params["space"] or ("entire" if data.r_full is not None else "click")
    report = evaluate(model, data, space, int(params["buckets"]))
    out = _out_dir("eval", args, params)
    with RunDir(out) as run:
        write_report(run / "report.json", report)
        write_histogram_csv(run / "histogram.csv", report.histogram)
        _write_resolved(run, "eval", params)
    print(f"cvr_auc {report.cvr_auc} ctcvr_auc {report.ctcvr_auc} -> {out}")
    return 0


def _bias_instance(params: dict):
    if params["instance"] == "esmm":
        return est.esmm_instance()
    if params["instance"] != "random":
        raise UsageError("instance must be random or esmm")
    return est.random_instance(np.random.default_rng(int(params["seed"])), n=int(params["size"]))


def cmd_bias_check(args) -> int:
    params = resolve(BIAS_DEFAULTS, args)
    inst = _bias_instance(params)
    name = params["estimator"]
    tol = params["tolerance"]
    kw = {} if tol is None else {"tolerance": float(tol)}
    if name == "ipw":
        check = est.check_ipw_unbiased(inst, trials=int(params["trials"]), seed=int(params["seed"]),
                                       **kw)
    elif name == "dr":
        check = est.check_dr_unbiased(inst, eps=float(params["eps"]), **kw)
    elif name == "dcmt":
        check = est.check_dcmt_unbiased(inst, eps=float(params["eps"]), **kw)
    elif name == "esmm":
        check = est.esmm_bias_demo(inst, **({} if tol is None else {"threshold": float(tol)}))
    else:
        raise UsageError("estimator must be one of ipw, dr, dcmt, esmm")
    out = _out_dir("bias-check", args, params)
    with RunDir(out) as run:
        (run / "bias_check.json").write_text(json.dumps(check.to_dict(), sort_keys=True, indent=2)
                                             + "\n")
        _write_resolved(run, "bias-check", params)
    print(f"bias {format_bias(check.bias)} {check.verdict}")
    return 0 if check.passed else EXIT_FAILED_CHECK


def _values(param: str, raw) -> list:
    items = raw if isinstance(raw, list) else [v for v in str(raw).split(",") if v.strip()]
    if not items:
        raise UsageError("sweep needs at least one value")
    if param == "lambda1":
        return [float(v) for v in items]
    if param == "embedding_dim":
        return [int(v) for v in items]
    if param == "hidden_dims":
        return [tuple(_hidden(v)) for v in items]
    return [str(v).strip().lower() in ("1", "true", "hard", "yes") for v in items]


def cmd_sweep(args) -> int:
    params = resolve(dict(SWEEP_DEFAULTS, data=None, schema=None, eval_data=None), args)
    if not params.get("data") or not params.get("schema"):
        raise UsageError("sweep needs --data and --schema")
    if params["param"] not in SWEEP_PARAMS:
        raise UsageError(f"param must be one of {', '.join(SWEEP_PARAMS)}")
    _check_paths(params)
    values = _values(params["param"], params["values"])
    base = _train_config(params)
    schema = load_schema(params["schema"])
    data = _load(params["data"], schema)
    eval_data = _load(params["eval_data"], schema) if params.get("eval_data") else data
    rows = sweep(data, eval_data, schema, base, params["param"], values, space=params["space"])
    out = _out_dir("sweep", args, params)
    cols = ["param", "value", "variant", "cvr_auc", "ctcvr_auc", "final_loss", "final_cvr_loss",
            "residual_mean"]
    with RunDir(out) as run:
        with open(run / "results.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
        _write_resolved(run, "sweep", params)
    for row in rows:
        print(f"{row['param']}={row['value']} cvr_auc={row['cvr_auc']} "
              f"residual={row['residual_mean']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _flag(p, name, **kw):
    p.add_argument(name, default=argparse.SUPPRESS, **kw)


def _train_flags(p):
    _flag(p, "--variant", choices=VARIANTS)
    _flag(p, "--data")
    _flag(p, "--schema")
    _flag(p, "--lr", type=float)
    _flag(p, "--lambda1", type=float)
    _flag(p, "--lambda2", type=float)
    _flag(p, "--batch-size", type=int)
    _flag(p, "--epochs", type=int)
    _flag(p, "--embedding-dim", type=int)
    _flag(p, "--hidden-dims", help="dash separated, e.g. 64-64-32")
    _flag(p, "--shared-depth", type=int)
    _flag(p, "--eps", type=float)
    _flag(p, "--snips", action=argparse.BooleanOptionalAction)
    _flag(p, "--shuffle", action=argparse.BooleanOptionalAction)
    _flag(p, "--detach-propensity", action=argparse.BooleanOptionalAction)
    _flag(p, "--imputation-weighted", action=argparse.BooleanOptionalAction)
    _flag(p, "--l2-scope", choices=("batch", "full"),
          help="penalise only embedding rows seen in the batch, or every parameter")
    _flag(p, "--seed", type=int)


def _correlation(value: str) -> float:
    x = float(value)
    if not -1.0 <= x <= 1.0:
        raise argparse.ArgumentTypeError(f"correlation must lie in [-1, 1], got {value}")
    return x


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcmt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func: Callable, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with parameter values")
        p.add_argument("--out", help=f"run directory (default under ${OUT_ROOT_ENV} or ./runs)")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic exposure log")
    _flag(p, "--users", type=int)
    _flag(p, "--items", type=int)
    _flag(p, "--exposures", type=int, help="exposures per user")
    _flag(p, "--latent-dim", type=int)
    _flag(p, "--latent-std", type=float)
    _flag(p, "--latent-mean", type=float)
    _flag(p, "--ctr-bias", type=float)
    _flag(p, "--cvr-bias", type=float)
    _flag(p, "--correlation", type=_correlation)
    _flag(p, "--noise-fields", type=int)
    _flag(p, "--noise-width", type=int)
    _flag(p, "--embedding-dim", type=int)
    _flag(p, "--seed", type=int)
    _flag(p, "--test-ratio", type=float)
    _flag(p, "--split-by", choices=("user", "pair"))

    p = command("train", cmd_train, "train one model variant")
    _train_flags(p)

    p = command("eval", cmd_eval, "evaluate a checkpoint")
    _flag(p, "--checkpoint")
    _flag(p, "--data")
    _flag(p, "--space", choices=("entire", "click"),
          help="default: entire when the data has r_full, else click")
    _flag(p, "--buckets", type=int)

    p = command("bias-check", cmd_bias_check, "verify an estimator identity")
    _flag(p, "--estimator", choices=("ipw", "dr", "dcmt", "esmm"))
    _flag(p, "--instance", choices=("random", "esmm"))
    _flag(p, "--seed", type=int)
    _flag(p, "--size", type=int)
    _flag(p, "--trials", type=int)
    _flag(p, "--eps", type=float)
    _flag(p, "--tolerance", type=float)

    p = command("sweep", cmd_sweep, "train and evaluate over a parameter grid")
    _train_flags(p)
    _flag(p, "--eval-data")
    _flag(p, "--param", choices=SWEEP_PARAMS)
    _flag(p, "--values", help="comma separated")
    _flag(p, "--space", choices=("entire", "click"),
          help="default: entire when the data has r_full, else click")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dcmt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"dcmt {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as exc:
        print(f"dcmt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: train, eval, inspect, gradcheck, gendata."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, check_compatible, load_checkpoint, save_checkpoint
from .config import ConfigError, build_datasets, build_model, load_config, parse_config, run_rngs
from .data import export_dataset, gen_market_surrogate, gen_modsum
from .metrics import nt_stats, write_nt_distribution_csv, write_series_csv
from .numeric import GradCheckError, ParamStore, Rng, Tensor, grad_check, sum_
from .seq2seq import SequenceModel
from .training import evaluate, fit

log = logging.getLogger("lfact_lab")

GRADCHECK_TOLERANCE = 1e-4
# Tiny gradcheck model. Parameters are redrawn from U(-2, 2): at Glorot scale
# the attention-query gradients sit near 1e-8, where central differences are
# dominated by round-off in the loss.
TINY = {"input_dim": 4, "hidden": 8, "classes": 4, "batch": 2, "steps": 3, "max_layers": 3}
TINY_PARAM_SCALE = 2.0
TINY_STEP = 1e-4


class CliError(Exception):
    pass


def _data_overrides(value: str | None) -> str | None:
    """``--data`` is a file of config overrides, or inline ``key=value`` pairs separated by ';'."""
    if value is None:
        return None
    p = Path(value)
    if p.is_file():
        return p.read_text(encoding="utf-8")
    if "=" not in value:
        raise CliError(f"--data {value!r}: no such file and not a key=value list")
    return "\n".join(value.split(";"))


def _load_run(checkpoint: str, data: str | None):
    ckpt = load_checkpoint(checkpoint)
    saved = parse_config(ckpt.config_text)
    cfg = parse_config(ckpt.config_text, _data_overrides(data))
    if cfg["model.hidden"] != saved["model.hidden"]:
        raise CheckpointError(
            f"dimension mismatch: checkpoint hidden size {saved['model.hidden']}, requested hidden size {cfg['model.hidden']}"
        )
    splits = dict(zip(("train", "val", "test"), build_datasets(cfg)))
    model = build_model(cfg, splits["train"])
    expected = model.init_params(Rng(0))
    check_compatible(expected, ckpt.params)
    return ckpt, cfg, model, splits


def _write_nt(out: Path, split: str, model: SequenceModel, rep) -> None:
    write_nt_distribution_csv(out / f"nt_distribution_{split}.csv", nt_stats(rep.n, model.max_layers), model.max_layers)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    train, val, test = build_datasets(cfg)
    model = build_model(cfg, train)
    init_rng, shuffle_rng = run_rngs(cfg)
    params = model.init_params(init_rng)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    nt_epoch = []

    def on_epoch(rep):
        with open(metrics_path, "a") as fh:
            fh.write(rep.to_json() + "\n")
        if rep.split == "val":
            nt_epoch.append((rep.epoch, rep.metrics["mean_nt"], rep.metrics["max_nt"]))

    res = fit(
        model,
        params,
        train,
        val,
        epochs=cfg["train.epochs"],
        batch_size=cfg["optim.batch"],
        tau=cfg["loss.tau"],
        mu=cfg["loss.mu"],
        rng=shuffle_rng,
        lr=cfg["optim.lr"],
        patience=cfg["train.patience"],
        on_epoch=on_epoch,
    )
    best = None if not res.log else res.best_metric
    save_checkpoint(out / "best.ckpt", Checkpoint(cfg.text, res.params, res.opt, best))
    for ds in (val, test):
        rep = evaluate(model, res.params, ds, cfg["loss.tau"], cfg["loss.mu"])
        rep.epoch = res.best_epoch
        on_epoch_best = rep.to_json()
        with open(metrics_path, "a") as fh:
            fh.write(on_epoch_best + "\n")
        _write_nt(out, ds.split, model, rep)
        for name, series in rep.per_step.items():
            write_series_csv(out / f"per_step_{name}_{ds.split}.csv", series, value_name=name)
    with open(out / "nt_per_epoch.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_nt", "max_nt"])
        w.writerows((e, repr(float(m)), int(x)) for e, m, x in nt_epoch)
    print(f"best epoch {res.best_epoch}, validation metric {best}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    ckpt, cfg, model, splits = _load_run(args.checkpoint, args.data)
    rep = evaluate(model, ckpt.params, splits[args.split], cfg["loss.tau"], cfg["loss.mu"])
    print(rep.to_json())
    return 0


def cmd_inspect(args) -> int:
    ckpt, cfg, model, splits = _load_run(args.checkpoint, args.data)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    fractions = {}
    for split, ds in splits.items():
        rep = evaluate(model, ckpt.params, ds, cfg["loss.tau"], cfg["loss.mu"])
        _write_nt(out, split, model, rep)
        fractions[split] = rep.metrics["multi_round_fraction"]
    print(json.dumps({"multi_round_fraction": fractions}, sort_keys=True))
    return 0


def tiny_gradcheck(kind: str, strategy: str = "all", combiner: str = "affine", seed: int = 3, corrupt: bool = False) -> float:
    """Max relative error of backward() against central differences on a tiny model."""
    d = TINY
    model = SequenceModel(kind, d["input_dim"], d["hidden"], 1, d["classes"], max_layers=d["max_layers"], strategy=strategy, combiner=combiner)
    rng = Rng(seed)
    base = model.init_params(rng)
    params = ParamStore({k: Tensor(rng.uniform(-TINY_PARAM_SCALE, TINY_PARAM_SCALE, size=t.shape)) for k, t in base.items()})
    x = rng.normal(size=(d["batch"], d["steps"], d["input_dim"]))
    y = rng.integers_array(d["classes"], (d["batch"], d["steps"], 1))

    def objective(p):
        loss, out = model.sample_losses(p, x, y, 0.01, 0.1)
        return sum_(loss), out.n.tobytes()

    hook = None
    if corrupt:

        def hook(grads):
            name = next(iter(grads))
            grads = dict(grads)
            grads[name] = grads[name].copy()
            grads[name].flat[0] += 1e-2 * max(1.0, abs(grads[name].flat[0]))
            return grads

    return grad_check(objective, params, TINY_STEP, analytic_hook=hook)


def cmd_gradcheck(args) -> int:
    if args.dims != "small":
        raise CliError("only --dims small is supported")
    strategies = [args.strategy] if args.strategy else (["ltd", "all"] if args.model == "lfact" else ["all"])
    combiners = [args.combiner] if args.combiner else (["affine", "mlp"] if args.model == "lfact" else ["affine"])
    worst = 0.0
    for s in strategies:
        for c in combiners:
            err = tiny_gradcheck(args.model, s, c, args.seed, args.corrupt)
            label = f"{args.model} strategy={s} combiner={c}" if args.model == "lfact" else args.model
            print(f"{label}: max relative error {err:.3e}")
            worst = max(worst, err)
    print(f"max relative error {worst:.3e}")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


def cmd_gendata(args) -> int:
    rng = Rng(args.seed)
    if args.task == "modsum":
        ds = gen_modsum(rng, args.n, args.seq_len)
    else:
        ds = gen_market_surrogate(rng, args.n, args.seq_len, decoder_len=args.decoder_len)
    export_dataset(ds, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lfact-lab", description="Adaptive-depth recurrent models: training and inspection.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, print a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="config overrides: a file, or 'key=value;key=value'")
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="per-step computation-time distributions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--emit", choices=("nt",), default="nt")
    p.add_argument("--out", help="directory for the CSVs (default: next to the checkpoint)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--model", choices=("rnn", "act", "lfact"), required=True)
    p.add_argument("--dims", default="small")
    p.add_argument("--strategy", choices=("ltd", "all"))
    p.add_argument("--combiner", choices=("affine", "mlp"))
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gendata", help="export a synthetic dataset")
    p.add_argument("--task", choices=("modsum", "market"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seq-len", type=int, default=20)
    p.add_argument("--decoder-len", type=int, default=0)
    p.set_defaults(func=cmd_gendata)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, CliError, GradCheckError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

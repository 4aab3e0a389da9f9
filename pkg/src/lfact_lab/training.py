"""Adam, batched training with per-sample halting, evaluation and model selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .metrics import MetricReport, bpc, macro_f1, nt_stats
from .numeric import ParamStore, Rng, Tape, backward, sum_
from .seq2seq import SequenceModel

log = logging.getLogger(__name__)

DEFAULT_LR = 0.0005
CLIP_NORM = 1.0


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam step. ``state`` is updated in place and returned."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s) {missing}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new = {}
    for k, t in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros(t.shape)
            state.v[k] = np.zeros(t.shape)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        new[k] = t.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_arrays(new), state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def batch_loss_and_grads(model: SequenceModel, params: ParamStore, ds: Dataset, idx, tau: float, mu: float):
    """Mean per-sample loss of a batch and its parameter gradients."""
    b = ds.batch(idx)
    with Tape() as tape:
        per_sample, out = model.sample_losses(params, b.x, b.targets, tau, mu, b.last_gt)
        loss = sum_(per_sample) * (1.0 / len(idx))
    gmap = backward(tape, loss)
    grads = {k: gmap[t].data if t in gmap else np.zeros(t.shape) for k, t in params.items()}
    return loss.item(), per_sample.data[:, 0].copy(), grads, out


@dataclass
class EpochResult:
    params: ParamStore
    mean_loss: float
    sample_losses: np.ndarray  # in dataset order, computed before each batch's update
    batches: int
    mean_nt: float
    max_nt: int


def train_epoch(
    model: SequenceModel,
    params: ParamStore,
    opt: AdamState,
    ds: Dataset,
    batch_size: int,
    tau: float,
    mu: float,
    rng: Rng,
    clip_norm: float = CLIP_NORM,
    on_batch: Callable[[int, float], None] | None = None,
) -> EpochResult:
    """One pass over shuffled batches, one Adam update per batch."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(ds))
    losses = np.zeros(len(ds))
    nts = []
    batches = 0
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        loss, per, grads, out = batch_loss_and_grads(model, params, ds, idx, tau, mu)
        losses[idx] = per
        nts.append(out.n)
        grads, _ = clip_by_global_norm(grads, clip_norm)
        params, opt = adam_update(params, grads, opt)
        batches += 1
        if on_batch is not None:
            on_batch(batches, loss)
    n = np.concatenate(nts, axis=0)
    return EpochResult(params, float(losses.mean()), losses, batches, float(n.mean()), int(n.max()))


def sample_losses(model: SequenceModel, params: ParamStore, ds: Dataset, batch_size: int, tau: float, mu: float) -> np.ndarray:
    """Per-sample losses at fixed parameters, evaluated in batches of ``batch_size``."""
    out = np.zeros(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        b = ds.batch(idx)
        per, _ = model.sample_losses(params, b.x, b.targets, tau, mu, b.last_gt)
        out[idx] = per.data[:, 0]
    return out


def metric_name(ds: Dataset) -> str:
    return "bpc" if ds.task == "bytes" else "macro_f1"


def lower_is_better(name: str) -> bool:
    return name in ("bpc", "loss")


def evaluate(
    model: SequenceModel,
    params: ParamStore,
    ds: Dataset,
    tau: float = 0.0,
    mu: float = 0.0,
    batch_size: int = 64,
    epoch: int | None = None,
) -> MetricReport:
    """Full pass without a tape: task metric, loss, ponder and N_t statistics."""
    loss_parts, ponder_parts, n_parts, pc_parts, pred_parts = [], [], [], [], []
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        b = ds.batch(idx)
        per, out = model.sample_losses(params, b.x, b.targets, tau, mu, b.last_gt)
        loss_parts.append(per.data[:, 0])
        n_parts.append(out.n)
        probs = np.stack([y.probs.data for y in out.predictions], axis=1)  # (B, T, heads, K)
        pc_parts.append(np.take_along_axis(probs, b.targets[..., None], axis=-1)[..., 0])
        pred_parts.append(probs.argmax(axis=-1))
        if model.kind != "rnn":
            ponder_parts.append(sum(s.ponder.data[:, 0] for s in out.steps))
    n = np.concatenate(n_parts)
    pc = np.concatenate(pc_parts)  # (N, T_pred, heads)
    preds = np.concatenate(pred_parts)
    truths = ds.targets
    stats = nt_stats(n, model.max_layers)
    name = metric_name(ds)
    metrics = {
        "loss": float(np.concatenate(loss_parts).mean()),
        "mean_nt": float(n.mean()),
        "max_nt": stats.max_nt,
        "multi_round_fraction": stats.multi_round_fraction,
    }
    if ponder_parts:
        metrics["ponder"] = float(np.concatenate(ponder_parts).mean())
    per_step = {"mean_nt": stats.mean_per_step.tolist(), "max_nt": stats.max_per_step.tolist()}
    if name == "bpc":
        metrics["bpc"] = bpc(pc)
        per_step["bpc"] = [bpc(pc[:, t]) for t in range(pc.shape[1])]
    else:
        metrics["macro_f1"] = macro_f1(preds, truths, ds.n_classes)
        per_step["f1"] = [macro_f1(preds[:, t], truths[:, t], ds.n_classes) for t in range(preds.shape[1])]
    rep = MetricReport(model.kind, ds.split, metrics, per_step, stats.histogram.tolist(), epoch)
    rep.n = n
    return rep


@dataclass
class FitResult:
    params: ParamStore
    opt: AdamState
    best_metric: float
    best_epoch: int
    log: list[MetricReport]


def fit(
    model: SequenceModel,
    params: ParamStore,
    train: Dataset,
    val: Dataset,
    *,
    epochs: int,
    batch_size: int,
    tau: float,
    mu: float,
    rng: Rng,
    lr: float = DEFAULT_LR,
    patience: int = 0,
    opt: AdamState | None = None,
    on_epoch: Callable[[MetricReport], None] | None = None,
) -> FitResult:
    """Train for up to ``epochs``; keep the weights with the best validation metric.

    ``patience`` > 0 stops after that many epochs without improvement.
    """
    opt = AdamState(lr=lr) if opt is None else opt
    name = metric_name(val)
    lower = lower_is_better(name)
    best = math.inf if lower else -math.inf
    best_params, best_opt, best_epoch = params, opt, 0
    history: list[MetricReport] = []
    stale = 0
    for epoch in range(1, epochs + 1):
        ep = train_epoch(model, params, opt, train, batch_size, tau, mu, rng)
        params = ep.params
        tr = MetricReport(
            model.kind,
            "train",
            {"loss": ep.mean_loss, "mean_nt": ep.mean_nt, "max_nt": ep.max_nt, "batches": ep.batches},
            epoch=epoch,
        )
        history.append(tr)
        rep = evaluate(model, params, val, tau, mu, epoch=epoch)
        history.append(rep)
        for r in (tr, rep):
            if on_epoch is not None:
                on_epoch(r)
        score = rep.metrics[name]
        log.info("epoch %d train_loss=%.5f val_%s=%.5f mean_nt=%.3f", epoch, ep.mean_loss, name, score, rep.metrics["mean_nt"])
        improved = score < best if lower else score > best
        if improved:
            best, best_epoch, stale = score, epoch, 0
            best_params = params
            best_opt = _copy_opt(opt)
        else:
            stale += 1
            if patience and stale >= patience:
                break
    return FitResult(best_params, best_opt, best, best_epoch, history)


def _copy_opt(opt: AdamState) -> AdamState:
    return AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step, {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()})

"""Acceptance suite: one test per criterion, summarised at the end of the run."""

import glob
import os
import sysconfig
import time
from pathlib import Path

import numpy as np
import pytest

from lfact_lab.act import ActParams, act_loss, act_step, halt_schedule
from lfact_lab.cells import augment_flag, gru_step, head_forward, task_loss
from lfact_lab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from lfact_lab.cli import GRADCHECK_TOLERANCE, main, tiny_gradcheck
from lfact_lab.data import gen_market_surrogate, gen_modsum, load_byte_corpus
from lfact_lab.lfact import LfactParams, combine_g, lfact_loss, run_sequence, transmission_state
from lfact_lab.metrics import bpc, macro_f1, nt_stats, relative_improvement
from lfact_lab.numeric import ParamStore, Rng, Tensor, const
from lfact_lab.seq2seq import SequenceModel
from lfact_lab.training import (
    AdamState,
    adam_update,
    batch_loss_and_grads,
    clip_by_global_norm,
    evaluate,
    fit,
    sample_losses,
    train_epoch,
)

MIN_CORPUS = 512 * 1024


def _redraw(params, rng, scale):
    return ParamStore({k: Tensor(rng.uniform(-scale, scale, size=t.shape)) for k, t in params.items()})


def test_criterion_01_halting_invariants():
    rng = Rng(2024)
    t0 = time.perf_counter()
    for case in range(10_000):
        eps = (0.01, 0.05)[case % 2]
        L = 1 + rng.integers(5)
        hs = rng.uniform(1e-9, 1 - 1e-9, size=5).tolist()
        rec = halt_schedule(hs, eps, L)
        assert rec.violations(eps, L) == []
        # independent recount
        acc, n = 0.0, L
        for i, h in enumerate(hs[:L]):
            acc += h
            if acc >= 1 - eps:
                n = i + 1
                break
        assert rec.n_t == n
        assert sum(rec.p) == pytest.approx(1.0, abs=1e-12)
    elapsed = time.perf_counter() - t0
    print(f"10000 schedules in {elapsed:.2f}s")
    assert elapsed < 10.0


def test_criterion_02_gradient_checks():
    t0 = time.perf_counter()
    errors = {"rnn": tiny_gradcheck("rnn"), "act": tiny_gradcheck("act")}
    for strategy in ("ltd", "all"):
        for combiner in ("affine", "mlp"):
            errors[f"lfact/{strategy}/{combiner}"] = tiny_gradcheck("lfact", strategy, combiner)
    elapsed = time.perf_counter() - t0
    print({k: f"{v:.2e}" for k, v in errors.items()}, f"{elapsed:.0f}s")
    assert max(errors.values()) < GRADCHECK_TOLERANCE
    assert elapsed < 120.0


def test_criterion_03_reduction_equivalences():
    # (a) ACT with one round is the flag-augmented GRU plus head
    for seed in range(20):
        rng = Rng(seed)
        store = ParamStore()
        ActParams.init(store, "", rng, 3, 5, 1, 4)
        cell = ActParams.from_store(_redraw(store, rng, 1.5), "", 1)
        x = const(rng.normal(size=(4, 3)))
        u0 = const(rng.uniform(-1, 1, size=(4, 5)))
        step = act_step(x, u0, cell, 0.01, 1)
        u = gru_step(augment_flag(x, True), u0, cell.cell)
        assert step.u.data.tobytes() == u.data.tobytes()
        assert step.y.probs.data.tobytes() == head_forward(u, cell.head).probs.data.tobytes()
    # (b) LFACT with one layer and ALL is a combine-then-GRU chain
    for seed in range(20):
        rng = Rng(100 + seed)
        store = ParamStore()
        LfactParams.init(store, "", rng, 3, 4, 1, 3, 3, "affine")
        params = LfactParams.from_store(_redraw(store, rng, 2.0), "", 1)
        xs = [const(rng.normal(size=(3, 3))) for _ in range(6)]
        traces, ys = run_sequence(xs, params, 0.01, 1, "all")
        h = const(np.zeros((3, 4)))
        for x, tr, y in zip(xs, traces, ys):
            h = gru_step(x, combine_g(h, h, params.combiner), params.cell)
            assert tr.deepest.data.tobytes() == h.data.tobytes()
            assert y.logits.data.tobytes() == head_forward(h, params.head).logits.data.tobytes()
    # (c) the intermediate-output loss with mu = 0 is the ACT loss
    rng = Rng(7)
    for _ in range(200):
        L = 1 + rng.integers(5)
        recs = [halt_schedule(rng.uniform(0.01, 0.99, size=L).tolist(), 0.01, L) for _ in range(1 + rng.integers(6))]
        inter = [rng.uniform(0, 3, size=r.n_t).tolist() for r in recs]
        task, tau = float(rng.uniform(0, 5)), float(rng.uniform(0, 0.1))
        assert lfact_loss(task, inter, recs, tau, 0.0) == act_loss(task, recs, tau)
    ds = gen_modsum(Rng(8), 6, 10)
    model = SequenceModel("lfact", 11, 6, 1, 10, max_layers=3)
    params = _redraw(model.init_params(Rng(9)), Rng(10), 1.5)
    b = ds.batch(np.arange(6))
    with_mu0, out = model.sample_losses(params, b.x, b.targets, 0.01, 0.0)
    ponder = sum(s.ponder.data[:, 0] for s in out.steps)
    task = sum(task_loss(s.y, b.targets[:, j, :]).data[:, 0] for j, s in enumerate(out.pred_steps))
    assert with_mu0.data[:, 0].tobytes() == ((task + 0.01 * ponder) * (1.0 / 10)).tobytes()


def test_criterion_04_ltd_all_agreement():
    rng = Rng(44)
    checked = 0
    for case in range(1000):
        L = 2 + case % 4
        store = ParamStore()
        LfactParams.init(store, "", rng, 3, 5, 1, 3, L, "affine")
        params = LfactParams.from_store(_redraw(store, rng, 2.0), "", 1)
        n_prev = 1 + rng.integers(L)
        layer = n_prev + rng.integers(L - n_prev + 1)
        B = 1 + rng.integers(4)
        prims = [const(rng.normal(size=(B, 5))) for _ in range(n_prev)]
        q = const(rng.normal(size=(B, 5)))
        a, _ = transmission_state(prims, q, layer, "ltd", params)
        b, _ = transmission_state(prims, q, layer, "all", params)
        assert a.data.tobytes() == b.data.tobytes()
        checked += 1
    assert checked == 1000


@pytest.mark.parametrize("kind", ["rnn", "act", "lfact"])
def test_criterion_05_batch_mask_equivalence(kind):
    ds = gen_market_surrogate(Rng(50), 8, 6, channels=4)
    model = SequenceModel(kind, 4, 8, 4, 5, max_layers=3)
    rng = Rng(51)
    params = _redraw(model.init_params(rng), rng, 1.5)
    ref = sample_losses(model, params, ds, 1, 0.01, 0.05)
    for b in (4, 8):
        np.testing.assert_allclose(sample_losses(model, params, ds, b, 0.01, 0.05), ref, rtol=1e-10, atol=0)
    if kind != "rnn":
        n = evaluate(model, params, ds, batch_size=8).n
        assert len(np.unique(n)) > 1, "halting pattern should differ across samples"


def test_criterion_06_checkpoint_round_trip(tmp_path):
    ds = gen_modsum(Rng(60), 16, 10)
    model = SequenceModel("lfact", 11, 8, 1, 10, max_layers=3)
    params = model.init_params(Rng(61))
    opt = AdamState(lr=0.01)
    ep = train_epoch(model, params, opt, ds, 4, 0.01, 0.05, Rng(62))
    save_checkpoint(tmp_path / "a.ckpt", Checkpoint("model.kind = lfact\n", ep.params, opt, 1.5))
    back = load_checkpoint(tmp_path / "a.ckpt")
    for k in ep.params:
        assert back.params[k].data.tobytes() == ep.params[k].data.tobytes()
        assert back.opt.m[k].tobytes() == opt.m[k].tobytes() and back.opt.v[k].tobytes() == opt.v[k].tobytes()
    assert back.opt.step == opt.step

    def next_loss(p, o):
        loss, _, grads, _ = batch_loss_and_grads(model, p, ds, np.arange(4), 0.01, 0.05)
        grads, _ = clip_by_global_norm(grads, 1.0)
        p2, _ = adam_update(p, grads, o)
        return batch_loss_and_grads(model, p2, ds, np.arange(4, 8), 0.01, 0.05)[0]

    straight = next_loss(ep.params, opt)
    resumed = next_loss(back.params, back.opt)
    assert abs(straight - resumed) <= 1e-12 * max(1.0, abs(straight))


@pytest.mark.slow
def test_criterion_07_adaptive_depth_probe():
    # modsum LFACT H=32, L=3, tau=0.01, mu=0.05, a fixed epoch budget per seed
    t0 = time.perf_counter()
    wins = []
    for seed in range(3):
        root = Rng(seed)
        train = gen_modsum(root.spawn(), 1000, 20)
        val = gen_modsum(root.spawn(), 200, 20, split="val")
        model = SequenceModel("lfact", 11, 32, 1, 10, max_layers=3, strategy="all", combiner="affine")
        params = model.init_params(root.spawn())
        res = fit(model, params, train, val, epochs=60, batch_size=32, tau=0.01, mu=0.05, rng=root.spawn(), lr=0.0005)
        n = evaluate(model, res.params, val).n
        d = val.meta["difficulty"]
        hard, easy = n[d == 5].mean(), n[d == 1].mean()
        print(f"seed {seed}: mean N_t d=5 {hard:.3f}, d=1 {easy:.3f}")
        wins.append(hard > easy)
    elapsed = time.perf_counter() - t0
    print(f"{elapsed:.0f}s")
    assert elapsed <= 600.0
    assert sum(wins) >= 2, f"d=5 above d=1 in {sum(wins)} of 3 seeds"


def _corpus(tmp_path) -> Path:
    override = os.environ.get("LFACT_CORPUS")
    if override:
        path = Path(override)
    else:
        files = sorted(glob.glob(str(Path(sysconfig.get_paths()["stdlib"]) / "*.py")))
        data = b"".join(Path(f).read_bytes() for f in files)
        path = tmp_path / "corpus.bin"
        path.write_bytes(data[:600_000])
    if path.stat().st_size < MIN_CORPUS:
        pytest.skip(f"byte corpus {path} is smaller than 512 KB; set LFACT_CORPUS")
    return path


# baseline tuned over the grid; LFACT uses its best rate from {0.0005, 0.002, 0.005} on this corpus
RNN_LR_GRID = (0.0005, 0.001, 0.002, 0.005, 0.01)
LFACT_LR = 0.005


@pytest.mark.slow
def test_criterion_08_desk_scale_bytes(tmp_path):
    path = _corpus(tmp_path)
    t0 = time.perf_counter()

    def run(kind, lr, mu):
        root = Rng(0)
        train, val, _ = load_byte_corpus(path, 50, (10_000, 1000, 1), root.spawn())
        opts = {} if kind == "rnn" else dict(max_layers=3, strategy="all", combiner="affine")
        model = SequenceModel(kind, 256, 64, 1, 256, **opts)
        params = model.init_params(root.spawn())
        tau = 0.06 if kind != "rnn" else 0.0
        res = fit(model, params, train, val, epochs=5, batch_size=32, tau=tau, mu=mu, rng=root.spawn(), lr=lr)
        untrained = ParamStore({k: Tensor(t.data * 1e-3) for k, t in params.items()})
        return res.best_metric, evaluate(model, untrained, val).metrics["bpc"]

    rnn = {lr: run("rnn", lr, 0.0) for lr in RNN_LR_GRID}
    lfact = {mu: run("lfact", LFACT_LR, mu) for mu in (0.0, 0.05)}
    baseline = min(v[0] for v in rnn.values())
    elapsed = time.perf_counter() - t0
    print("rnn", {lr: round(v[0], 4) for lr, v in rnn.items()})
    print("lfact", {mu: round(v[0], 4) for mu, v in lfact.items()}, f"{elapsed:.0f}s")
    for _, zero in list(rnn.values()) + list(lfact.values()):
        assert abs(zero - 8.0) <= 0.1
    assert elapsed <= 1800.0
    for mu, (val_bpc, _) in lfact.items():
        assert val_bpc <= baseline, f"LFACT (mu={mu}) {val_bpc:.4f} vs tuned RNN {baseline:.4f}"


def test_criterion_09_metric_oracles():
    assert abs(bpc(np.full(1000, 1 / 256)) - 8.0) <= 1e-12
    assert abs(bpc(np.ones(50)) - 0.0) <= 1e-12
    assert abs(bpc(np.full(50, 0.5)) - 1.0) <= 1e-12
    assert abs(macro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) - 1.0) <= 1e-12
    assert abs(macro_f1([1, 1, 0, 0], [1, 0, 0, 0], 2) - (0.8 + 2 / 3) / 2) <= 1e-12
    assert abs(macro_f1([1, 0, 1, 0], [0, 1, 0, 1], 2) - 0.0) <= 1e-12
    s = nt_stats(np.ones((3, 4), dtype=int), 3)
    assert s.mean_per_step.tolist() == [1.0] * 4 and s.multi_round_fraction == 0.0
    assert nt_stats(np.array([[1], [3]]), 3).mean_per_step.tolist() == [2.0]
    assert relative_improvement(0.475, 0.475) == 0.0
    assert abs(relative_improvement(0.542, 0.475) - 0.141) <= 1e-3


def test_criterion_10_train_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "model.kind = lfact\nmodel.hidden = 12\ndata.task = modsum\ndata.seq_len = 10\n"
        "data.n_train = 32\ndata.n_val = 16\ndata.n_test = 16\ntrain.epochs = 2\noptim.batch = 8\nseed = 5\n"
    )
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a and a == (tmp_path / "b" / "metrics.jsonl").read_bytes()

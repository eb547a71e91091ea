"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and immediately, when run with ``-s``). Seeds 7-11 are the five seeds of
every "median over 5 seeds" comparison.
"""

import json
import math
import time

import numpy as np
import pytest

import wellcast.models as models_mod
from conftest import record
from wellcast import cli
from wellcast.dataio import FeatureSet, generate_synthetic, prepare_global, prepare_well, stack
from wellcast.dataio import clean as clean_series
from wellcast.metrics import evaluate
from wellcast.models import ModelConfig, build_model
from wellcast.tensor import Tensor, grad_check, relu
from wellcast.training import AdamState, TrainConfig, fine_tune, train, warmup_epoch

SEEDS = (7, 8, 9, 10, 11)
FS = FeatureSet("full", "bhp")


def report(criterion, passed, detail):
    record(criterion, passed, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    return passed


def test_rmse(model, samples, scaler):
    X, y = stack(samples)
    return evaluate(scaler.inverse("bhp", model.predict(X)), scaler.inverse("bhp", y)).rmse


test_rmse.__test__ = False


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------

GC_SHAPES = dict(B=2, N=5, M=3)


def gc_problem(arch, seed, variant="standard"):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(arch, input_size=GC_SHAPES["M"], window=GC_SHAPES["N"], hidden_size=5,
                      lstm_variant=variant, d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=1,
                      d_ff=16, seed=seed)
    model = build_model(cfg)
    X = rng.normal(0.0, 2.0, size=(GC_SHAPES["B"], GC_SHAPES["N"], GC_SHAPES["M"]))
    y = rng.normal(size=GC_SHAPES["B"])

    def loss():
        d = model.forward(X) - Tensor(y)
        return (d * d).mean()

    return model, loss


def relu_margin(loss, monkeypatch):
    """Smallest |input| seen by any ReLU; finite differences need it clear of the kink."""
    seen = []

    def spy(x):
        seen.append(np.min(np.abs(x.data)))
        return relu(x)

    monkeypatch.setattr(models_mod, "relu", spy)
    loss()
    monkeypatch.setattr(models_mod, "relu", relu)
    return min(seen) if seen else math.inf


def test_criterion_1_gradient_fidelity(monkeypatch):
    cases = [("rnn", "standard"), ("lstm", "ungated"), ("lstm", "standard"), ("gru", "standard"),
             ("transformer", "standard")]
    start = time.perf_counter()
    worst, failures = {}, []
    for arch, variant in cases:
        label = arch if arch != "lstm" else f"lstm-{variant}"
        for seed in SEEDS:
            model, loss = gc_problem(arch, seed, variant)
            if arch == "transformer":
                margin = relu_margin(loss, monkeypatch)
                assert margin > 1e-4, f"seed {seed}: ReLU input {margin:.1e} too close to the kink"
            err = grad_check(loss, model.parameters(), 1e-5)
            worst[label] = max(worst.get(label, 0.0), err)
            if not err < 1e-4:
                failures.append(f"{label}/seed{seed}={err:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60.0
    detail = ", ".join(f"{k} max {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    report("1-gradient-fidelity", ok, detail + (f"; failing {failures}" if failures else ""))
    assert not failures
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. metric oracle
# ---------------------------------------------------------------------------

def naive_metrics(preds, actuals):
    n = len(actuals)
    mean = 0.0
    for a in actuals:
        mean += a
    mean /= n
    sq = ab = base_sq = base_ab = pct = 0.0
    for p, a in zip(preds, actuals):
        sq += (p - a) ** 2
        ab += abs(p - a)
        base_sq += (mean - a) ** 2
        base_ab += abs(mean - a)
        pct += abs((p - a) / a)
    return math.sqrt(sq / n), sq / base_sq, ab / base_ab, 100.0 * pct / n


def test_criterion_2_metric_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 100))
        actual = rng.uniform(10.0, 400.0, n)
        pred = actual + rng.normal(0.0, 20.0, n)
        got = evaluate(pred, actual)
        for g, w in zip((got.rmse, got.rse, got.rae, got.mape), naive_metrics(pred.tolist(), actual.tolist())):
            worst = max(worst, abs(g - w) / max(1.0, abs(w)))
    hand = evaluate([110.0, 180.0], [100.0, 200.0])
    hand_ok = (f"{hand.rmse:.6g}", f"{hand.rse:.6g}", f"{hand.rae:.6g}", f"{hand.mape:.6g}") == \
        ("15.8114", "0.1", "0.3", "10")
    ok = worst <= 1e-12 and hand_ok
    report("2-metric-oracle", ok, f"max deviation {worst:.1e} over 1000 vectors; hand example "
           f"RMSE {hand.rmse:.6g} RSE {hand.rse:.6g} RAE {hand.rae:.6g} MAPE {hand.mape:.6g}%")
    assert worst <= 1e-12
    assert hand_ok


# ---------------------------------------------------------------------------
# 3. pipeline
# ---------------------------------------------------------------------------

def test_criterion_3_pipeline():
    T, N = 500, 14
    series = generate_synthetic(7, T)[0]
    scaler, splits = prepare_well(series, FS, N)
    samples = splits.train + splits.validation + splits.test
    count_ok = len(samples) == T
    padded = [s.pad_len for s in samples[:N]]
    pad_ok = padded == [13 - t for t in range(13)] + [0] and all(
        np.all(s.window[:s.pad_len] == 0.0) for s in samples)
    sizes = (len(splits.train), len(splits.validation), len(splits.test))
    sizes_ok = sizes == (350, 75, 75)
    leak_ok = FS.target not in FS.features and all(s.window.shape[1] == len(FS.features) for s in samples)
    # the target must not be recoverable as any window column
    y = np.array([s.target for s in samples])
    cur = np.stack([s.window[-1] for s in samples])
    leak_ok &= not any(np.array_equal(cur[:, j], y) for j in range(cur.shape[1]))
    clean = clean_series(series, FS)
    roundtrip = max(
        float(np.max(np.abs(scaler.inverse(f, scaler.scale(f, clean.columns[f])) - clean.columns[f])))
        for f in FS.columns
    )
    rt_ok = roundtrip < 1e-10
    ok = count_ok and pad_ok and sizes_ok and leak_ok and rt_ok
    report("3-pipeline", ok, f"{len(samples)} samples, first 13 padded={pad_ok}, splits {sizes}, "
           f"no leakage={leak_ok}, scaler round-trip {roundtrip:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. capacity: overfit a 60-day well
# ---------------------------------------------------------------------------

OVERFIT_TRAIN = dict(epochs=500, learning_rate=1e-2, seed=7)
OVERFIT_MODEL = dict(hidden_size=64, seed=7)


@pytest.mark.parametrize("arch", ["rnn", "lstm", "gru", "transformer"])
def test_criterion_4_overfit(arch):
    _, splits = prepare_well(generate_synthetic(7, 60)[0], FS, 14)
    model = build_model(ModelConfig(arch, input_size=5, **OVERFIT_MODEL))
    start = time.perf_counter()
    ck = train(model, splits, TrainConfig(**OVERFIT_TRAIN))
    elapsed = time.perf_counter() - start
    best = min(h["train_mse"] for h in ck.history)
    first = next((h["epoch"] for h in ck.history if h["train_mse"] < 1e-3), None)
    ok = best < 1e-3 and elapsed < 300.0
    report(f"4-overfit-{arch}", ok, f"min train MSE {best:.2e} (first <1e-3 at epoch {first}), {elapsed:.0f}s")
    assert best < 1e-3
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 5. delayed response: transformer against RNN
# ---------------------------------------------------------------------------

def test_criterion_5_lagged_well():
    scaler, splits = prepare_well(generate_synthetic(7, 500, lag=10)[0], FS, 14)
    pairs = []
    for seed in SEEDS:
        cfg = TrainConfig(epochs=60, seed=seed)
        tr = train(build_model(ModelConfig("transformer", input_size=5, seed=seed)), splits, cfg).build_model()
        rn = train(build_model(ModelConfig("rnn", input_size=5, seed=seed)), splits, cfg).build_model()
        pairs.append((test_rmse(tr, splits.test, scaler), test_rmse(rn, splits.test, scaler)))
    med_t, med_r = np.median(pairs, axis=0)
    ok = med_t < med_r
    report("5-lagged-well", ok, f"median test RMSE transformer {med_t:.3f} vs rnn {med_r:.3f} (bar)"
           f"(per seed {[(round(a, 2), round(b, 2)) for a, b in pairs]})")
    assert ok


# ---------------------------------------------------------------------------
# 6. transfer learning
# ---------------------------------------------------------------------------

def test_criterion_6_transfer():
    source = generate_synthetic(7, 500, lag=10)[0]
    target = generate_synthetic(7, 100, lag=10, noise_seed=1007)[0]
    _, src_splits = prepare_well(source, FS, 14)
    tgt_scaler, tgt_splits = prepare_well(target, FS, 14)
    span = tgt_scaler.maxs["bhp"] - tgt_scaler.mins["bhp"]
    pairs, frozen = [], True
    for seed in SEEDS:
        pre = train(build_model(ModelConfig("transformer", input_size=5, seed=seed)), src_splits,
                    TrainConfig(epochs=60, seed=seed))
        pre.features = FS
        budget = TrainConfig(epochs=30, seed=seed)
        ft = fine_tune(pre, tgt_splits, budget, features=FS)
        sc = train(build_model(ModelConfig("transformer", input_size=5, seed=seed)), tgt_splits, budget)
        pairs.append((math.sqrt(ft.val_mse) * span, math.sqrt(sc.val_mse) * span))

        probe = pre.build_model()
        probe.replace_head(probe.config.d_model, seed=seed)
        before = probe.state_dict()
        state = AdamState()
        warmup_epoch(probe, tgt_splits.train, budget, state)
        frozen &= all(np.array_equal(before[k], v) for k, v in probe.state_dict().items())
        frozen &= state.step > 0 and any(np.any(m != 0.0) for m in state.m.values())
    med_ft, med_sc = np.median(pairs, axis=0)
    ok = med_ft <= med_sc and frozen
    report("6-transfer", ok, f"median validation RMSE fine-tuned {med_ft:.3f} vs scratch {med_sc:.3f} (bar); "
           f"warm-up left parameters bitwise unchanged={frozen} "
           f"(per seed {[(round(a, 2), round(b, 2)) for a, b in pairs]})")
    assert med_ft <= med_sc
    assert frozen


# ---------------------------------------------------------------------------
# 7. global model with interference
# ---------------------------------------------------------------------------

GLOBAL_EPOCHS = 60


def test_criterion_7_global_model():
    wells = generate_synthetic(7, 500, wells=2, coupling=0.5)
    g_scaler, g_splits, per_well = prepare_global(wells, FS, 14)
    single = {w.well_id: prepare_well(w, FS, 14) for w in wells}
    rows = {w.well_id: [] for w in wells}
    for seed in SEEDS:
        cfg = TrainConfig(epochs=GLOBAL_EPOCHS, seed=seed)
        g = train(build_model(ModelConfig("transformer", input_size=7, d_model=64, d_ff=128, seed=seed)),
                  g_splits, cfg).build_model()
        for wid, (scaler, splits) in single.items():
            s = train(build_model(ModelConfig("transformer", input_size=5, seed=seed)), splits, cfg).build_model()
            rows[wid].append((test_rmse(g, per_well[wid].test, g_scaler), test_rmse(s, splits.test, scaler)))
    parts, ok = [], True
    for wid, pairs in rows.items():
        med_g, med_s = np.median(pairs, axis=0)
        ok &= med_g < med_s
        parts.append(f"{wid} global {med_g:.3f} vs single {med_s:.3f}")
    report("7-global-coupling-0.5", ok, "median test RMSE " + "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 8. reproducible CLI runs
# ---------------------------------------------------------------------------

def test_criterion_8_cli_reproducible(tmp_path):
    assert cli.main(["synth", "-o", str(tmp_path / "data"), "--seed", "7", "--days", "500"]) == 0
    config = {"architecture": "transformer", "seed": 7, "train": {"epochs": 5},
              "wells": [{"csv": str(tmp_path / "data" / "well_0.csv")}]}
    (tmp_path / "exp.json").write_text(json.dumps(config))
    outputs = []
    for run in ("a", "b"):
        assert cli.main(["train", "-c", str(tmp_path / "exp.json"), "-o", str(tmp_path / run)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / run).iterdir())})
    a, b = outputs
    differing = sorted(n for n in set(a) | set(b) if n != "config.resolved.json" and a.get(n) != b.get(n))
    # the resolved config differs only in its output directory
    ra = json.loads(a["config.resolved.json"])
    rb = json.loads(b["config.resolved.json"])
    ra.pop("output_dir"), rb.pop("output_dir")
    ok = not differing and ra == rb and {"checkpoint.json", "metrics.test.json"} <= set(a)
    report("8-cli-bitwise", ok, f"{len(a)} artifacts compared, differing: {differing or 'none'}")
    assert ok


# ---------------------------------------------------------------------------
# 9. averaged-norm clipping
# ---------------------------------------------------------------------------

def test_criterion_9_clipping():
    _, splits = prepare_well(generate_synthetic(7, 500)[0], FS, 14)
    cfg = TrainConfig(epochs=10, seed=7, clip_warmup_epochs=3)
    ck = train(build_model(ModelConfig("lstm", input_size=5, seed=7)), splits, cfg)
    clip = ck.clip_state
    batches = math.ceil(len(splits.train) / cfg.batch_size)
    mean = math.fsum(clip.norms) / len(clip.norms)
    exact = ck.clip_threshold == mean and len(clip.norms) == cfg.clip_warmup_epochs * batches
    clipped = sum(before > ck.clip_threshold for before, _ in clip.steps)
    excess = max(after - ck.clip_threshold for _, after in clip.steps)
    ok = exact and excess <= 1e-9 and clipped > 0
    report("9-clipping", ok, f"threshold {ck.clip_threshold!r} == mean of {len(clip.norms)} warm-up norms: "
           f"{exact}; {clipped}/{len(clip.steps)} steps clipped; max post-clip excess {excess:.1e}")
    assert exact
    assert clipped > 0
    assert excess <= 1e-9


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))

"""
Acceptance suite. Each test checks one criterion and records a PASS/FAIL
line that is printed in the terminal summary.

The two full training runs (clean and degraded mean backbone, default
configuration, 32 pairs of 128x128) take roughly ten minutes each on one core.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import record
from oracles import naive_qabf, naive_vif_source, random_triple
from fusionbooster.autodiff import Conv2d, LeakyReLU, Sequential, Sigmoid, Tensor4, grad_check
from fusionbooster.backbones import DegradeSpec, degrade, fuse_mean
from fusionbooster.booster import (
    BoosterConfig,
    Triple,
    ablation_run,
    ase_forward,
    boost,
    booster_layer,
    degradation_study,
    degrade_each,
    param_checksum,
    probe_forward,
    train_ase,
    train_probe,
)
from fusionbooster.checkpoint import save_checkpoint
from fusionbooster.imaging import average_filter, base_detail_split, synth_pair
from fusionbooster.metrics import edge_intensity, entropy, qabf, std_dev, vif, vif_details

TRAIN_SEEDS = range(1000, 1032)
HELD_OUT_SEEDS = range(2000, 2020)
DEGRADE = DegradeSpec(noise_sigma=0.05, blur_k=2, contrast=0.7, seed=0)
TRAINING_BUDGET_S = 15 * 60
BOOST_BUDGET_S = 250.0
CHECKPOINT_LIMIT = 1_000_000


def mean_triples(seeds, spec=None):
    pairs = [synth_pair(s, "modality", 128, 128) for s in seeds]
    fused = [fuse_mean(a, b) for a, b in pairs]
    if spec is not None:
        fused = degrade_each(fused, spec)
    return [Triple(a, b, f) for (a, b), f in zip(pairs, fused)]


def run_training(triples, cfg):
    start = time.perf_counter()
    pa, pb, ptrace = train_probe(triples, cfg)
    before = (param_checksum(pa), param_checksum(pb))
    ase, atrace = train_ase(triples, pa, pb, cfg)
    after = (param_checksum(pa), param_checksum(pb))
    return {"models": (pa, pb, ase), "probe": ptrace, "ase": atrace, "seconds": time.perf_counter() - start,
            "probe_sums": (before, after), "cfg": cfg}


@pytest.fixture(scope="module")
def clean_run():
    return run_training(mean_triples(TRAIN_SEEDS), BoosterConfig(seed=1))


@pytest.fixture(scope="module")
def degraded_run():
    return run_training(mean_triples(TRAIN_SEEDS, DEGRADE), BoosterConfig(seed=1))


@pytest.fixture(scope="module")
def degraded_held_out():
    return mean_triples(HELD_OUT_SEEDS, DEGRADE)


def _grad_nets(rng):
    return {
        "conv": [Conv2d(2, 1, rng, dtype=np.float64)],
        "conv+leaky_relu": [Conv2d(2, 2, rng, dtype=np.float64), LeakyReLU(0.2), Conv2d(2, 1, rng, dtype=np.float64)],
        "conv+sigmoid": [Conv2d(2, 1, rng, dtype=np.float64), Sigmoid()],
        "4-layer": [Conv2d(2, 4, rng, dtype=np.float64), LeakyReLU(0.2), Conv2d(4, 1, rng, dtype=np.float64),
                    Sigmoid()],
    }


def test_c01_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(1, 6):
        rng = np.random.default_rng(seed)
        x = Tensor4(rng.normal(size=(1, 2, 8, 8)), dtype=np.float64)
        for layers in _grad_nets(rng).values():
            worst = max(worst, grad_check(Sequential(layers), x, h=1e-3))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 10
    record(1, ok, f"grad_check max rel err {worst:.2e} (< 1e-3), runtime {elapsed:.2f}s (< 10s)")
    assert ok


def test_c02_decomposition_exactness():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        img = rng.uniform(size=tuple(rng.integers(4, 40, size=2)))
        for k in (0, 1, 3, 5):
            base, detail = base_detail_split(img, k)
            worst = max(worst, np.abs(base + detail - img).max())
    constants_exact = all(
        average_filter(np.full((13, 9), c), k).tobytes() == np.full((13, 9), c).tobytes()
        for c in (0.0, 0.1, 1 / 3, 0.7, 1.0) for k in (0, 1, 3, 5))
    ok = worst <= 1e-6 and constants_exact
    record(2, ok, f"max |base+detail-img| {worst:.1e} (<= 1e-6), constants preserved exactly: {constants_exact}")
    assert ok


def test_c03_booster_identities(clean_run):
    rng = np.random.default_rng(3)
    zero_detail_ok = True
    for _ in range(20):
        src = rng.uniform(size=(32, 32))
        for k in (1, 3, 5):
            out = booster_layer(np.full(src.shape, rng.uniform()), src, k)
            zero_detail_ok &= out.tobytes() == src.tobytes()
    pa, pb, ase = clean_run["models"]
    k0_ok = True
    for a, b, f in mean_triples(HELD_OUT_SEEDS[:3]):
        k0_ok &= boost(pa, pb, ase, f, a, b, 0).tobytes() == ase_forward(ase, a, b).tobytes()
    ok = zero_detail_ok and k0_ok
    record(3, ok, f"zero detail -> source bit-exact: {zero_detail_ok}; k=0 boost == ASE(sources): {k0_ok}")
    assert ok


def _held_out_loss_rec(models, triples):
    pa, pb, ase = models
    losses = []
    for _, _, f in triples:
        parts = probe_forward(pa, pb, f)
        losses.append(np.abs(ase_forward(ase, *parts) - f).mean())
    return float(np.mean(losses))


def test_c04_training_convergence(clean_run):
    per = clean_run["probe"]["loss_per"]
    rec = _held_out_loss_rec(clean_run["models"], mean_triples(HELD_OUT_SEEDS))
    secs = clean_run["seconds"]
    ok = per[-1] < 0.5 * per[0] and rec < 0.05 and secs < TRAINING_BUDGET_S
    record(4, ok, f"Loss_per {per[0]:.4f} -> {per[-1]:.4f} (< 0.5x first), held-out Loss_rec {rec:.4f} (< 0.05), "
                  f"training {secs:.0f}s (< {TRAINING_BUDGET_S}s)")
    assert ok


def test_c05_frozen_probes(clean_run):
    before, after = clean_run["probe_sums"]
    ok = before == after
    record(5, ok, f"probe checksums unchanged by train_ase: {ok} ({after[0][:12]}, {after[1][:12]})")
    assert ok


def _boost_all(models, triples, k):
    return [boost(*models, f, a, b, k) for a, b, f in triples]


def test_c06_directional_improvement(degraded_run, degraded_held_out):
    boosted = _boost_all(degraded_run["models"], degraded_held_out, degraded_run["cfg"].k)
    parts, ok = [], True
    for name, metric in (("EN", entropy), ("SD", std_dev), ("EI", edge_intensity)):
        before = np.array([metric(t.fused) for t in degraded_held_out])
        after = np.array([metric(x) for x in boosted])
        frac = float((after > before).mean())
        good = frac >= 0.8 and after.mean() > before.mean()
        ok &= good
        parts.append(f"{name} improved on {frac:.0%} (>= 80%), mean {before.mean():.3f} -> {after.mean():.3f}")
    record(6, ok, "; ".join(parts))
    assert ok


def test_c07_ablation_ordering(degraded_run, degraded_held_out):
    k = degraded_run["cfg"].k
    seeds = iter(range(len(degraded_held_out)))

    def degraded_mean(a, b):
        return degrade(fuse_mean(a, b), replace(DEGRADE, seed=DEGRADE.seed + next(seeds)))

    outputs = {
        "full": ablation_run("full", degraded_held_out, k, models=degraded_run["models"]),
        "a": ablation_run("a", degraded_held_out, k, backbone=degraded_mean),
        "b": ablation_run("b", degraded_held_out, k),
        "baseline": [t.fused for t in degraded_held_out],
    }
    agg = {mode: {name: float(np.mean([m(x) for x in imgs]))
                  for name, m in (("EN", entropy), ("SD", std_dev), ("EI", edge_intensity))}
           for mode, imgs in outputs.items()}
    beats = {f"full>{m} {n}": agg["full"][n] > agg[m][n] for m in ("a", "b") for n in ("EN", "EI")}
    below = {f"{m}<baseline SD": agg[m]["SD"] < agg["baseline"]["SD"] for m in ("a", "b")}
    ok = all(beats.values()) and all(below.values())
    detail = ", ".join(f"{mode}: EN {v['EN']:.3f} SD {v['SD']:.2f} EI {v['EI']:.2f}" for mode, v in agg.items())
    failed = [key for key, v in {**beats, **below}.items() if not v]
    record(7, ok, detail + (f"; not met: {', '.join(failed)}" if failed else ""))
    assert ok


def test_c08_degradation_correlation(clean_run):
    pa, pb, _ = clean_run["models"]
    levels = [DegradeSpec(s, 0, 1.0, seed=0) for s in (0.0, 0.02, 0.04, 0.06, 0.08)]
    report = degradation_study(mean_triples(HELD_OUT_SEEDS), levels, pa, pb)
    ok = len(report.rows) == 5 and report.spearman > 0
    errs = ", ".join(f"{r['err']:.4f}" for r in report.rows)
    record(8, ok, f"spearman {report.spearman:.3f} (> 0) over 5 levels, errors [{errs}]")
    assert ok


def test_c09_metric_oracles():
    half = np.zeros((8, 8))
    half[:, 4:] = 1.0
    ramp = (np.arange(256) / 255).reshape(16, 16)
    hand = [
        abs(entropy(np.full((8, 8), 0.3))) <= 1e-9,
        abs(std_dev(np.full((8, 8), 0.3))) <= 1e-9,
        abs(edge_intensity(np.full((8, 8), 0.3))) <= 1e-9,
        abs(entropy(half) - 1.0) <= 1e-9,
        abs(entropy(ramp) - 8.0) <= 1e-9,
        abs(std_dev(half) - 127.5) <= 1e-9,
    ]
    q_err = v_err = 0.0
    for seed in range(10):
        a, b, f = random_triple(seed)
        q_err = max(q_err, abs(qabf(a, b, f) - naive_qabf(a, b, f)))
        ref = 0.5 * (naive_vif_source(a * 255, f * 255) + naive_vif_source(b * 255, f * 255))
        v_err = max(v_err, abs(vif(a, b, f) - ref))
    x = synth_pair(9, "modality", 64, 64)[0]
    self_vif = vif_details(x, x, x).per_source[0]
    ok = all(hand) and q_err <= 1e-9 and v_err <= 1e-6 and abs(self_vif - 1) <= 1e-6
    record(9, ok, f"hand cases {sum(hand)}/{len(hand)}, Qabf max err {q_err:.1e} (<= 1e-9), "
                  f"VIF max err {v_err:.1e} (<= 1e-6), VIF(F==X) {self_vif:.9f}")
    assert ok


def test_c10_reproducibility_and_overhead(clean_run, tmp_path):
    # bit-identical reruns: a reduced configuration exercises the same code path
    cfg = BoosterConfig(epochs=2, patch=64, patches_per_pair=2, seed=1)
    triples = mean_triples(TRAIN_SEEDS[:4])
    blobs, outs = [], []
    for i in range(2):
        run = run_training(triples, cfg)
        path = tmp_path / f"run{i}.fbst"
        save_checkpoint(path, *run["models"], cfg, {**run["probe"], **run["ase"]})
        blobs.append(path.read_bytes())
        outs.append(b"".join(x.tobytes() for x in _boost_all(run["models"], triples, cfg.k)))
    identical = blobs[0] == blobs[1] and outs[0] == outs[1]

    full = tmp_path / "clean.fbst"
    save_checkpoint(full, *clean_run["models"], clean_run["cfg"], {**clean_run["probe"], **clean_run["ase"]})
    size = full.stat().st_size

    models, k = clean_run["models"], clean_run["cfg"].k
    elapsed = 0.0
    for s in range(250):
        a, b = synth_pair(5000 + s, "modality", 256, 256)
        f = fuse_mean(a, b)
        start = time.perf_counter()
        boost(*models, f, a, b, k)
        elapsed += time.perf_counter() - start
    ok = identical and size < CHECKPOINT_LIMIT and elapsed < BOOST_BUDGET_S
    record(10, ok, f"same-seed runs bit-identical: {identical}; checkpoint {size / 1e6:.3f} MB (< 1 MB); "
                   f"boost 250 x 256x256 in {elapsed:.1f}s (< {BOOST_BUDGET_S:.0f}s, +{elapsed:.2f} s total)")
    assert ok

"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are
printed with capture disabled so they also show in a normal ``pytest -v`` run.
"""

import time

import numpy as np
import pytest
from test_losses import brute_bilateral
from test_metrics import naive_si_lmse, naive_si_mse, naive_ssim

from lappyr import gradcheck
from lappyr.checkpoint import load_nets
from lappyr.datapipe import augmentation_size, augmented_dataset, synth_dataset
from lappyr.losses import BilateralParams, data_loss, joint_bilateral_filter
from lappyr.metrics import dssim, lmse, si_lmse, si_mse, ssim
from lappyr.network import LapPyrNet, NetConfig, build_pair
from lappyr.pyramid import collapse, laplacian_expand
from lappyr.tensor import Tensor
from lappyr.trainer import (
    TrainConfig,
    constant_albedo_baseline,
    constant_shading_baseline,
    evaluate,
    evaluate_predictions,
    train_joint,
)

DESK = dict(K=2, width=16, substructures=2)


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'} | {name} | {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def si_avg(agg):
    return 0.5 * (agg["si_mse_A"] + agg["si_mse_S"])


def test_pyramid_round_trip(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(50):
        K = 1 + k % 4
        h, w = (int(rng.integers(32, 257)) // 16 * 16 for _ in range(2))
        img = rng.random((3, h, w))
        worst = max(worst, float(np.max(np.abs(collapse(laplacian_expand(img, K)) - img))))
    dt = time.perf_counter() - t0
    verdict("pyramid round trip", worst < 1e-6 and dt < 10, f"max err {worst:.2e}, {dt:.1f} s")


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    res = gradcheck.run_suite(seed=0, network=True)
    dt = time.perf_counter() - t0
    failed = [r.name for r in res if not r.passed]
    ops = max(r.max_rel_error for r in res if r.tol == gradcheck.OP_TOL)
    comp = max(r.max_rel_error for r in res if r.tol == gradcheck.LOSS_TOL)
    verdict("gradient suite", not failed and dt < 120,
            f"{len(res)} checks, ops {ops:.1e}, losses/network {comp:.1e}, {dt:.0f} s, failed {failed}")


def test_metric_oracles(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        g = rng.uniform(0.05, 1, (2, 3, 24, 24))
        p = np.clip(g + 0.2 * rng.standard_normal(g.shape), 0, 1)
        z = lambda x: naive_si_lmse(np.zeros_like(x), x, 20, 10)
        pairs = [
            (si_mse(p[0], g[0]), naive_si_mse(p[0], g[0])),
            (si_lmse(p[0], g[0], 6, 3), naive_si_lmse(p[0], g[0], 6, 3)),
            (lmse(p[0], g[0], p[1], g[1]),
             0.5 * naive_si_lmse(p[1], g[1], 20, 10) / z(g[1]) + 0.5 * naive_si_lmse(p[0], g[0], 20, 10) / z(g[0])),
            (ssim(p[0], g[0]), naive_ssim(p[0], g[0])),
            (dssim(p[0], g[0]), (1 - naive_ssim(p[0], g[0])) / 2),
        ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    g = np.random.default_rng(5).uniform(0.05, 1, (3, 16, 16))
    scale = max(si_mse(c * g, g) for c in (0.5, 2, 10))
    dt = time.perf_counter() - t0
    verdict("metric oracles", worst < 1e-8 and scale < 1e-12 and dt < 10,
            f"max diff {worst:.1e}, scaled si-MSE {scale:.1e}, {dt:.1f} s")


def test_bilateral_properties(verdict):
    rng = np.random.default_rng(3)
    guide, pred = rng.random((2, 1, 3, 12, 12))
    const = max(float(np.max(np.abs(joint_bilateral_filter(np.full(guide.shape, c), guide).data - c)))
                for c in (-1.0, 0.25, 3.0))
    blur = float(np.max(np.abs(joint_bilateral_filter(pred, guide, BilateralParams(sigma_r=np.inf)).data[0]
                               - brute_bilateral(pred[0], guide[0], 1.0, 1e12, 5))))
    one = BilateralParams(window=1)
    A, S, I = rng.random((3, 1, 3, 12, 12))
    ident = np.array_equal(joint_bilateral_filter(pred, guide, one).data, pred)
    got = data_loss(Tensor(pred), Tensor(guide), A, S, I, one).item()
    mse = np.mean((pred - A) ** 2) + np.mean((guide - S) ** 2) + np.mean((pred * guide - I) ** 2)
    ok = const < 1e-6 and blur < 1e-6 and ident and got == pytest.approx(mse, rel=1e-14)
    verdict("bilateral properties", ok,
            f"constant {const:.1e}, blur {blur:.1e}, window-1 identity {ident}, mse gap {abs(got - mse):.1e}")


def test_reformation_equivalence(verdict):
    worst = 0.0
    for seed in range(10):
        cfg = dict(K=1, width=8, substructures=2, seed=seed, samplers="identity")
        b = LapPyrNet(NetConfig(variant="stacked_split_b", **cfg), np.float64)
        c = LapPyrNet(NetConfig(variant="parallel_c", **cfg), np.float64)
        x = np.random.default_rng(seed).random((1, 3, 32, 32))
        worst = max(worst, float(np.max(np.abs(b(x).output.data - c(x).output.data))))
    verdict("reformation equivalence", worst < 1e-6, f"max diff over 10 seeds {worst:.1e}")


def test_overfit_convergence(verdict):
    net_a, net_s = build_pair(NetConfig(seed=0, **DESK))
    ds = synth_dataset(1, 0, extents=(64, 64))
    cfg = TrainConfig(steps=2000, batch=1, crop=None, scale_range=(1, 1), flip_p=0,
                      lr_start=3e-3, lr_end=3e-4)
    t0 = time.perf_counter()
    train_joint(net_a, net_s, ds, cfg)
    dt = time.perf_counter() - t0
    agg = evaluate(net_a, net_s, ds).aggregate
    ok = agg["si_mse_A"] < 1e-3 and agg["si_mse_S"] < 1e-3 and dt < 600
    verdict("overfit convergence", ok,
            f"si-MSE A {agg['si_mse_A']:.2e}, S {agg['si_mse_S']:.2e}, {dt:.0f} s")


# ---- generalization and self-augmentation share one trained model ----

GEN_STEPS = 600
FT_STEPS = 300
AUG_STRENGTH = 2.0


@pytest.fixture(scope="module")
def generalization(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    train, test = synth_dataset(32, 100), synth_dataset(8, 200)
    net_a, net_s = build_pair(NetConfig(seed=0, **DESK))
    cfg = TrainConfig(steps=GEN_STEPS, batch=2, crop=64, lr_start=3e-3, lr_end=3e-4, seed=1)
    train_joint(net_a, net_s, train, cfg, out_dir=out)
    return out / "final.ckpt", train, test, evaluate(net_a, net_s, test)


def test_generalization_smoke(verdict, generalization):
    _, _, test, report = generalization
    model = si_avg(report.aggregate)
    const_a = si_avg(evaluate_predictions(constant_albedo_baseline, test).aggregate)
    const_s = si_avg(evaluate_predictions(constant_shading_baseline, test).aggregate)
    verdict("generalization smoke", model < const_a and model < const_s,
            f"si-MSE model {model:.2e}, constant albedo {const_a:.2e}, constant shading {const_s:.2e}")


def test_self_augmentation_contract(verdict, generalization):
    ckpt, train, test, _ = generalization
    unlabeled = [p.input for p in synth_dataset(16, 300)]
    net_a, net_s, _ = load_nets(ckpt)
    # pseudo-labels filtered at twice the library default strength
    aug = augmented_dataset(net_a, net_s, train, unlabeled, strength=AUG_STRENGTH)
    exact = all(p.product_exact() for p in aug)
    sized = len(aug) == augmentation_size(len(train)) == 2 * len(train)
    # equal-budget fine-tuning of the same model, with and without the synthesized pairs
    cfg = TrainConfig(steps=FT_STEPS, batch=2, crop=64, lr_start=3e-4, lr_end=3e-5, seed=2)
    scores = {}
    for name, ds in (("plain", train), ("augmented", train + aug)):
        a, s, _ = load_nets(ckpt)
        train_joint(a, s, ds, cfg)
        scores[name] = si_avg(evaluate(a, s, test).aggregate)
    ratio = scores["augmented"] / scores["plain"]
    verdict("self-augmentation contract", exact and sized and ratio <= 1.05,
            f"exact {exact}, size {len(aug)} for {len(train)} labeled, "
            f"held-out si-MSE {scores['plain']:.2e} -> {scores['augmented']:.2e} (x{ratio:.3f})")


def test_determinism(verdict, tmp_path):
    ds, test = synth_dataset(4, 7, extents=(32, 32)), synth_dataset(2, 8, extents=(32, 32))
    blobs, reports = [], []
    for run in ("a", "b"):
        net_a, net_s = build_pair(NetConfig(seed=3, **DESK))
        train_joint(net_a, net_s, ds, TrainConfig(steps=20, batch=2, crop=32, seed=4), out_dir=tmp_path / run)
        blobs.append((tmp_path / run / "final.ckpt").read_bytes())
        reports.append(evaluate(net_a, net_s, test).to_json())
    verdict("determinism", blobs[0] == blobs[1] and reports[0] == reports[1],
            f"checkpoints identical {blobs[0] == blobs[1]}, reports identical {reports[0] == reports[1]}")

"""The thirteen acceptance criteria, each printing one PASS/FAIL line."""

import json
import math
import os
import subprocess
import sys
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from navit import pipeline
from navit.analysis import (
    Predictions,
    cascade_from_predictions,
    class_probabilities,
    expected_calibration_error,
    flop_overhead,
)
from navit.config import load_config
from navit.encoder import (
    EncoderConfig,
    compute_loss,
    contrastive_loss_chunked,
    contrastive_loss_naive,
    forward_packed,
    init_params,
)
from navit.errors import RangeError
from navit.numerics import Tensor, grad_check, precision
from navit.packing import TokenizedExample, first_fit_assignment, grid_coords, pack_first_fit
from navit.posemb import FRACTIONAL, TABLE_LOOKUP, VARIANTS, eval_posemb, init_posemb
from navit.numerics.rng import make_rng
from navit.sampling import beta_drop_rate, resolution_drop_mean, resolution_dependent_rate, scheduled_rate

from .helpers import random_example

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}")
        assert ok, f"criterion {number} ({title}) failed: {detail}"
    return emit


# 1 ---------------------------------------------------------------------------


def _equivalence_gap(rng, variant, mode):
    heads = int(rng.choice([1, 2, 4]))
    width = int(rng.choice([w for w in (8, 16, 32, 64) if w % heads == 0 and w % 4 == 0]))
    cfg = EncoderConfig(depth=int(rng.integers(1, 5)), width=width, heads=heads, patch=2, channels=3,
                        posemb=variant, maxdim=8, max_examples=5, precision=mode)
    with precision(mode):
        params = init_params(cfg, int(rng.integers(2**31)))
        examples = [random_example(i, rng, cfg.patch_features) for i in range(int(rng.integers(1, 6)))]
        seq_len = sum(len(ex) for ex in examples) + int(rng.integers(0, 8))
        packed = forward_packed(params, pack_first_fit(examples, seq_len, 5)).vectors.data
        gap = 0.0
        for e, ex in enumerate(examples):
            alone = forward_packed(params, pack_first_fit([ex], len(ex), 1)).vectors.data[0, 0]
            gap = max(gap, float(np.abs(packed[0, e] - alone).max()))
    return gap


def test_criterion_01_packed_unpacked_equivalence(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = {"single": 0.0, "double": 0.0}
    for i in range(100):
        variant = VARIANTS[i % len(VARIANTS)]
        for mode in worst:
            worst[mode] = max(worst[mode], _equivalence_gap(rng, variant, mode))
    elapsed = time.perf_counter() - start
    ok = worst["single"] <= 1e-4 and worst["double"] <= 1e-9 and elapsed <= 120
    report(1, "packed-unpacked equivalence", ok,
           f"max gap single {worst['single']:.2e} (<=1e-4), double {worst['double']:.2e} (<=1e-9), {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------


def test_criterion_02_padding_claim(report, tmp_path):
    config = load_config(CONFIGS / "packing_l256.yaml").with_overrides(out_dir=tmp_path)
    assert (config.packing.seq_len, config.packing.patch, config.dataset.count) == (256, 16, 10000)
    assert (config.sampler.low, config.sampler.high, config.sampler.dist) == (64.0, 256.0, "uniform")
    start = time.perf_counter()
    summary = pipeline.run_pack_stats(config)
    elapsed = time.perf_counter() - start
    pad, per_seq = summary["padding_fraction"], summary["mean_images_per_sequence"]
    ok = pad <= 0.02 and 4.0 <= per_seq <= 6.0 and elapsed <= 60
    report(2, "padding claim", ok,
           f"padding {pad:.4f} (<=0.02), images/seq {per_seq:.2f} (in [4,6]; reference 4.88), {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------


def linear_scan_first_fit(lengths, seq_len, max_examples):
    bins = []  # [free tokens, free slots]
    out = []
    for n in lengths:
        target = next((i for i, (free, slots) in enumerate(bins) if free >= n and slots > 0), None)
        if target is None:
            bins.append([seq_len, max_examples])
            target = len(bins) - 1
        bins[target][0] -= n
        bins[target][1] -= 1
        out.append(target)
    return out


def test_criterion_03_packer_oracle(report):
    rng = np.random.default_rng(3)
    mismatches = conservation_failures = 0
    for trial in range(1000):
        seq_len = int(rng.integers(1, 65))
        e_max = int(rng.integers(1, 9))
        lengths = rng.integers(1, seq_len + 1, size=int(rng.integers(1, 40))).tolist()
        assignment, placed = first_fit_assignment(lengths, seq_len, e_max)
        mismatches += assignment != linear_scan_first_fit(lengths, seq_len, e_max) or placed != len(lengths)
        if trial % 10 == 0:
            examples = [_line_example(i, n, rng) for i, n in enumerate(lengths)]
            batch = pack_first_fit(examples, seq_len, max(e_max, len(lengths)))
            packed = Counter()
            for b in range(batch.num_sequences):
                for t in np.flatnonzero(batch.owner[b] >= 0):
                    ex = batch.examples[b][batch.owner[b, t]]
                    packed[(ex.id, *batch.coords[b, t], *batch.patches[b, t])] += 1
            source = Counter((ex.id, *c, *p) for ex in examples for c, p in zip(ex.coords, ex.patches))
            conservation_failures += packed != source
    ok = mismatches == 0 and conservation_failures == 0
    report(3, "packer oracle", ok,
           f"{mismatches} assignment mismatches over 1000 instances, {conservation_failures} multiset violations")


def _line_example(ex_id, n, rng):
    return TokenizedExample(ex_id, grid_coords(1, n), 1, n, rng.normal(size=(n, 2)).astype(np.float32), 0)


# 4 ---------------------------------------------------------------------------


def test_criterion_04_chunked_contrastive(report):
    limits = {"single": 1e-6, "double": 1e-12}
    worst = {}
    for mode in limits:
        worst[mode] = 0.0
        with precision(mode):
            for seed in range(5):
                rng = np.random.default_rng(seed)
                img, txt = Tensor(rng.normal(size=(64, 16))), Tensor(rng.normal(size=(64, 16)))
                naive = contrastive_loss_naive(img, txt, 0.1).item()
                for chunk in (1, 4, 16, 64):
                    chunked = contrastive_loss_chunked(img, txt, 0.1, chunk).item()
                    worst[mode] = max(worst[mode], abs(chunked - naive) / abs(naive))
    ok = all(worst[m] <= limits[m] for m in limits)
    report(4, "chunked contrastive loss", ok,
           f"max relative gap single {worst['single']:.2e} (<=1e-6), double {worst['double']:.2e} (<=1e-12)")


# 5 ---------------------------------------------------------------------------


def test_criterion_05_full_model_gradients(report):
    rng = np.random.default_rng(5)
    errors = {}
    with precision("double"):
        cfg = EncoderConfig(depth=2, width=32, heads=2, patch=2, channels=1, posemb="fact-frac-sum",
                            maxdim=8, max_examples=2, precision="double")
        params = init_params(cfg, 5, text_tower=True)
        examples = [random_example(0, rng, 4, max_side=3, label=1), random_example(1, rng, 4, max_side=3, label=2)]
        batch = pack_first_fit(examples, sum(len(e) for e in examples) + 2, 2)
        assert batch.num_sequences == 1
        for loss in ("sigmoid", "contrastive"):
            used = [t for name, t in params.tensors.items() if loss == "contrastive" or name != "text/table"]
            if loss == "contrastive":
                used = [t for t in used if t.name != "head/kernel"]
            errors[loss] = grad_check(lambda: compute_loss(params, batch, loss)[0], used,
                                      max_entries=24, seed=5)
    covered = sorted({n.split("/")[-1] for n in params.names()})
    ok = max(errors.values()) <= 1e-6
    report(5, "full-model gradient check", ok,
           f"max relative error sigmoid {errors['sigmoid']:.1e}, contrastive {errors['contrastive']:.1e} "
           f"(<=1e-6) over {len(params)} tensors incl. {', '.join(c for c in covered if 'norm' in c)}")


# 6 ---------------------------------------------------------------------------


def test_criterion_06_drop_distributions(report):
    rng = make_rng(0, "beta")
    n = 10**6
    worst = 0.0
    for d_mu, d_max in [(0.25, 0.5), (0.5, 0.9), (0.1, 0.3)]:
        d = beta_drop_rate(d_mu, d_max, rng, size=n)
        u = d / d_max
        u_mu = d_mu / d_max
        target_var = 0.3 * u_mu * (1 - u_mu)
        mean_se = d.std() / math.sqrt(n)
        central = (u - u.mean()) ** 2
        var_se = central.std() / math.sqrt(n)
        worst = max(worst, abs(d.mean() - d_mu) / mean_se, abs(u.var() - target_var) / var_se)
    violations = 0
    res_rng = make_rng(6, "resolution")
    for seq_len in (16, 128, 300, 576):
        mu = resolution_drop_mean(seq_len, 0.2, 0.8, 16, 576)
        for _ in range(20000):
            violations += abs(resolution_dependent_rate(seq_len, 0.2, 0.8, 16, 576, res_rng) - mu) > 2 * 0.02 + 1e-15
    ok = worst <= 3 and violations == 0
    report(6, "drop-rate distributions", ok,
           f"max deviation {worst:.2f} standard errors (<=3), {violations} truncation violations in 80000 draws")


# 7 ---------------------------------------------------------------------------


def test_criterion_07_scheduled_rate(report):
    rho_min, rho_max, mu = 0.2, 0.8, 1000.0
    exact_gap = 0.0
    monotone = True
    endpoint_gap = 0.0
    for tau in (250.0, -250.0, 40.0):
        grid = np.linspace(mu - 5 * abs(tau), mu + 5 * abs(tau), 10)
        values = [float(scheduled_rate(n, rho_min, rho_max, mu, tau)) for n in grid]
        for n, v in zip(grid, values):
            expected = rho_min + (rho_max - rho_min) / (1 + math.exp(-(n - mu) / tau))
            exact_gap = max(exact_gap, abs(v - expected))
        steps = np.diff(values)
        monotone &= bool((steps > 0).all() if tau > 0 else (steps < 0).all())
        low = scheduled_rate(mu - 20 * abs(tau), rho_min, rho_max, mu, tau)
        high = scheduled_rate(mu + 20 * abs(tau), rho_min, rho_max, mu, tau)
        start, end = (rho_min, rho_max) if tau > 0 else (rho_max, rho_min)
        endpoint_gap = max(endpoint_gap, abs(low - start), abs(high - end))
    ok = exact_gap <= 1e-12 and monotone and endpoint_gap <= 1e-6
    report(7, "scheduled drop rate", ok,
           f"formula gap {exact_gap:.1e} (<=1e-12), monotone with sign(tau): {monotone}, "
           f"endpoint gap {endpoint_gap:.1e} (<=1e-6)")


# 8 ---------------------------------------------------------------------------


def test_criterion_08_flop_overhead(report):
    widths = [64 * 2**i for i in range(7)]
    curve = [flop_overhead(d, 256, 2) for d in widths]
    decreasing = all(a > b for a, b in zip(curve, curve[1:]))
    spot = max(abs(flop_overhead(d, 256, 2) - 256 / (6 * d + 256)) for d in widths)
    ok = decreasing and spot <= 1e-12
    report(8, "FLOP overhead curve", ok,
           f"strictly decreasing over D=64..4096: {decreasing} ({curve[0]:.4f} -> {curve[-1]:.4f}), "
           f"closed-form gap {spot:.1e} (<=1e-12)")


# 9 ---------------------------------------------------------------------------


def test_criterion_09_cascade(report):
    rng = np.random.default_rng(9)
    failures = 0
    alphas = [0.0, 0.1, 0.25, 0.4, 0.5, 0.65, 0.9, 1.0]
    for _ in range(200):
        ids = rng.permutation(10**6)[:20]
        labels = rng.integers(4, size=20)
        s1 = Predictions(ids, labels, class_probabilities(np.round(rng.normal(size=(20, 4)), 1)),
                         np.full(20, 9), rng.uniform(1, 2, 20))
        s2 = Predictions(ids, labels, class_probabilities(rng.normal(size=(20, 4))),
                         np.full(20, 25), rng.uniform(3, 4, 20))
        points = cascade_from_predictions(s1, s2, alphas)
        ranked = sorted(range(20), key=lambda i: (s1.probs[i].max(), ids[i]))
        for alpha, point in zip(alphas, points):
            hard = set(ranked[: int(math.floor(alpha * 20 + 0.5))])
            hits = sum(int((s2 if i in hard else s1).probs[i].argmax() == labels[i]) for i in range(20))
            failures += point.accuracy != hits / 20
            failures += point.time != s1.mean_flops + alpha * s2.mean_flops
        failures += (points[0].accuracy, points[0].time) != (s1.accuracy, s1.mean_flops)
        failures += (points[-1].accuracy, points[-1].time) != (s2.accuracy, s1.mean_flops + s2.mean_flops)
    report(9, "cascade endpoints and oracle", failures == 0,
           f"{failures} mismatches over 200 instances of 20 images x {len(alphas)} alphas")


# 10 --------------------------------------------------------------------------


def test_criterion_10_ece(report):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(10):
        conf = rng.uniform(size=200)
        correct = rng.uniform(size=200) < conf
        direct = 0.0
        for b in range(30):
            lo, hi = b / 30, (b + 1) / 30
            members = [i for i in range(200) if lo <= conf[i] < hi or (b == 29 and conf[i] == 1.0)]
            if members:
                gap = sum(conf[i] for i in members) / len(members) - sum(correct[i] for i in members) / len(members)
                direct += len(members) / 200 * abs(gap)
        report_ = expected_calibration_error(conf, correct)
        assert report_.buckets == 30
        worst = max(worst, abs(report_.ece - direct))
    report(10, "expected calibration error", worst <= 1e-12, f"max gap to direct summation {worst:.1e} (<=1e-12)")


# 11 --------------------------------------------------------------------------


def test_criterion_11_compute_matched_throughput(report, tmp_path):
    base = load_config(CONFIGS / "packing_l256.yaml")
    assert base.drop.kind == "constant" and base.drop.rate == 0.5 and base.train.vit_side == 224
    summaries = {}
    for mode in ("navit", "vit"):
        config = replace(base, out_dir=str(tmp_path / mode), train=replace(base.train, mode=mode)).validate()
        summaries[mode], _ = pipeline.run_train(config)
    nv, vt = summaries["navit"], summaries["vit"]
    ratio = nv["images_seen"] / vt["images_seen"]
    per_flop = (nv["images_seen"] / nv["flops"]) / (vt["images_seen"] / vt["flops"])
    budget = base.train.flop_budget
    ok = ratio >= 2 and per_flop >= 2 and max(nv["flops"], vt["flops"]) <= budget
    report(11, "compute-matched throughput", ok,
           f"images seen NaViT {nv['images_seen']} vs ViT {vt['images_seen']} at <= {budget:.1e} FLOPs: "
           f"ratio {ratio:.2f} (>=2; per FLOP {per_flop:.2f}); reference ratio 4.5 not asserted")


# 12 --------------------------------------------------------------------------


def test_criterion_12_posemb_extrapolation(report):
    maxdim, width = 16, 32
    training_grid = maxdim  # largest grid side any training example may use
    outcomes = {}
    for variant in VARIANTS:
        table = init_posemb(variant, width, maxdim, make_rng(12, variant))
        g = 2 * training_grid
        try:
            emb = eval_posemb(table, grid_coords(g, g), g, g)
            outcomes[variant] = "ok" if np.isfinite(emb.data).all() else "non-finite"
        except RangeError:
            outcomes[variant] = "range_error"
    fractional_ok = all(outcomes[v] == "ok" for v in FRACTIONAL)
    lookup_raise = all(outcomes[v] == "range_error" for v in TABLE_LOOKUP)
    report(12, "posemb extrapolation", fractional_ok and lookup_raise,
           f"2x grid: fractional {[outcomes[v] for v in FRACTIONAL]}, "
           f"table lookup {[outcomes[v] for v in TABLE_LOOKUP]}")


# 13 --------------------------------------------------------------------------


def test_criterion_13_toy_learning(report, tmp_path):
    env = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}
    cli = [sys.executable, "-m", "navit.cli"]
    config = str(CONFIGS / "toy.yaml")
    start = time.perf_counter()
    subprocess.run(cli + ["train", "--config", config, "--out", str(tmp_path)], env=env, check=True,
                   capture_output=True)
    elapsed = time.perf_counter() - start
    subprocess.run(cli + ["eval", "--config", config, "--out", str(tmp_path),
                          "--checkpoint", str(tmp_path / "checkpoint.nvck")], env=env, check=True,
                   capture_output=True)
    train = json.loads((tmp_path / "train_summary.json").read_text())
    accuracy = json.loads((tmp_path / "eval_summary.json").read_text())["reference_accuracy"]
    chance = 1 / load_config(config).dataset.num_classes
    ok = train["steps"] == 500 and accuracy >= 2 * chance and elapsed <= 300
    report(13, "toy learning sanity", ok,
           f"held-out accuracy {accuracy:.3f} after {train['steps']} packed steps (>= {2 * chance:.2f}), "
           f"training {elapsed:.1f}s single-threaded (<=300s)")

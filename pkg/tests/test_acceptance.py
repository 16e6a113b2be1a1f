"""Acceptance gate: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also collected into the terminal summary.
"""

import itertools
import tempfile
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import ACCEPTANCE_LINES, unit_rows
from scale_ull import encoder as enc
from scale_ull.config import config_from_dict, parse_config_text, serialize_config
from scale_ull.evaluation import acc_hungarian
from scale_ull.losses import LossConfig, contrastive_loss, forgetting_loss, total_loss
from scale_ull.memory import psa_select, random_select
from scale_ull.numerics import make_rng
from scale_ull.similarity import pairwise_sne, simclr_sets
from scale_ull.streams import STREAM_KINDS, StreamSpec, gen_gaussian_mixture, stream_order
from scale_ull.trainer import Experiment, run_experiment

# Toy setting for the end-to-end check.  Stream, memory and loss values are
# fixed by the criterion; the data layout, separation and step size were
# chosen by calibration (see README).
TOY = {
    "data": {"separation": 4.0, "layout": "line"},
    "stream": {"kind": "seq", "T": 4, "U": 800, "n": 32},
    "memory": {"capacity": 256, "sample_size": 32, "policy": "psa"},
    "loss": {"tau": 0.1, "mu": 0.05, "lambda": 0.1},
    "optim": {"lr": 0.005},
    "eval": {"period": 1000, "k": 5, "per_class": 100, "clustering": "kmeans"},
}
TOY_SEEDS = (0, 1, 2)
TOY_MARGIN = 0.05


def report(number, ok, text):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _loss_of(params, views, past, cfg, n, m):
    return total_loss(enc.encode(params, views), past, cfg, n, m)


def test_c1_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    n = m = 4
    cfg = LossConfig()
    for seed in range(5):
        rng = make_rng(100 + seed)
        dims = [int(rng.integers(2, 5))]
        if seed % 2:
            dims.append(int(rng.integers(4, 9)))
        dims.append(int(rng.integers(2, 5)))
        params = enc.init(dims, rng)
        params = enc.make_params(params.weights, [0.1 * rng.standard_normal(b.shape) for b in params.biases])
        views = rng.standard_normal((2 * (n + m), dims[0]))
        frozen = enc.init(dims, rng)
        past = enc.encode(frozen, views)

        feats, trace = enc.forward(params, views)
        res = total_loss(feats, past, cfg, n, m)
        grads = enc.backward(params, trace, res.grad_features)

        h = 1e-6
        for group in ("weights", "biases"):
            for l, arr in enumerate(getattr(params, group)):
                num = np.zeros(arr.shape)
                for idx in np.ndindex(arr.shape):
                    vals = []
                    for sign in (1, -1):
                        ws = [w.copy() for w in params.weights]
                        bs = [b.copy() for b in params.biases]
                        (ws if group == "weights" else bs)[l][idx] += sign * h
                        vals.append(_loss_of(enc.make_params(ws, bs), views, past, cfg, n, m).value)
                    num[idx] = (vals[0] - vals[1]) / (2 * h)
                worst = max(worst, max_rel_err(getattr(grads, group)[l], num))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-5 and elapsed < 10,
           f"gradient check max rel err {worst:.2e} (< 1e-5) over 5 configs in {elapsed:.1f}s (< 10s)")


def _nt_xent(z, n, tau):
    # blocks: first views, second views, then memory rows as negatives
    ordered = np.vstack([z[0 : 2 * n : 2], z[1 : 2 * n : 2], z[2 * n :]])
    logits = ordered[: 2 * n] @ ordered.T / tau
    np.fill_diagonal(logits[:, : 2 * n], -np.inf)
    target = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return float(np.sum(logsumexp(logits, axis=1) - logits[np.arange(2 * n), target]))


def test_c2_simclr_reduction():
    start = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, m = int(rng.integers(1, 9)), int(rng.integers(0, 9))
        z = unit_rows(rng, 2 * (n + m), int(rng.integers(2, 9)))
        tau = float(rng.uniform(0.05, 1.0))
        value = contrastive_loss(z, simclr_sets(n, 2 * (n + m)), tau, n, m).value
        worst = max(worst, abs(value - _nt_xent(z, n, tau)))
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-10 and elapsed < 5,
           f"SimCLR oracle max abs diff {worst:.2e} (<= 1e-10) on 100 instances in {elapsed:.2f}s (< 5s)")


def test_c3_forgetting_zero_and_nonnegative():
    rng = np.random.default_rng(3)
    worst_zero = 0.0
    min_kl = np.inf
    for _ in range(100):
        rows, dim = int(rng.integers(2, 20)), int(rng.integers(2, 8))
        kappa = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
        z = unit_rows(rng, rows, dim)
        same = forgetting_loss(z, z.copy(), kappa)
        worst_zero = max(worst_zero, abs(same.value), float(np.max(np.abs(same.grad_features))))
        min_kl = min(min_kl, forgetting_loss(z, unit_rows(rng, rows, dim), kappa).value)
    report(3, worst_zero <= 1e-12 and min_kl >= -1e-12,
           f"identical inputs max |value|,|grad| {worst_zero:.1e} (<= 1e-12); min KL {min_kl:.3e} (>= -1e-12)")


def test_c4_similarity_contracts():
    rng = np.random.default_rng(4)
    sym_err = cond_err = row_err = 0.0
    for kappa in (0.05, 0.1, 0.5, 1.0):
        for _ in range(25):
            sim = pairwise_sne(unit_rows(rng, int(rng.integers(2, 40)), int(rng.integers(2, 10))), kappa)
            sym_err = max(sym_err, float(np.max(np.abs(sim.symmetric_raw - sim.symmetric_raw.T))))
            cond_err = max(cond_err, float(np.max(np.abs(sim.conditional.sum(axis=1) - 1))))
            row_err = max(row_err, float(np.max(np.abs(sim.row_normalized.sum(axis=1) - 1))))
    report(4, sym_err <= 1e-12 and cond_err <= 1e-9 and row_err <= 1e-9,
           f"symmetry err {sym_err:.1e} (<= 1e-12), conditional row-sum err {cond_err:.1e}, "
           f"row-normalized row-sum err {row_err:.1e} (<= 1e-9) for kappa in 0.05/0.1/0.5/1")


def test_c5_hungarian_oracle():
    start = time.perf_counter()
    mismatches = 0
    rng = np.random.default_rng(5)
    for T in range(2, 7):
        perms = list(itertools.permutations(range(T)))
        for _ in range(100):
            size = int(rng.integers(1, 40))
            pred, true = rng.integers(0, T, size), rng.integers(0, T, size)
            table = np.zeros((T, T), dtype=np.int64)
            np.add.at(table, (pred, true), 1)
            brute = max(sum(table[c, p[c]] for c in range(T)) for p in perms) / size
            mismatches += acc_hungarian(pred, true, T).acc != brute
    elapsed = time.perf_counter() - start
    report(5, mismatches == 0 and elapsed < 10,
           f"{mismatches} mismatches vs factorial brute force over 500 cases in {elapsed:.1f}s (< 10s)")


def test_c6_psa_fixtures():
    points = np.array([[0.0], [0.1], [0.4], [0.9], [1.0]])
    picked = sorted(points[psa_select(points, 2), 0].tolist())
    under = psa_select(np.random.default_rng(0).random((3, 2)), 5) == [0, 1, 2]
    psa_share, rnd_share = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(0, 0.05, (90, 2)), rng.normal(0, 0.05, (10, 2)) + 5.0])
        minority = np.arange(100) >= 90
        psa_share.append(minority[psa_select(x, 10)].mean())
        rnd_share.append(minority[random_select(100, 10, make_rng(seed))].mean())
    ok = picked == [0.1, 0.9] and under and np.median(psa_share) >= np.median(rnd_share)
    report(6, ok, f"1-D example picks {picked}; under-capacity identity {under}; median minority share "
                  f"PSA {np.median(psa_share):.2f} vs random {np.median(rnd_share):.2f}")


def test_c7_stream_invariants():
    data = gen_gaussian_mixture(4, 120, 2, 3.0, make_rng(0))
    multiset_ok = True
    for kind in STREAM_KINDS:
        for seed in range(5):
            order = stream_order(data, StreamSpec(kind, T=4, U=100), make_rng(seed))
            if len(set(order.tolist())) != len(order):
                multiset_ok = False
            if kind != "seq_im" and np.bincount(data.labels[order]).tolist() != [100] * 4:
                multiset_ok = False
    small = gen_gaussian_mixture(4, 100, 2, 3.0, make_rng(1))
    lo, hi = 100, 0
    for seed in range(1000):
        counts = np.bincount(small.labels[stream_order(small, StreamSpec("seq_im", T=4, U=100), make_rng(seed))],
                             minlength=4)
        lo, hi = min(lo, int(counts.min())), max(hi, int(counts.max()))
    two = gen_gaussian_mixture(2, 100, 2, 3.0, make_rng(2))
    confined = True
    for seed in range(200):
        labels = two.labels[stream_order(two, StreamSpec("seq_bl", T=2, U=100), make_rng(seed))]
        confined &= bool(np.all(labels[:50] == 0) and np.all(labels[150:] == 1))
    ok = multiset_ok and lo >= 50 and hi <= 100 and confined
    report(7, ok, f"single-pass multiset ok for all kinds: {multiset_ok}; seq_im lengths in [{lo}, {hi}] "
                  f"(within [50, 100]); seq_bl mixing confined to windows: {confined}")


def _toy_cfg(seed, **over):
    raw = {k: dict(v) for k, v in TOY.items()}
    for section, values in over.items():
        raw[section].update(values)
    raw["seed"] = seed
    return config_from_dict(raw, env={})


@pytest.mark.slow
def test_c8_toy_learning():
    start = time.perf_counter()
    scale, random_enc, memoryless = [], [], []
    for seed in TOY_SEEDS:
        with tempfile.TemporaryDirectory() as d:
            scale.append(run_experiment(_toy_cfg(seed), out_dir=d)[-1].knn_acc)
        exp = Experiment.prepare(_toy_cfg(seed))
        random_enc.append(exp.evaluate(exp.initial_params, 0)[1])
        with tempfile.TemporaryDirectory() as d:
            ablation = _toy_cfg(seed, loss={"lambda": 0.0}, memory={"sample_size": 0})
            memoryless.append(run_experiment(ablation, out_dir=d)[-1].knn_acc)
    elapsed = time.perf_counter() - start
    s, r, m = np.median(scale), np.median(random_enc), np.median(memoryless)
    ok = s - r >= TOY_MARGIN and s - m >= TOY_MARGIN and elapsed < 300
    report(8, ok, f"median kNN SCALE {s:.4f} vs random encoder {r:.4f} (+{s - r:.4f}) and memoryless "
                  f"{m:.4f} (+{s - m:.4f}); margin >= {TOY_MARGIN}; per-seed SCALE {scale}, random {random_enc}, "
                  f"memoryless {memoryless}; {elapsed:.0f}s (< 300s)")


def test_c9_determinism(tmp_path):
    raw = {"seed": 7, "stream": {"U": 96, "n": 16}, "memory": {"capacity": 48, "sample_size": 16},
           "eval": {"period": 6, "per_class": 20}}
    for name in ("a", "b"):
        run_experiment(config_from_dict(raw, env={}), out_dir=tmp_path / name)
    a = (tmp_path / "a/metrics.csv").read_bytes()
    b = (tmp_path / "b/metrics.csv").read_bytes()
    rows = len(a.splitlines()) - 1
    report(9, a == b, f"two runs produce identical metrics CSVs ({len(a)} bytes, {rows} rows)")


def test_c10_image_preset():
    cfg = config_from_dict({"preset": "image"}, check_files=False, env={})
    again = parse_config_text(serialize_config(cfg), check_files=False, env={})
    values = (again.stream.n, again.memory.capacity, again.memory.sample_size,
              again.loss.tau, again.loss.mu, again.loss.lam)
    ok = again == cfg and values == (128, 1280, 128, 0.1, 0.05, 0.1)
    report(10, ok, f"image preset after round-trip (n, M, m, tau, mu, lambda) = {values}")

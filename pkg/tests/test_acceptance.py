"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines appear even without
``-s``.
"""

import csv
import dataclasses
import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from dynreg.checks import probe_net, topology_grad_checks
from dynreg.cli import main as cli_main
from dynreg.controller import filtered_loss, gaussian_window, replay_trace, window_for_length
from dynreg.harness import load_config, run_experiment
from dynreg.nets import literal_twin
from dynreg.perturb import PerturbUnit, shakedrop_keep_prob

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    return emit


def oracle_window(N, sigma):
    w = [math.exp(-0.5 * ((n - N / 2) / (sigma * N / 2)) ** 2) for n in range(N + 1)]
    total = math.fsum(w)
    return [v / total for v in w]


def oracle_filtered(losses, w):
    """sum_n w[n] * loss[i - n] over the available history, renormalized."""
    i = len(losses) - 1
    taps = [(w[n], losses[i - n]) for n in range(min(len(w), i + 1))]
    return math.fsum(a * b for a, b in taps) / math.fsum(a for a, _ in taps)


def test_window_shape(report):
    t0 = time.perf_counter()
    worst = 0.0
    ok = True
    for N in (4, 100, 500):
        w = gaussian_window(N, 0.4)
        worst = max(worst, abs(w.sum() - 1.0), np.max(np.abs(w - w[::-1])))
        ok &= int(np.argmax(w)) == N // 2
    small = np.max(np.abs(gaussian_window(4, 0.4) - [0.0219, 0.2285, 0.4991, 0.2285, 0.0219]))
    oracle = np.max(np.abs(gaussian_window(500, 0.4) - oracle_window(500, 0.4)))
    ok &= worst < 1e-12 and small < 5e-4 and oracle < 1e-12
    report(1, ok, f"window sum/symmetry err {worst:.1e}, N=4 err {small:.1e}, "
                  f"vs density oracle {oracle:.1e} ({1e3 * (time.perf_counter() - t0):.1f} ms)")
    assert ok


def test_filter_matches_direct_summation(report):
    rng = np.random.default_rng(2024)
    w = gaussian_window(500, 0.4)
    w_oracle = oracle_window(500, 0.4)
    t0 = time.perf_counter()
    worst = 0.0
    lengths = rng.integers(1, 1001, 1000)
    for k in lengths:
        trace = list(rng.uniform(0.0, 5.0, k))
        worst = max(worst, abs(filtered_loss(trace, w) - oracle_filtered(trace, w_oracle)))
    elapsed = time.perf_counter() - t0
    warm = int(np.sum(lengths < 501))
    ok = worst < 1e-12
    report(2, ok, f"1000 traces ({warm} in warm-up), max |diff| {worst:.1e}, {elapsed:.2f} s")
    assert ok


def test_controller_counting_identity(report):
    rng = np.random.default_rng(7)
    delta_s = 2.0 ** -10  # dyadic, so the running sums are exact
    checked = 0
    mismatches = 0
    t0 = time.perf_counter()
    for trial in range(100):
        n = int(rng.integers(50, 400))
        # a drifting random walk gives long runs of both signs
        losses = list(np.cumsum(rng.normal(rng.uniform(-0.02, 0.02), 0.1, n)) + 10.0)
        s0 = float(rng.choice([0.0, 0.25, 1.0]))
        filter_length = int(rng.choice([1, 11, 51]))
        w = window_for_length(filter_length)
        f = [oracle_filtered(losses[:i + 1], list(w)) for i in range(n)]
        values = replay_trace(losses, delta_s=delta_s, filter_length=filter_length, s0=s0)
        ups = downs = 0
        for i in range(1, n):
            if f[i] - f[i - 1] <= 0:
                ups += 1
            else:
                downs += 1
            expected = s0 + delta_s * (ups - downs)
            if expected < 0:
                break  # the clamp binds from here on
            checked += 1
            mismatches += values[i] != expected
    s_final = replay_trace(np.linspace(3.0, 0.5, 1000), delta_s=0.0003)[-1]
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and abs(s_final - 0.2997) < 1e-12
    report(3, ok, f"{checked} steps on 100 traces, {mismatches} mismatches; "
                  f"decreasing trace ends at s={s_final:.12f} ({elapsed:.2f} s)")
    assert ok


def test_gradient_correctness(report):
    t0 = time.process_time()
    results = topology_grad_checks(seed=0)
    elapsed = time.process_time() - t0
    worst = max(r.max_rel_error for _, r in results)
    ok = all(r.passed(1e-4) for _, r in results) and elapsed < 30
    detail = ", ".join(f"{name} {r.max_rel_error:.1e}" for name, r in results)
    report(4, ok, f"max rel err {worst:.1e} < 1e-4 in {elapsed:.1f} CPU-s [{detail}]")
    assert ok


def test_inference_folding(report):
    t0 = time.perf_counter()
    worst = 0.0
    for topology in ("res2", "res3", "dense"):
        net = probe_net(topology, seed=3)
        rng = np.random.default_rng(11)
        for _ in range(3):  # train-mode passes move the running statistics
            net.predict(rng.standard_normal((8,) + net.spec.input_shape))
        net.set_mode("eval")
        twin = literal_twin(net)
        for _ in range(20):
            x = rng.standard_normal((4,) + net.spec.input_shape)
            worst = max(worst, float(np.max(np.abs(net.predict(x) - twin.predict(x)))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    report(5, ok, f"max |eval - literal twin| {worst:.1e} over 60 inputs ({elapsed:.2f} s)")
    assert ok


def test_distributional_embedding(report):
    t0 = time.perf_counter()
    unit = PerturbUnit(A=0.5, R=0.5, granularity="sample", rng=np.random.default_rng(12345))
    theta = unit.sample_theta(1.0, size=100_000)
    ks = stats.kstest(theta, "uniform")
    elapsed = time.perf_counter() - t0
    ok = ks.statistic < 0.01 and elapsed < 5
    report(6, ok, f"KS statistic {ks.statistic:.4f} vs Uniform[0,1] (p={ks.pvalue:.2f}, {elapsed:.2f} s)")
    assert ok


def test_shakedrop_decay(report):
    worst = 0.0
    count = 0
    for L in (4, 26, 110):
        for l in range(1, L + 1):
            worst = max(worst, abs(shakedrop_keep_prob(l, L, 0.5) - (1 - (l / L) * (1 - 0.5))))
            count += 1
    ends = [shakedrop_keep_prob(L, L, 0.5) for L in (4, 26, 110)]
    ok = worst == 0.0 and ends == [0.5, 0.5, 0.5]
    report(7, ok, f"{count} blocks match direct substitution (max diff {worst}), p_L = {ends}")
    assert ok


# Wide vs narrow. Both nets see the same data, seed and iteration count; the
# wide one has 4x the channels in every layer. Per-example draws keep the
# strength signal from being swamped by batch-to-batch loss jumps.
FIG5_BASE = dict(
    topology="res2", depth=4, widening="pyramid", dataset="spirals", n_per_class=2000, test_per_class=200,
    noise=0.02, epochs=30, batch_size=32, schedule="dynamic", delta_s=0.0003, granularity="sample",
)
FIG5_NARROW = 4


def fig5_config(width, seed):
    from dynreg.harness import RunConfig

    return RunConfig(width=width, width_step=width, seed=seed, out_dir="runs/fig5", **FIG5_BASE)


@pytest.mark.slow
def test_wide_net_reaches_higher_strength(report):
    wins = 0
    lines = []
    worst_seconds = 0.0
    for seed in range(5):
        finals = []
        for width in (FIG5_NARROW, 4 * FIG5_NARROW):
            t0 = time.process_time()
            finals.append(run_experiment(fig5_config(width, seed), write=False).summary["final_s"])
            worst_seconds = max(worst_seconds, time.process_time() - t0)
        wins += finals[1] > finals[0]
        lines.append(f"seed {seed}: narrow {finals[0]:.4f} wide {finals[1]:.4f}")
    ok = wins >= 4 and worst_seconds <= 300
    report(8, ok, f"wide > narrow final s in {wins}/5 seeds, slowest run {worst_seconds:.0f} CPU-s ["
                  + "; ".join(lines) + "]")
    assert ok


@pytest.mark.slow
def test_schedule_sweep(report, tmp_path):
    t0 = time.process_time()
    code = cli_main(["sweep", "--config", os.path.join(CONFIGS, "sweep.cfg"), "--schedules",
                     "none,fix:2,linear:3,dynamic", "--seeds", "0,1,2,3,4", "--out", str(tmp_path)])
    elapsed = time.process_time() - t0
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    by_label = {r["label"]: r for r in rows}
    well_formed = (code == 0 and [r["label"] for r in rows] == ["Baseline", "Fix-2", "Linear-3", "Dynamic"]
                   and len({r["params"] for r in rows}) == 1 and all(r["seeds"] == "5" for r in rows))
    dyn, base = float(by_label["Dynamic"]["mean_test_err"]), float(by_label["Baseline"]["mean_test_err"])
    ok = well_formed and elapsed <= 1800
    direction = "<=" if dyn <= base else ">"
    report(9, ok, f"4 rows, {rows[0]['params']} params each, {elapsed / 60:.1f} CPU-min; dynamic {dyn:.2f}% "
                  f"{direction} baseline {base:.2f}% mean test error (direction reported, not asserted)")
    assert ok


def test_smoke_run_is_deterministic(report, tmp_path):
    cfg = load_config(os.path.join(CONFIGS, "smoke.cfg"))
    t0 = time.perf_counter()
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run_experiment(dataclasses.replace(cfg, out_dir=str(out)))
        blobs.append((out / "metrics.csv").read_bytes())
    elapsed = time.perf_counter() - t0
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0 and elapsed < 120
    report(10, ok, f"two smoke runs produce byte-identical metrics CSVs ({len(blobs[0])} bytes, {elapsed:.1f} s)")
    assert ok

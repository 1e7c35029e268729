"""Acceptance gate: one test (or test group) per criterion, tagged with its number.

The conftest prints one PASS/FAIL line per criterion at the end of the run.
"""

import dataclasses
import functools
import statistics
import time

import numpy as np
import pytest
from scipy import stats

from olive.aggregation import (
    AggregationInput,
    aggregate,
    average_and_perturb,
    scatter_add_oracle,
)
from olive.attack import attack_users, build_teachers, evaluate_attack, score_jac
from olive.bench import bench_once, random_batch
from olive.cli import main
from olive.flcore import FlConfig, build_dataset, build_model, dump_config, l2_clip, topk_sparsify, train
from olive.oram import READ_OP, WRITE_ADD, oram_access, oram_init
from olive.osort import bitonic_sort, comparator_count
from olive.primitives import SENTINEL_INDEX
from olive.trace import LinearLayout, Region, TracedArray, Tracer, leaked_indices, trace_equal

pytestmark = pytest.mark.acceptance

RTOL, ATOL = 1e-5, 1e-6
SEEDS = range(5)

# Pilot run of the reference benchmark (defaults of FlConfig with the linear
# aggregator, seeds 0-4) before the thresholds below were fixed.
PILOT = {"top1": 1.0, "all": 0.95}
TOP1_MIN, ALL_MIN = 0.8, 0.5


def reference_config(**kw):
    return dataclasses.replace(FlConfig(aggregator="linear"), **kw)


@functools.lru_cache(maxsize=None)
def reference_run(seed, alpha=0.1, sigma=1.12):
    cfg = reference_config(seed=seed, alpha=alpha, sigma=sigma)
    ds = build_dataset(cfg)
    _, leaks, metrics = train(cfg, ds)
    return cfg, ds, leaks, metrics


@functools.lru_cache(maxsize=None)
def attack_metrics(seed, alpha=0.1, sigma=1.12):
    cfg, ds, leaks, metrics = reference_run(seed, alpha, sigma)
    res = attack_users(leaks, metrics.checkpoints, ds.public, cfg.alpha, build_model(cfg, ds), "jac", known_count=2, truth=ds.truth())
    return evaluate_attack(res)


def mean_metrics(**kw):
    runs = [attack_metrics(s, **kw) for s in SEEDS]
    return float(np.mean([r[0] for r in runs])), float(np.mean([r[1] for r in runs]))


# 1 -------------------------------------------------------------------------

OBLIVIOUS_CASES = [
    ("baseline", ["--c", "1"]),
    ("baseline", ["--c", "8"]),
    ("baseline", ["--c", "16"]),
    ("advanced", []),
    ("grouped", ["--h", "1"]),
    ("grouped", ["--h", "3"]),
    ("grouped", ["--h", "32"]),
]


@pytest.mark.criterion(1)
@pytest.mark.parametrize("algo,extra", OBLIVIOUS_CASES, ids=[f"{a}{''.join(e)}" for a, e in OBLIVIOUS_CASES])
def test_c01_oblivious_check(algo, extra, capsys):
    argv = ["oblivious-check", "--algo", algo, "--pairs", "100", "--n", "32", "--d", "256", "--alpha", "0.0625", "--seed", "11"]
    code = main(argv + extra)
    out = capsys.readouterr().out
    assert code == 0, out
    assert '"equal_pairs": 100' in out


# 2 -------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_c02_linear_leaks(note):
    rng = np.random.default_rng(22)
    n, d, k = 32, 256, 16
    distinguishable = 0
    for _ in range(100):
        a, b = random_batch(n, d, k / d, rng), random_batch(n, d, k / d, rng)
        assert sorted(a.unpacked()[0].tolist()) != sorted(b.unpacked()[0].tolist())
        traces = []
        for inp in (a, b):
            t = Tracer()
            aggregate(inp, "linear", tracer=t)
            tr = t.trace()
            truth = [set(row.tolist()) for row in inp.unpacked()[0].reshape(n, k)]
            assert leaked_indices(tr, LinearLayout(n, k, d)) == truth
            traces.append(tr)
        distinguishable += not trace_equal(*traces)
    note(f"{distinguishable}/100 pairs distinguishable")
    assert distinguishable >= 99


# 3 -------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_c03_oracle(note):
    rng = np.random.default_rng(33)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, 33))
        d = int(rng.integers(k, 257))
        idx = np.stack([rng.choice(d, k, replace=False) for _ in range(n)]).astype(np.uint64)
        val = rng.uniform(-1, 1, (n, k)).astype(np.float32)
        pad = rng.random((n, k)) < 0.1
        idx[pad] = SENTINEL_INDEX
        val[pad] = 0.0
        inp = AggregationInput.from_arrays(idx, val, d)
        exact = scatter_add_oracle(inp)
        wide = scatter_add_oracle(inp, np.float64)
        c = int(rng.choice([1, 2, 4, 8, 16]))
        h = int(rng.integers(1, n + 1))
        assert aggregate(inp, "linear").tobytes() == exact.tobytes()
        assert aggregate(inp, "baseline", cacheline_c=c).tobytes() == exact.tobytes()
        np.testing.assert_allclose(aggregate(inp, "advanced"), wide, rtol=RTOL, atol=ATOL)
        np.testing.assert_allclose(aggregate(inp, "grouped", group_h=h), wide, rtol=RTOL, atol=ATOL)
        np.testing.assert_allclose(aggregate(inp, "oram", rng=rng), wide, rtol=RTOL, atol=ATOL)
    note("200 instances, n<=64, k<=32, d<=256, ~10% padding cells")


# 4 -------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_c04_complexity_trend(note):
    def median_time(algo, c=None):
        return statistics.median(
            bench_once(algo, 100, 100_000, 0.01, c, None, seed=s).wall_time_seconds for s in range(5)
        )

    adv = median_time("advanced")
    base = median_time("baseline", 16)
    oram = median_time("oram")
    note(f"median s: advanced {adv:.2f}, baseline(c=16) {base:.2f}, oram {oram:.2f}")
    assert adv < base / 3
    assert adv < oram / 3


# 5 -------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_c05_grouping(note):
    inp = random_batch(2000, 50_000, 0.1, np.random.default_rng(55))
    t0 = time.perf_counter()
    ref = aggregate(inp, "advanced")
    ungrouped = time.perf_counter() - t0
    timings = {}
    best = None
    for h in (50, 100, 200, 500, 1000, 2000):
        t0 = time.perf_counter()
        out = aggregate(inp, "grouped", group_h=h)
        timings[h] = time.perf_counter() - t0
        np.testing.assert_allclose(out, ref, rtol=RTOL, atol=ATOL)
        if timings[h] <= 0.9 * ungrouped:
            best = h
            break
    note(f"ungrouped {ungrouped:.1f}s; grouped " + ", ".join(f"h={h}: {t:.1f}s" for h, t in timings.items()))
    assert best is not None


# 6-8 -----------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_c06_attack_efficacy(note):
    exact, top1 = mean_metrics()
    _, _, _, metrics = reference_run(0)
    note(f"mean over 5 seeds: all {exact:.3f}, top1 {top1:.3f} (pilot: all {PILOT['all']}, top1 {PILOT['top1']})")
    note(f"seed 0 test accuracy per round: {', '.join(f'{a:.3f}' for a in metrics.accuracy)}")
    assert top1 >= TOP1_MIN
    assert exact >= ALL_MIN
    assert metrics.accuracy[-1] > 0.3


@pytest.mark.criterion(7)
def test_c07_sparsity_trend(note):
    _, low = mean_metrics(alpha=0.05)
    _, high = mean_metrics(alpha=0.5)
    note(f"top1 alpha=0.05: {low:.3f}, alpha=0.5: {high:.3f}")
    assert low >= high - 0.05


@pytest.mark.criterion(8)
def test_c08_noise_robustness(note):
    _, noisy = mean_metrics(sigma=1.12)
    _, clean = mean_metrics(sigma=0.0)
    note(f"top1 sigma=1.12: {noisy:.3f}, sigma=0: {clean:.3f}")
    assert noisy >= clean - 0.1
    for seed in SEEDS:
        first = []
        for sigma in (0.0, 1.12):
            cfg, ds, leaks, metrics = reference_run(seed, sigma=sigma)
            teachers = build_teachers({0: metrics.checkpoints[0]}, ds.public, cfg.alpha, build_model(cfg, ds))
            scores = {u: score_jac({0: idx}, teachers).scores.tobytes() for u, idx in leaks[0].observed.items()}
            first.append(scores)
        assert first[0] == first[1]


# 9 -------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_c09_defense_completeness(tmp_path, capsys):
    conf = tmp_path / "advanced.conf"
    conf.write_text(dump_config(reference_config(seed=0, aggregator="advanced")))
    assert main(["fl-train", "--config", str(conf), "--out-dir", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "leaks.jsonl").read_text() == ""
    capsys.readouterr()
    code = main(["attack", "--config", str(conf), "--leaks", str(tmp_path / "run" / "leaks.jsonl"),
                 "--checkpoints", str(tmp_path / "run" / "checkpoints")])
    err = capsys.readouterr().err
    assert code == 1
    assert "user never observed" in err


# 10 ------------------------------------------------------------------------


@pytest.mark.criterion(10)
def test_c10_noise_calibration(note):
    cfg = FlConfig()
    rng = np.random.default_rng(10)
    out = average_and_perturb(np.zeros(100_000, np.float32), 1.0, cfg.noise_std, rng)
    std = float(np.std(out.astype(np.float64)))
    note(f"empirical std {std:.4f} vs sigma*C = {cfg.noise_std:.4f}")
    assert abs(std - cfg.noise_std) <= 0.01 * cfg.noise_std


@pytest.mark.criterion(10)
def test_c10_clipped_norms():
    rng = np.random.default_rng(100)
    clip = FlConfig().clip
    for _ in range(10_000):
        scale = float(np.exp(rng.normal(0, 2)))
        delta = rng.normal(0, scale, 698).astype(np.float32)
        g = l2_clip(topk_sparsify(delta, 0.1), clip)
        assert g.norm() <= clip + 1e-4


# 11 ------------------------------------------------------------------------


@pytest.mark.criterion(11)
def test_c11_oram(note):
    rng = np.random.default_rng(111)
    tree = oram_init(256, bucket_z=4, rng=rng, stash_size=20)
    ref = np.zeros(256, np.float32)
    for step in range(100_000):
        a = int(rng.integers(256))
        if rng.random() < 0.5:
            v = np.float32(rng.uniform(-1, 1))
            oram_access(tree, WRITE_ADD, a, v, rng)
            ref[a] += v
        else:
            assert np.float32(oram_access(tree, READ_OP, a, rng=rng)) == ref[a]
        if step == 9_999:
            assert tree.overflows == 0
    assert tree.check_invariant()
    counts = np.bincount(tree.leaf_log, minlength=tree.n_leaves)
    p = float(stats.chisquare(counts).pvalue)
    note(f"1e5 ops exact; leaf chi-squared p = {p:.3f}; overflows {tree.overflows}")
    assert p >= 0.001
    assert tree.overflows == 0


# 12 ------------------------------------------------------------------------


@pytest.mark.criterion(12)
def test_c12_sorting_network():
    rng = np.random.default_rng(12)
    assert comparator_count(8) == 24
    for _ in range(10_000):
        m = 1 << int(rng.integers(0, 8))
        idx = rng.integers(0, 8, m, dtype=np.uint64)
        words = (idx << np.uint64(32)) | rng.integers(0, 2**32, m, dtype=np.uint64)
        arr = TracedArray(Region.WORK, words.copy())
        bitonic_sort(arr)
        assert np.array_equal(arr.data, np.sort(words))
    for m in (8, 64, 256):
        traces = []
        for data in (np.arange(m, dtype=np.uint64), rng.integers(0, 2**63, m, dtype=np.uint64), np.zeros(m, np.uint64)):
            t = Tracer()
            bitonic_sort(TracedArray(Region.WORK, data.copy(), t))
            traces.append(t.trace())
        assert all(trace_equal(traces[0], x) for x in traces[1:])
        assert len(traces[0]) == 4 * comparator_count(m)

"""Timing and obliviousness harnesses over random sparse-gradient batches."""

import collections
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .aggregation import AggregationInput, aggregate, expected_event_count
from .flcore import sparse_k
from .oram import oram_aggregate_tree, oram_event_count
from .trace import AccessTrace, LinearLayout, Region, Tracer, first_difference, leaked_indices, trace_equal

BENCH_FIELDS = ("algo", "n", "k", "d", "c", "h", "wall_time_seconds", "traced_event_count", "op_counters")


def random_batch(n, d, alpha, rng):
    """``n`` clients, ``ceil(alpha * d)`` distinct uniform indices each, values uniform in [-1, 1]."""
    k = sparse_k(alpha, d)
    idx = np.stack([rng.choice(d, k, replace=False) for _ in range(n)]) if n else np.zeros((0, k), np.int64)
    val = rng.uniform(-1.0, 1.0, (n, k)).astype(np.float32)
    return AggregationInput.from_arrays(idx, val, d)


@dataclass
class BenchRecord:
    algo: str
    n: int
    k: int
    d: int
    c: int = None
    h: int = None
    wall_time_seconds: float = 0.0
    traced_event_count: int = 0
    op_counters: dict = field(default_factory=dict)

    def row(self):
        r = asdict(self)
        r["op_counters"] = ";".join(f"{k}={v}" for k, v in sorted(self.op_counters.items()))
        r["c"] = "" if self.c is None else self.c
        r["h"] = "" if self.h is None else self.h
        r["wall_time_seconds"] = f"{self.wall_time_seconds:.6f}"
        return r


def _event_count(algo, inp, c, h, counters):
    if algo == "oram":
        return oram_event_count(inp.d, accesses=counters["oram_accesses"])
    return expected_event_count(algo, inp.n, inp.k, inp.d, cacheline_c=c or 1, group_h=h)


def bench_once(algo, n, d, alpha, c=None, h=None, seed=None):
    """One timed aggregation on a fresh random batch (tracer off, counters on)."""
    rng = np.random.default_rng(seed)
    inp = random_batch(n, d, alpha, rng)
    counters = collections.Counter()
    t0 = time.perf_counter()
    aggregate(inp, algo, cacheline_c=c or 1, group_h=h, counters=counters, rng=rng)
    wall = time.perf_counter() - t0
    events = _event_count(algo, inp, c, h, counters)
    return BenchRecord(algo, n, inp.k, d, c, h, wall, events, dict(counters))


def _bench_job(job):
    return bench_once(*job)


def run_bench(algo, n, d, alpha, c=None, h=None, repeat=1, seed=None, jobs=1):
    """``repeat`` independent repetitions, each with its own child seed."""
    children = np.random.SeedSequence(seed).spawn(repeat)
    work = [(algo, n, d, alpha, c, h, child) for child in children]
    if jobs > 1 and repeat > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_bench_job, work))
    return [_bench_job(w) for w in work]


def traced_run(algo, inp, c=None, h=None, rng=None):
    tracer = Tracer()
    aggregate(inp, algo, cacheline_c=c or 1, group_h=h, tracer=tracer, rng=rng)
    return tracer.trace()


def _oram_shape(t):
    """ORAM trace with tree cells blanked out.

    What remains is the schedule every access shares; the leaf choice is
    tested separately for uniformity.
    """
    cell = t.cell.copy()
    tree = t.region == Region.ORAM_TREE
    cell[tree] = 0
    return AccessTrace(t.region, cell, t.op)


def _oram_traced(inp, rng, leaves):
    tracer = Tracer()
    _, tree = oram_aggregate_tree(inp, tracer=tracer, rng=rng)
    leaves.extend(tree.leaf_log)
    return _oram_shape(tracer.trace())


def oblivious_check(algo, pairs, n, d, alpha, c=None, h=None, seed=None):
    """Run ``pairs`` random same-shape input pairs and compare their traces.

    Oblivious aggregators must produce equal traces (at granularity ``c`` for
    baseline). Linear must instead be distinguishable on every pair and its
    leaked index sets must equal the true ones. ORAM traces must agree in
    schedule, and the pooled leaf choices must pass a chi-squared uniformity
    test at level 0.001. Returns ``(ok, report)``.
    """
    granularity = c if algo == "baseline" and c else 1
    report = {
        "algo": algo,
        "pairs": pairs,
        "n": n,
        "k": sparse_k(alpha, d),
        "d": d,
        "c": c,
        "h": h,
        "granularity": granularity,
        "equal_pairs": 0,
        "distinguishable_pairs": 0,
        "counterexamples": [],
    }
    leaves = []
    root = np.random.SeedSequence(seed)
    for p, child in enumerate(root.spawn(pairs)):
        sa, sb = child.spawn(2)
        ra, rb = np.random.default_rng(sa), np.random.default_rng(sb)
        a, b = random_batch(n, d, alpha, ra), random_batch(n, d, alpha, rb)
        if algo == "oram":
            ta, tb = (_oram_traced(x, r, leaves) for x, r in ((a, ra), (b, rb)))
        else:
            ta, tb = traced_run(algo, a, c, h), traced_run(algo, b, c, h)
        same = trace_equal(ta, tb, granularity)
        report["equal_pairs" if same else "distinguishable_pairs"] += 1
        entry = {"pair": p, "seed_entropy": str(root.entropy), "spawn_key": list(child.spawn_key)}
        if algo == "linear":
            layout = LinearLayout(a.n, a.k, a.d)
            truth_ok = all(
                leaked_indices(t, layout) == [set(row.tolist()) for row in x.unpacked()[0].reshape(x.n, x.k)]
                for t, x in ((ta, a), (tb, b))
            )
            if same or not truth_ok:
                entry["first_difference"] = None if same else first_difference(ta, tb, granularity)
                entry["leak_recovered"] = truth_ok
                report["counterexamples"].append(entry)
        elif not same:
            entry["first_difference"] = first_difference(ta, tb, granularity)
            report["counterexamples"].append(entry)
    if algo == "oram" and leaves:
        n_leaves = 1 << max(0, (d - 1).bit_length())
        counts = np.bincount(leaves, minlength=n_leaves)
        pvalue = float(stats.chisquare(counts).pvalue)
        report["leaf_chi2_pvalue"] = pvalue
        if pvalue < 0.001:
            report["counterexamples"].append({"leaf_uniformity": "rejected"})
    ok = not report["counterexamples"]
    return ok, report

"""
Aggregator cost at small scale
==============================

Times the five aggregators on one random batch and compares the closed-form
trace lengths. Sizes are small so the script runs in seconds. The
``aggregate-bench`` command repeats this at any size and writes CSV.
"""

import collections
import time

import numpy as np

from olive.aggregation import aggregate, expected_event_count
from olive.bench import random_batch

rng = np.random.default_rng(1)
n, d, alpha = 50, 20_000, 0.01
inp = random_batch(n, d, alpha, rng)
print(f"n={n} clients, d={d}, k={inp.k} entries per client")

###############################################################################
# One run each. Baseline uses cachelines of 16 cells.

settings = [
    ("linear", {}),
    ("baseline", {"cacheline_c": 16}),
    ("advanced", {}),
    ("grouped", {"group_h": 10}),
    ("oram", {"rng": rng}),
]
results = {}
for algo, kw in settings:
    counters = collections.Counter()
    t0 = time.perf_counter()
    results[algo] = aggregate(inp, algo, counters=counters, **kw)
    wall = time.perf_counter() - t0
    print(f"{algo:9s} {wall:8.3f} s  counters={dict(counters)}")

###############################################################################
# All five agree with each other.

ref = results["linear"]
for algo, out in results.items():
    print(f"{algo:9s} max |diff| vs linear = {np.max(np.abs(out - ref)):.2e}")

###############################################################################
# Trace lengths for the deterministic aggregators follow from the shape alone.

for algo, extra in [("linear", {}), ("baseline", {"cacheline_c": 16}), ("advanced", {}), ("grouped", {"group_h": 10})]:
    print(f"{algo:9s} events = {expected_event_count(algo, n, inp.k, d, **extra):,}")

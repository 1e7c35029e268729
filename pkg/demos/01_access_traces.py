"""
What an access-pattern observer sees
====================================

Two batches with the same shape but different indices go through the Linear
aggregator and through the sort-and-fold aggregator. Linear writes the
result at each input index, so its trace spells the indices out. The
oblivious aggregator produces the same trace for both batches.
"""

import numpy as np

from olive.aggregation import AggregationInput, aggregate
from olive.trace import LinearLayout, Tracer, first_difference, leaked_indices, trace_equal

rng = np.random.default_rng(0)
n, k, d = 3, 2, 8

###############################################################################
# Two random batches: each of 3 clients sends 2 distinct indices out of 8.

def batch():
    idx = np.stack([rng.choice(d, k, replace=False) for _ in range(n)])
    val = rng.uniform(-1, 1, (n, k)).astype(np.float32)
    return AggregationInput.from_arrays(idx, val, d), idx

a, idx_a = batch()
b, idx_b = batch()
print("client indices, batch a:", idx_a.tolist())
print("client indices, batch b:", idx_b.tolist())

###############################################################################
# Linear aggregation. The trace is 3 events per cell: read the cell, read the
# result slot, write the result slot.

def traced(inp, algo):
    t = Tracer()
    out = aggregate(inp, algo, tracer=t)
    return out, t.trace()

_, ta = traced(a, "linear")
_, tb = traced(b, "linear")
print("linear traces equal:", trace_equal(ta, tb), "- first difference at event", first_difference(ta, tb))
print("indices recovered from trace a:", [sorted(s) for s in leaked_indices(ta, LinearLayout(n, k, d))])

###############################################################################
# Advanced aggregation: sort, fold, sort again. Same result, same trace.

va, ta = traced(a, "advanced")
vb, tb = traced(b, "advanced")
print("advanced traces equal:", trace_equal(ta, tb), f"({len(ta)} events each)")
print("advanced result a:", np.round(va, 3))
print("linear result a:  ", np.round(aggregate(a, "linear"), 3))

###############################################################################
# Baseline sweeps all of G* for every cell. With the result laid out in
# cachelines of c cells it touches one slot per line, which an observer
# with cacheline resolution cannot tell apart.

c = 4
t1, t2 = Tracer(), Tracer()
aggregate(a, "baseline", cacheline_c=c, tracer=t1)
aggregate(b, "baseline", cacheline_c=c, tracer=t2)
print("baseline equal at cell resolution:", trace_equal(t1.trace(), t2.trace()))
print(f"baseline equal at cacheline resolution (c={c}):", trace_equal(t1.trace(), t2.trace(), c))

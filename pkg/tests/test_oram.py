import numpy as np
import pytest
from scipy import stats

from olive.aggregation import AggregationInput, scatter_add_oracle
from olive.oram import (
    READ_OP,
    WRITE_ADD,
    StashOverflow,
    access_event_count,
    oram_access,
    oram_aggregate,
    oram_event_count,
    oram_init,
)
from olive.trace import Region, Tracer


@pytest.mark.parametrize("cap,height,buckets", [(1, 0, 1), (2, 1, 3), (5, 3, 15), (256, 8, 511)])
def test_init_shape(cap, height, buckets):
    t = oram_init(cap, rng=np.random.default_rng(0))
    assert t.height == height
    assert t.n_buckets == buckets
    assert t.check_invariant()


def test_read_after_init_and_write():
    rng = np.random.default_rng(1)
    t = oram_init(16, rng=rng)
    assert all(oram_access(t, READ_OP, a, rng=rng) == 0.0 for a in range(16))
    oram_access(t, WRITE_ADD, 3, 2.0, rng)
    assert oram_access(t, READ_OP, 3, rng=rng) == 2.0
    assert t.check_invariant()


def test_array_equivalence_and_invariant():
    rng = np.random.default_rng(2)
    cap = 64
    t = oram_init(cap, rng=rng)
    ref = np.zeros(cap, np.float32)
    for step in range(3000):
        a = int(rng.integers(cap))
        if rng.random() < 0.5:
            v = np.float32(rng.normal())
            oram_access(t, WRITE_ADD, a, v, rng)
            ref[a] += v
        else:
            assert np.float32(oram_access(t, READ_OP, a, rng=rng)) == ref[a]
        if step % 500 == 0:
            assert t.check_invariant()
    assert t.overflows == 0


def test_leaf_choice_uniform():
    rng = np.random.default_rng(3)
    t = oram_init(64, rng=rng)
    for _ in range(6400):
        oram_access(t, READ_OP, 7, rng=rng)  # same address every time
    counts = np.bincount(t.leaf_log, minlength=t.n_leaves)
    assert stats.chisquare(counts).pvalue > 0.001


def test_trace_schedule_fixed():
    rng = np.random.default_rng(4)
    t = oram_init(32, rng=rng)
    tr = Tracer()
    oram_access(t, READ_OP, 1, rng=rng, tracer=tr)
    a = tr.trace()
    assert len(a) == access_event_count(t) == oram_event_count(32)
    tr2 = Tracer()
    oram_access(t, WRITE_ADD, 30, 1.0, rng=rng, tracer=tr2)
    b = tr2.trace()
    assert np.array_equal(a.region, b.region) and np.array_equal(a.op, b.op)
    untree = a.region != Region.ORAM_TREE
    assert np.array_equal(a.cell[untree], b.cell[untree])


def test_stash_overflow_is_reported():
    rng = np.random.default_rng(5)
    t = oram_init(64, bucket_z=1, rng=rng, stash_size=0)
    with pytest.raises(StashOverflow, match="stash overflow"):
        for _ in range(200):
            oram_access(t, WRITE_ADD, int(rng.integers(64)), 1.0, rng)
    assert t.overflows >= 1


def test_oram_aggregate_matches_oracle():
    rng = np.random.default_rng(6)
    idx = np.stack([rng.choice(40, 5, replace=False) for _ in range(6)])
    val = rng.uniform(-1, 1, (6, 5)).astype(np.float32)
    inp = AggregationInput.from_arrays(idx, val, 40)
    assert oram_aggregate(inp, rng=rng).tobytes() == scatter_add_oracle(inp).tobytes()


def test_bad_arguments():
    t = oram_init(4, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        oram_access(t, READ_OP, 4)
    with pytest.raises(ValueError):
        oram_access(t, "delete", 0)
    with pytest.raises(ValueError):
        oram_init(0)

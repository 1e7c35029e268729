"""Batcher's bitonic sorting network over packed gradient cells.

The comparator sequence depends only on the array length, and every
comparator performs exactly one masked swap, so the access pattern of a sort
is the same for every input of a given length. Each network stage is applied
to the whole array at once through a strided ``(blocks, 2, j)`` view.

Cells are compared as whole 64-bit words. The index sits in the high 32 bits,
so word order refines index order and the sentinel index ``2**32 - 1`` sorts
after every real index. The network is not stable.
"""

import functools

import numpy as np

from .primitives import o_swap
from .trace import EVENT_DTYPE, READ, WRITE, record_interleaved

# sorts up to this length replay a cached copy of their whole event sequence
_CACHED_TRACE_MAX = 1 << 16

def is_power_of_two(n):
    return n >= 1 and n & (n - 1) == 0


def next_power_of_two(n):
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


def _check_length(length):
    if not is_power_of_two(length):
        raise ValueError("length must be padded to power of two")


def stages(length):
    """Yield ``(k, j)`` for each network stage: merge size ``k``, compare distance ``j``."""
    _check_length(length)
    k = 2
    while k <= length:
        j = k // 2
        while j >= 1:
            yield k, j
            j //= 2
        k *= 2


@functools.lru_cache(maxsize=512)
def _descending_rows(length, k, j):
    rows = length // (2 * j)
    if k >= length:
        out = np.zeros(rows, dtype=bool)
    else:
        out = ((np.arange(rows, dtype=np.int64) * 2 * j) & k) != 0
    out.flags.writeable = False
    return out


def stage_pairs(length, k, j):
    """Comparators of one stage as ``(lo, hi)`` arrays; afterwards ``cells[lo] <= cells[hi]``."""
    base = np.arange(length, dtype=np.int64).reshape(-1, 2, j)[:, 0, :]
    partner = base + j
    desc = _descending_rows(length, k, j)[:, None]
    lo = np.where(desc, partner, base).ravel()
    hi = np.where(desc, base, partner).ravel()
    return lo, hi


def comparator_schedule(length):
    """Full comparator list for ``length`` cells, in execution order."""
    pairs = []
    for k, j in stages(length):
        lo, hi = stage_pairs(length, k, j)
        pairs.extend(zip(lo.tolist(), hi.tolist()))
    return pairs


@functools.lru_cache(maxsize=16)
def _schedule_records(length, region):
    """Events of a whole sort: per comparator read lo, read hi, write lo, write hi."""
    parts = []
    for k, j in stages(length):
        lo, hi = stage_pairs(length, k, j)
        rec = np.empty((len(lo), 4), dtype=EVENT_DTYPE)
        rec["region"] = region
        rec["op"] = [READ, READ, WRITE, WRITE]
        rec["cell"] = np.stack([lo, hi, lo, hi], axis=1)
        parts.append(rec.ravel())
    out = np.concatenate(parts) if parts else np.empty(0, dtype=EVENT_DTYPE)
    out.flags.writeable = False
    return out


def comparator_count(length):
    """Closed form ``(m/2) * log2(m) * (log2(m) + 1) / 2``."""
    _check_length(length)
    p = length.bit_length() - 1
    return (length // 2) * p * (p + 1) // 2


def bitonic_sort(cells, order="by_index", counters=None):
    """Sort a :class:`~olive.trace.TracedArray` of uint64 cells ascending, in place.

    Each comparator logs read/read/write/write on its two cells, even when the
    masked swap leaves them unchanged.
    """
    if order != "by_index":
        raise ValueError(f"unsupported order {order!r}")
    data = cells.data
    m = len(data)
    _check_length(m)
    if data.dtype != np.uint64:
        raise TypeError("cells must be uint64 words")
    replay = cells.tracer is not None and cells.tracer.records and m <= _CACHED_TRACE_MAX
    half = np.empty(m // 2, dtype=np.uint64)
    swap = np.empty(m // 2, dtype=bool)
    mask = np.empty(m // 2, dtype=np.uint64)
    for k, j in stages(m):
        v = data.reshape(-1, 2, j)
        a = v[:, 0, :]
        b = v[:, 1, :]
        s = swap.reshape(-1, j)
        np.greater(a, b, out=s)
        if k < m:
            np.not_equal(s, _descending_rows(m, k, j)[:, None], out=s)
        # masked swap into preallocated buffers (same arithmetic as o_swap_arrays)
        t = half.reshape(-1, j)
        np.bitwise_xor(a, b, out=t)
        mk = mask.reshape(-1, j)
        np.copyto(mk, s, casting="unsafe")
        np.negative(mk, out=mk)
        t &= mk
        a ^= t
        b ^= t
        if cells.tracer is not None and not replay:
            lo, hi = stage_pairs(m, k, j)
            r = cells.region
            record_interleaved(
                cells.tracer,
                [(r, lo, READ), (r, hi, READ), (r, lo, WRITE), (r, hi, WRITE)],
            )
    if replay:
        cells.tracer.extend(_schedule_records(m, cells.region))
    if counters is not None:
        counters["comparators"] += comparator_count(m)


def bitonic_sort_reference(words):
    """Scalar comparator-by-comparator sort using :func:`o_swap` (slow; for tests)."""
    out = [int(w) for w in words]
    for lo, hi in comparator_schedule(len(out)):
        out[lo], out[hi] = o_swap(out[lo] > out[hi], out[lo], out[hi])
    return out


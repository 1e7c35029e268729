"""Server-side aggregation of sparsified gradients.

Four aggregators share one input layout, the concatenation of every client's
``k`` packed cells:

* :func:`linear_aggregate` scatters each cell into the dense result. Its
  accesses to the result follow the indices, so it leaks them.
* :func:`baseline_aggregate` sweeps every cacheline of the result for every
  input cell and uses a masked select for the single real update.
* :func:`advanced_aggregate` appends one zero cell per index, sorts,
  folds equal-index runs into their last cell, sorts again and reads the
  first ``d`` cells.
* :func:`grouped_advanced_aggregate` runs the advanced algorithm on groups of
  ``h`` clients and sums the group results into a dense accumulator.

Indices are 0-based. A cell carrying the sentinel index ``2**32 - 1`` is
padding and contributes nothing.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .osort import bitonic_sort, comparator_count, next_power_of_two
from .primitives import (
    SENTINEL_CELL,
    SENTINEL_INDEX,
    o_select,
    o_select_array,
    pack,
    pack_cells,
    unpack,
    unpack_cells,
)
from .trace import READ, WRITE, Region, TracedArray, record_interleaved

BATCH_MAGIC = b"OLV1"
BATCH_VERSION = 1
_RECORD = np.dtype([("index", "<u4"), ("value", "<f4")])


@dataclass
class SparseGradient:
    """One client's top-k update as parallel index/value arrays."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ValueError("indices and values must be 1-D of equal length")
        real = self.indices[self.indices != SENTINEL_INDEX]
        if np.any(real >= self.dim):
            raise ValueError("index out of range")
        if len(np.unique(real)) != len(real):
            raise ValueError("duplicate index within one client")

    @property
    def k(self):
        return len(self.indices)

    def norm(self):
        return float(np.linalg.norm(self.values.astype(np.float64)))

    def to_dense(self):
        out = np.zeros(self.dim, dtype=np.float32)
        real = self.indices != SENTINEL_INDEX
        out[self.indices[real]] = self.values[real]
        return out

    def padded(self, k):
        """Copy padded with ``(MAX, 0.0)`` cells up to length ``k``."""
        if self.k > k:
            raise ValueError(f"gradient has {self.k} entries, more than k={k}")
        extra = k - self.k
        return SparseGradient(
            np.concatenate([self.indices, np.full(extra, SENTINEL_INDEX, np.uint32)]),
            np.concatenate([self.values, np.zeros(extra, np.float32)]),
            self.dim,
        )


@dataclass
class AggregationInput:
    """Concatenated cells ``g_1 || ... || g_n``, each client contributing ``k``."""

    cells: np.ndarray
    n: int
    k: int
    d: int

    def __post_init__(self):
        self.cells = np.ascontiguousarray(self.cells, dtype=np.uint64)
        if len(self.cells) != self.n * self.k:
            raise ValueError(f"expected {self.n * self.k} cells, got {len(self.cells)}")

    @classmethod
    def from_arrays(cls, indices, values, d):
        indices = np.asarray(indices)
        values = np.asarray(values)
        if indices.ndim != 2 or indices.shape != values.shape:
            raise ValueError("indices and values must both be (n, k)")
        n, k = indices.shape
        return cls(pack_cells(indices.ravel(), values.ravel()), n, k, d)

    @classmethod
    def from_gradients(cls, grads, k=None, d=None):
        """Build from SparseGradients; shorter clients are sentinel-padded to ``k``."""
        grads = list(grads)
        if d is None:
            if not grads:
                raise ValueError("model dimension unknown for an empty batch")
            d = grads[0].dim
        if k is None:
            k = max((g.k for g in grads), default=0)
        if any(g.dim != d for g in grads):
            raise ValueError("gradients disagree on model dimension")
        padded = [g.padded(k) for g in grads]
        if not padded:
            return cls(np.empty(0, np.uint64), 0, k, d)
        idx = np.concatenate([g.indices for g in padded])
        val = np.concatenate([g.values for g in padded])
        return cls(pack_cells(idx, val), len(grads), k, d)

    def unpacked(self):
        return unpack_cells(self.cells)

    def client_slice(self, i):
        return slice(i * self.k, (i + 1) * self.k)


def _checked_unpack(inp):
    idx, val = inp.unpacked()
    real = idx != SENTINEL_INDEX
    if np.any(idx[real] >= inp.d):
        raise ValueError("index out of range")
    return idx, val, real


def scatter_add_oracle(inp, dtype=np.float32):
    """Naive reference: one Python-level ``out[idx] += val`` per cell, in input order."""
    out = np.zeros(inp.d, dtype=dtype)
    for word in inp.cells.tolist():
        idx, val = unpack(word)
        if idx == SENTINEL_INDEX:
            continue
        if idx >= inp.d:
            raise ValueError("index out of range")
        out[idx] = dtype(out[idx] + dtype(val))
    return out


def linear_aggregate(inp, tracer=None, counters=None):
    """Plain scatter-add. Logs (read G[q], read G*[idx], write G*[idx]) per cell."""
    idx, val, real = _checked_unpack(inp)
    out = np.zeros(inp.d, dtype=np.float32)
    np.add.at(out, idx[real].astype(np.int64), val[real])
    if tracer is not None:
        q = np.arange(len(idx))
        if real.all():
            record_interleaved(
                tracer,
                [(Region.G, q, READ), (Region.GSTAR, idx, READ), (Region.GSTAR, idx, WRITE)],
            )
        else:
            # padding cells are read from G but touch nothing else
            for qq in q.tolist():
                tracer.record(Region.G, qq, READ)
                if real[qq]:
                    tracer.record(Region.GSTAR, int(idx[qq]), READ)
                    tracer.record(Region.GSTAR, int(idx[qq]), WRITE)
    if counters is not None:
        counters["cells"] += len(idx)
    return out


def baseline_aggregate(inp, cacheline_c=1, tracer=None, counters=None):
    """Dummy-sweep aggregation, oblivious at cacheline granularity ``cacheline_c``.

    The result is stored as ``ceil(d / c)`` lines of ``c`` floats. An input cell
    with index ``idx`` visits slot ``idx % c`` of every line and keeps the sum
    only where the slot position equals ``idx``. Accumulation order matches
    :func:`linear_aggregate`, so the two agree bitwise.
    """
    c = int(cacheline_c)
    if c < 1:
        raise ValueError("cacheline_c must be positive")
    idx, val, _ = _checked_unpack(inp)
    lines = -(-inp.d // c)
    gstar = np.zeros(lines * c, dtype=np.float32)
    grid = gstar.reshape(lines, c)
    line_start = np.arange(lines, dtype=np.int64) * c
    G = TracedArray(Region.G, inp.cells, tracer)
    idx_list = idx.tolist()
    val_list = val.tolist()
    for q in range(len(idx_list)):
        G.log(q, READ)
        target = idx_list[q]
        off = target % c
        col = grid[:, off]
        flag = (line_start + off) == target
        grid[:, off] = o_select_array(flag, col + np.float32(val_list[q]), col)
        if tracer is not None:
            pos = line_start + off
            record_interleaved(tracer, [(Region.GSTAR, pos, READ), (Region.GSTAR, pos, WRITE)])
    if counters is not None:
        counters["selects"] += len(idx_list) * lines
    return gstar[: inp.d].copy()


def oblivious_fold(cells):
    """Collapse runs of equal index in a sorted cell array into their last cell.

    Equivalent to the scalar pass in :func:`fold_reference`: every cell whose
    successor has the same index becomes ``(MAX, 0.0)``, and the last cell of
    each run carries the run's sum. Sums are formed in float64 with a
    segmented Hillis-Steele scan (shift-and-masked-add, no data-dependent
    addressing) and rounded once to float32. Logged as one linear pass:
    read W[0], then (read W[p], write W[p-1]) for p >= 1, then write W[m-1].
    """
    data = cells.data
    m = len(data)
    keys = data >> np.uint64(32)
    scan = (data & np.uint64(0xFFFFFFFF)).astype(np.uint32).view(np.float32).astype(np.float64)
    shift = 1
    while shift < m:
        same = keys[shift:] == keys[:-shift]
        scan[shift:] += np.where(same, scan[:-shift], 0.0)
        shift *= 2
    folded = np.empty(m, dtype=bool)
    np.equal(keys[1:], keys[:-1], out=folded[:-1])
    folded[-1] = False
    out = pack_cells(
        np.where(folded, np.uint64(SENTINEL_INDEX), keys),
        np.where(folded, 0.0, scan).astype(np.float32),
    )
    data[:] = out
    if cells.tracer is not None:
        r = cells.region
        cells.log(0, READ)
        if m > 1:
            p = np.arange(1, m)
            record_interleaved(cells.tracer, [(r, p, READ), (r, p - 1, WRITE)])
        cells.log(m - 1, WRITE)


def fold_reference(words):
    """Cell-by-cell fold with :func:`o_select`, following the scalar loop literally."""
    words = [int(w) for w in words]
    out = list(words)
    idx, val = unpack(words[0])
    for p in range(1, len(words)):
        idx2, val2 = unpack(words[p])
        flag = idx2 == idx
        out[p - 1] = o_select(flag, SENTINEL_CELL, pack(idx, val))
        run = o_select(flag, pack(idx, np.float32(val) + np.float32(val2)), pack(idx2, val2))
        idx, val = unpack(run)
    out[-1] = pack(idx, val)
    return out


def _advanced_group(G, start, stop, d, tracer, counters):
    """Advanced algorithm over cells ``G[start:stop]``; returns the sorted work array."""
    nk = stop - start
    total = nk + d
    m = next_power_of_two(total)
    W = TracedArray(Region.WORK, np.empty(m, dtype=np.uint64), tracer)
    W.data[:nk] = G.data[start:stop]
    W.data[nk:total] = pack_cells(np.arange(d), np.zeros(d, np.float32))
    W.data[total:] = SENTINEL_CELL
    if tracer is not None:
        q = np.arange(nk)
        record_interleaved(tracer, [(Region.G, q + start, READ), (Region.WORK, q, WRITE)])
        W.log(np.arange(nk, m), WRITE)
    bitonic_sort(W, counters=counters)
    oblivious_fold(W)
    bitonic_sort(W, counters=counters)
    return W


def _grouped(inp, h, tracer, counters):
    _checked_unpack(inp)
    G = TracedArray(Region.G, inp.cells, tracer)
    d, k = inp.d, inp.k
    acc = np.zeros(d, dtype=np.float64)  # enclave-resident accumulator
    groups = max(1, math.ceil(inp.n / h))
    j = np.arange(d)
    for g in range(groups):
        start = g * h * k
        stop = min(inp.n, (g + 1) * h) * k
        W = _advanced_group(G, start, stop, d, tracer, counters)
        _, vals = unpack_cells(W.data[:d])
        acc += vals
        if tracer is not None:
            record_interleaved(
                tracer,
                [(Region.WORK, j, READ), (Region.GSTAR, j, READ), (Region.GSTAR, j, WRITE)],
            )
    if counters is not None:
        counters["groups"] += groups
    return acc.astype(np.float32)


def advanced_aggregate(inp, tracer=None, counters=None):
    """Sort-and-fold aggregation in O((nk+d) log^2(nk+d)), fully oblivious."""
    return _grouped(inp, max(inp.n, 1), tracer, counters)


def grouped_advanced_aggregate(inp, group_size_h, tracer=None, counters=None):
    """Advanced aggregation over consecutive groups of ``group_size_h`` clients."""
    if group_size_h < 1:
        raise ValueError("group size must be positive")
    return _grouped(inp, int(group_size_h), tracer, counters)


def average_and_perturb(agg, n_expected, noise_std, rng, tracer=None):
    """``(agg + N(0, noise_std^2)) / n_expected`` per coordinate.

    Noise for all ``d`` coordinates is drawn in one fixed-length call, then two
    linear sweeps over G* add it and divide.
    """
    if n_expected <= 0:
        raise ValueError("n_expected must be positive")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    agg = np.asarray(agg, dtype=np.float32)
    z = rng.normal(0.0, noise_std, size=len(agg))
    out = ((agg.astype(np.float64) + z) / n_expected).astype(np.float32)
    if tracer is not None:
        j = np.arange(len(agg))
        tracer.record(Region.GSTAR, j, WRITE)
        tracer.record(Region.GSTAR, j, WRITE)
    return out


AGGREGATORS = ("linear", "baseline", "advanced", "grouped", "oram")


def aggregate(inp, algo, *, cacheline_c=1, group_h=None, tracer=None, counters=None, rng=None):
    """Dispatch by name to one of :data:`AGGREGATORS`."""
    if algo == "linear":
        return linear_aggregate(inp, tracer, counters)
    if algo == "baseline":
        return baseline_aggregate(inp, cacheline_c, tracer, counters)
    if algo == "advanced":
        return advanced_aggregate(inp, tracer, counters)
    if algo == "grouped":
        if group_h is None:
            raise ValueError("grouped aggregation needs a group size h")
        return grouped_advanced_aggregate(inp, group_h, tracer, counters)
    if algo == "oram":
        from .oram import oram_aggregate

        return oram_aggregate(inp, tracer=tracer, rng=rng, counters=counters)
    raise ValueError(f"unknown aggregator {algo!r}")


def advanced_event_count(n, k, d, h=None):
    h = n if h is None else h
    total = 0
    groups = max(1, math.ceil(n / h))
    for g in range(groups):
        nk = (min(n, (g + 1) * h) - g * h) * k
        m = next_power_of_two(nk + d)
        total += 2 * nk + (m - nk) + 8 * comparator_count(m) + 2 * m + 3 * d
    return total


def expected_event_count(algo, n, k, d, cacheline_c=1, group_h=None, averaging=False):
    """Closed-form trace length for the deterministic aggregators."""
    if algo == "linear":
        count = 3 * n * k
    elif algo == "baseline":
        count = n * k * (1 + 2 * -(-d // cacheline_c))
    elif algo == "advanced":
        count = advanced_event_count(n, k, d)
    elif algo == "grouped":
        count = advanced_event_count(n, k, d, group_h)
    else:
        raise ValueError(f"no closed form for {algo!r}")
    return count + (2 * d if averaging else 0)


def write_batch(path, inp):
    """OLV1 batch: magic, u32 version, u32 n, u32 k, u32 d, then n*k (u32 index, f32 value)."""
    idx, val = inp.unpacked()
    rec = np.empty(len(idx), dtype=_RECORD)
    rec["index"] = idx
    rec["value"] = val
    with open(path, "wb") as f:
        f.write(BATCH_MAGIC + struct.pack("<IIII", BATCH_VERSION, inp.n, inp.k, inp.d))
        f.write(rec.tobytes())


def read_batch(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != BATCH_MAGIC:
        raise ValueError("not an OLV1 gradient batch")
    version, n, k, d = struct.unpack("<IIII", raw[4:20])
    if version != BATCH_VERSION:
        raise ValueError(f"unsupported batch version {version}")
    rec = np.frombuffer(raw[20:], dtype=_RECORD)
    if len(rec) != n * k:
        raise ValueError("truncated gradient batch")
    return AggregationInput(pack_cells(rec["index"], rec["value"]), n, k, d)

"""Instrumented memory regions and access-trace comparison.

Every read or write that an aggregation algorithm performs on enclave memory
goes through a :class:`TracedArray`, which appends one ``(region, cell, op)``
event to a sink. Deterministic algorithms are fully oblivious exactly when the
traces of any two same-shape inputs are identical, so :func:`trace_equal` is
the executable form of that property.
"""

import collections
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

READ = 0
WRITE = 1

TRACE_MAGIC = b"OLVT"
TRACE_VERSION = 1
EVENT_DTYPE = np.dtype([("region", "<u1"), ("op", "<u1"), ("cell", "<u8")])


class Region(enum.IntEnum):
    G = 0  # concatenated client gradients
    GSTAR = 1  # aggregated dense gradient
    WORK = 2  # sort/fold working buffer
    ORAM_TREE = 3
    ORAM_POSMAP = 4
    ORAM_STASH = 5


class AccessEvent(NamedTuple):
    region: int
    cell: int
    op: int


class AccessTrace:
    """An ordered event sequence plus the observation granularity."""

    def __init__(self, region, cell, op, granularity=1):
        self.region = np.asarray(region, dtype=np.uint8)
        self.cell = np.asarray(cell, dtype=np.uint64)
        self.op = np.asarray(op, dtype=np.uint8)
        if not (len(self.region) == len(self.cell) == len(self.op)):
            raise ValueError("event arrays differ in length")
        if granularity < 1:
            raise ValueError("granularity must be positive")
        self.granularity = int(granularity)

    @classmethod
    def empty(cls):
        return cls([], [], [])

    def __len__(self):
        return len(self.cell)

    def __iter__(self):
        for r, c, o in zip(self.region.tolist(), self.cell.tolist(), self.op.tolist()):
            yield AccessEvent(r, c, o)

    def __repr__(self):
        return f"AccessTrace({len(self)} events, granularity={self.granularity})"

    def buckets(self, granularity=None):
        c = self.granularity if granularity is None else granularity
        if c == 1:
            return self.cell
        return self.cell // np.uint64(c)

    def bucketed(self, granularity):
        """Trace with cell ids replaced by ``cell // granularity``."""
        return AccessTrace(self.region, self.buckets(granularity), self.op, granularity)

    def to_records(self, granularity=None):
        rec = np.empty(len(self), dtype=EVENT_DTYPE)
        rec["region"] = self.region
        rec["op"] = self.op
        rec["cell"] = self.buckets(granularity)
        return rec

    def canonical_bytes(self, granularity=None):
        return self.to_records(granularity).tobytes()

    def count(self, region=None, op=None):
        mask = np.ones(len(self), dtype=bool)
        if region is not None:
            mask &= self.region == region
        if op is not None:
            mask &= self.op == op
        return int(mask.sum())


class Tracer:
    """Single-writer sink that keeps events in memory.

    Events arrive in chunks of numpy arrays so bulk operations such as a whole
    sorting-network stage cost one append. Pass ``spill_to`` to stream events
    to an OLVT file instead; :meth:`trace` then reads the file back.
    """

    records = True

    def __init__(self, spill_to=None):
        self._chunks = []
        self._spill = None
        self._spill_path = None
        if spill_to is not None:
            self._spill_path = Path(spill_to)
            self._spill = open(self._spill_path, "wb")
            self._spill.write(TRACE_MAGIC + struct.pack("<I", TRACE_VERSION))

    def record(self, region, cells, op):
        cells = np.atleast_1d(np.asarray(cells, dtype=np.uint64))
        n = len(cells)
        rec = np.empty(n, dtype=EVENT_DTYPE)
        rec["region"] = region
        rec["op"] = op
        rec["cell"] = cells
        self.extend(rec)

    def extend(self, rec):
        """Append pre-built ``EVENT_DTYPE`` records."""
        if self._spill is not None:
            self._spill.write(rec.tobytes())
        else:
            self._chunks.append(rec)

    def __len__(self):
        if self._spill is not None:
            self._spill.flush()
            return (self._spill.tell() - 8) // EVENT_DTYPE.itemsize
        return sum(len(c) for c in self._chunks)

    def trace(self):
        if self._spill is not None:
            self._spill.flush()
            return read_trace(self._spill_path)
        if not self._chunks:
            return AccessTrace.empty()
        # byte-level concatenation: much faster than merging structured arrays
        raw = np.concatenate([np.ascontiguousarray(c).view(np.uint8) for c in self._chunks])
        rec = raw.view(EVENT_DTYPE)
        self._chunks = [rec]
        return AccessTrace(rec["region"], rec["cell"], rec["op"])

    def close(self):
        if self._spill is not None:
            self._spill.close()
            self._spill = None


@dataclass
class CountingTracer:
    """Sink that only counts events, per (region, op)."""

    counts: collections.Counter = field(default_factory=collections.Counter)
    records = False

    def record(self, region, cells, op):
        op = np.asarray(op)
        n = np.size(cells)
        if op.ndim == 0:
            self.counts[(int(region), int(op))] += n
        else:
            writes = int(op.sum())
            self.counts[(int(region), WRITE)] += writes
            self.counts[(int(region), READ)] += n - writes

    def __len__(self):
        return sum(self.counts.values())


class TracedArray:
    """A numpy-backed region whose element accesses are logged to a tracer.

    ``tracer=None`` disables logging; the arithmetic is unchanged.
    """

    def __init__(self, region, data, tracer=None):
        self.region = int(region)
        self.data = data
        self.tracer = tracer

    def __len__(self):
        return len(self.data)

    def log(self, cells, op):
        if self.tracer is not None:
            self.tracer.record(self.region, cells, op)

    def read(self, i):
        self.log(i, READ)
        return self.data[i]

    def write(self, i, value):
        self.log(i, WRITE)
        self.data[i] = value

    def read_many(self, cells):
        cells = np.asarray(cells)
        self.log(cells, READ)
        return self.data[cells]

    def write_many(self, cells, values):
        cells = np.asarray(cells)
        self.log(cells, WRITE)
        self.data[cells] = values


def record_interleaved(tracer, pattern):
    """Log events that alternate between regions, e.g. read G / read G* / write G*.

    ``pattern`` is a list of ``(region, cells, op)`` with equal-length ``cells``;
    event ``j`` of every entry is emitted before event ``j + 1`` of any entry.
    """
    if tracer is None:
        return
    if not tracer.records:
        for region, cells, op in pattern:
            tracer.record(region, cells, op)
        return
    width = len(pattern)
    n = len(pattern[0][1])
    rec = np.empty((n, width), dtype=EVENT_DTYPE)
    for j, (region, cells, op) in enumerate(pattern):
        rec["region"][:, j] = region
        rec["op"][:, j] = op
        rec["cell"][:, j] = cells
    tracer.extend(rec.ravel())


def first_difference(a, b, granularity=1):
    """Offset of the first differing bucketed event, or None if the traces match."""
    ra = a.to_records(granularity)
    rb = b.to_records(granularity)
    n = min(len(ra), len(rb))
    diff = np.flatnonzero(ra[:n] != rb[:n])
    if len(diff):
        return int(diff[0])
    if len(ra) != len(rb):
        return n
    return None


def trace_equal(a, b, granularity=1):
    """True iff the ``(region, cell // granularity, op)`` sequences are identical."""
    if granularity < 1:
        raise ValueError("granularity must be positive")
    if len(a) != len(b):
        return False
    return (
        np.array_equal(a.region, b.region)
        and np.array_equal(a.op, b.op)
        and np.array_equal(a.buckets(granularity), b.buckets(granularity))
    )


def trace_statistical_distance(sample_a, sample_b, granularity=1):
    """Total-variation distance between two empirical trace distributions."""
    if not sample_a or not sample_b:
        raise ValueError("empty trace sample")
    ca = collections.Counter(t.canonical_bytes(granularity) for t in sample_a)
    cb = collections.Counter(t.canonical_bytes(granularity) for t in sample_b)
    na, nb = len(sample_a), len(sample_b)
    return 0.5 * sum(abs(ca[key] / na - cb[key] / nb) for key in ca.keys() | cb.keys())


@dataclass(frozen=True)
class LinearLayout:
    """Shape of a Linear aggregation run: n users, k cells each, model size d."""

    n: int
    k: int
    d: int


def leaked_indices(t, layout, granularity=None):
    """Per-user sets of G* cells written while that user's segment was processed.

    The trace must come from the Linear aggregator: ``3nk`` events, optionally
    followed by the ``2d`` averaging/perturbation events. Cells are reported
    at ``granularity`` (default: the trace's own).
    """
    n, k, d = layout.n, layout.k, layout.d
    body = 3 * n * k
    if len(t) not in (body, body + 2 * d):
        raise ValueError("trace shape mismatch")
    region = t.region[:body].reshape(n, k, 3)
    op = t.op[:body].reshape(n, k, 3)
    if not (
        np.all(region[:, :, 0] == Region.G)
        and np.all(region[:, :, 1:] == Region.GSTAR)
        and np.all(op[:, :, :2] == READ)
        and np.all(op[:, :, 2] == WRITE)
    ):
        raise ValueError("trace shape mismatch")
    cells = t.buckets(granularity)[:body].reshape(n, k, 3)[:, :, 2]
    return [set(row.tolist()) for row in cells]


def write_trace(path, trace, granularity=None):
    """Write the OLVT stream: magic, u32 version, then (u8 region, u8 op, u64 cell) records."""
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC + struct.pack("<I", TRACE_VERSION))
        f.write(trace.to_records(granularity).tobytes())


def read_trace(path):
    raw = Path(path).read_bytes()
    if raw[:4] != TRACE_MAGIC:
        raise ValueError("not an OLVT trace file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != TRACE_VERSION:
        raise ValueError(f"unsupported trace version {version}")
    rec = np.frombuffer(raw[8:], dtype=EVENT_DTYPE)
    return AccessTrace(rec["region"], rec["cell"], rec["op"])

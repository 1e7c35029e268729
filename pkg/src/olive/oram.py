"""PathORAM baseline with an in-enclave linear-scan position map.

Non-recursive: the position map is one array scanned in full, with a masked
select, on every access. The stash has a fixed number of persistent slots
(20 by default) and is also scanned in full. Each access reads one
root-to-leaf path, remaps the block to a fresh uniform leaf, evicts greedily
deepest-first back onto the same path and writes the path back.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .primitives import SENTINEL_INDEX, o_select_array
from .trace import READ, WRITE, Region, record_interleaved

DUMMY = np.uint32(0xFFFFFFFF)
READ_OP = "read"
WRITE_ADD = "write_add"


class StashOverflow(RuntimeError):
    pass


@dataclass
class PathOram:
    """Tree of ``2**(L+1) - 1`` buckets with ``Z`` slots each, plus stash and map."""

    capacity: int
    height: int
    bucket_z: int
    stash_size: int
    tree_addr: np.ndarray
    tree_leaf: np.ndarray
    tree_val: np.ndarray
    posmap: np.ndarray
    stash_addr: np.ndarray
    stash_leaf: np.ndarray
    stash_val: np.ndarray
    overflows: int = 0
    accesses: int = 0
    leaf_log: list = field(default_factory=list)
    _cells: np.ndarray = field(default=None, repr=False)

    @property
    def n_leaves(self):
        return 1 << self.height

    @property
    def n_buckets(self):
        return (1 << (self.height + 1)) - 1

    def path(self, leaf):
        """Bucket ids from root (level 0) to the leaf bucket (level L)."""
        L = self.height
        return np.array([(1 << lv) - 1 + (leaf >> (L - lv)) for lv in range(L + 1)], dtype=np.int64)

    def stash_occupancy(self):
        return int(np.count_nonzero(self.stash_addr != DUMMY))

    def check_invariant(self):
        """True iff every real block sits on its assigned leaf's path or in the stash."""
        real = self.tree_addr != DUMMY
        buckets, slots = np.nonzero(real)
        for b, s in zip(buckets.tolist(), slots.tolist()):
            addr = int(self.tree_addr[b, s])
            leaf = int(self.posmap[addr])
            if int(self.tree_leaf[b, s]) != leaf or b not in self.path(leaf):
                return False
        seen = np.concatenate([self.tree_addr[real], self.stash_addr[self.stash_addr != DUMMY]])
        return sorted(seen.tolist()) == list(range(self.capacity))


def oram_init(capacity, bucket_z=4, rng=None, stash_size=20):
    """Smallest tree with ``2**L >= capacity`` leaves; every block zero, leaves uniform."""
    if capacity < 1:
        raise ValueError("capacity must be positive")
    rng = np.random.default_rng() if rng is None else rng
    L = tree_height(capacity)
    n_buckets = (1 << (L + 1)) - 1
    tree_addr = np.full((n_buckets, bucket_z), DUMMY, dtype=np.uint32)
    tree_leaf = np.zeros((n_buckets, bucket_z), dtype=np.uint32)
    tree_val = np.zeros((n_buckets, bucket_z), dtype=np.float32)
    posmap = rng.integers(0, 1 << L, size=capacity).astype(np.uint32)
    fill = np.zeros(n_buckets, dtype=np.int64)
    stash = []
    # setup placement is not part of the observed protocol
    for addr, leaf in enumerate(posmap.tolist()):
        b = (1 << L) - 1 + leaf
        while True:
            if fill[b] < bucket_z:
                tree_addr[b, fill[b]] = addr
                tree_leaf[b, fill[b]] = leaf
                fill[b] += 1
                break
            if b == 0:
                stash.append((addr, leaf))
                break
            b = (b - 1) // 2
    if len(stash) > stash_size:
        raise StashOverflow("stash overflow")
    stash_addr = np.full(stash_size, DUMMY, dtype=np.uint32)
    stash_leaf = np.zeros(stash_size, dtype=np.uint32)
    for i, (addr, leaf) in enumerate(stash):
        stash_addr[i] = addr
        stash_leaf[i] = leaf
    return PathOram(
        capacity=capacity,
        height=L,
        bucket_z=bucket_z,
        stash_size=stash_size,
        tree_addr=tree_addr,
        tree_leaf=tree_leaf,
        tree_val=tree_val,
        posmap=posmap,
        stash_addr=stash_addr,
        stash_leaf=stash_leaf,
        stash_val=np.zeros(stash_size, dtype=np.float32),
    )


def tree_height(capacity):
    return math.ceil(math.log2(capacity)) if capacity > 1 else 0


def access_event_count(tree):
    """Events per access: map scan, path read, working-stash scan, path write."""
    return oram_event_count(tree.capacity, tree.bucket_z, tree.stash_size)


def oram_event_count(capacity, bucket_z=4, stash_size=20, accesses=1):
    path_slots = bucket_z * (tree_height(capacity) + 1)
    return accesses * (2 * capacity + 2 * path_slots + 2 * (stash_size + path_slots))


def oram_access(tree, op, addr, delta=0.0, rng=None, tracer=None):
    """One PathORAM access; returns the block's value before the update.

    ``write_add`` adds ``delta`` to the block. On stash overflow the access is
    completed, the overflow counted and :class:`StashOverflow` raised.
    """
    if not 0 <= addr < tree.capacity:
        raise ValueError("address out of range")
    if op not in (READ_OP, WRITE_ADD):
        raise ValueError(f"unknown op {op!r}")
    rng = np.random.default_rng() if rng is None else rng
    L, Z, S = tree.height, tree.bucket_z, tree.stash_size
    new_leaf = np.uint32(rng.integers(0, 1 << L))

    # position map: full scan with a masked read and a masked remap
    if tree._cells is None or len(tree._cells) != tree.capacity:
        tree._cells = np.arange(tree.capacity, dtype=np.uint32)
    hit = tree._cells == np.uint32(addr)
    leaf = int(np.max(tree.posmap, where=hit, initial=0))
    np.copyto(tree.posmap, new_leaf, where=hit)
    tree.leaf_log.append(leaf)

    path = tree.path(leaf)
    slot_cells = (path[:, None] * Z + np.arange(Z)).ravel()

    w_addr = np.concatenate([tree.stash_addr, tree.tree_addr[path].ravel()])
    w_leaf = np.concatenate([tree.stash_leaf, tree.tree_leaf[path].ravel()])
    w_val = np.concatenate([tree.stash_val, tree.tree_val[path].ravel()])

    # working stash: full scan, masked read/update/remap
    found = w_addr == addr
    value = float(np.sum(o_select_array(found, w_val, np.float32(0))))
    add = np.float32(delta if op == WRITE_ADD else 0.0)
    w_val = o_select_array(found, w_val + add, w_val)
    w_leaf = o_select_array(found, new_leaf, w_leaf)

    # greedy eviction, deepest level first: blocks ranked by how deep they may go
    real = w_addr != DUMMY
    common = np.full(len(w_leaf), L, dtype=np.int64)
    diff = (w_leaf ^ np.uint32(leaf)).astype(np.int64)
    nz = diff > 0
    common[nz] = L - np.floor(np.log2(diff[nz])).astype(np.int64) - 1
    common[~real] = -1
    order = np.argsort(-common, kind="stable")
    at_least = np.cumsum(np.bincount(common[real], minlength=L + 1)[::-1])[::-1].tolist()
    per_level = [0] * (L + 1)
    placed = 0
    for lv in range(L, -1, -1):
        per_level[lv] = min(Z, at_least[lv] - placed)
        placed += per_level[lv]
    ranked = order[:placed]
    levels = np.repeat(np.arange(L, -1, -1), per_level[::-1])
    starts = np.cumsum([0] + per_level[::-1])[:-1]
    slots = np.arange(placed) - np.repeat(starts, per_level[::-1])
    flat = levels * Z + slots
    out_addr = np.full((L + 1) * Z, DUMMY, dtype=np.uint32)
    out_leaf = np.zeros((L + 1) * Z, dtype=np.uint32)
    out_val = np.zeros((L + 1) * Z, dtype=np.float32)
    out_addr[flat] = w_addr[ranked]
    out_leaf[flat] = w_leaf[ranked]
    out_val[flat] = w_val[ranked]
    out_addr = out_addr.reshape(L + 1, Z)
    out_leaf = out_leaf.reshape(L + 1, Z)
    out_val = out_val.reshape(L + 1, Z)
    real[ranked] = False
    tree.tree_addr[path] = out_addr
    tree.tree_leaf[path] = out_leaf
    tree.tree_val[path] = out_val

    left = np.flatnonzero(real)
    keep = left[:S]
    tree.stash_addr = np.full(S, DUMMY, dtype=np.uint32)
    tree.stash_leaf = np.zeros(S, dtype=np.uint32)
    tree.stash_val = np.zeros(S, dtype=np.float32)
    tree.stash_addr[: len(keep)] = w_addr[keep]
    tree.stash_leaf[: len(keep)] = w_leaf[keep]
    tree.stash_val[: len(keep)] = w_val[keep]
    tree.accesses += 1

    if tracer is not None:
        cells = np.arange(tree.capacity)
        record_interleaved(
            tracer, [(Region.ORAM_POSMAP, cells, READ), (Region.ORAM_POSMAP, cells, WRITE)]
        )
        tracer.record(Region.ORAM_TREE, slot_cells, READ)
        stash_cells = np.arange(len(w_addr))
        record_interleaved(
            tracer, [(Region.ORAM_STASH, stash_cells, READ), (Region.ORAM_STASH, stash_cells, WRITE)]
        )
        tracer.record(Region.ORAM_TREE, slot_cells, WRITE)

    if len(left) > S:
        tree.overflows += 1
        # blocks that did not fit are kept beyond the fixed slots so data is not lost
        extra = left[S:]
        tree.stash_addr = np.concatenate([tree.stash_addr, w_addr[extra]])
        tree.stash_leaf = np.concatenate([tree.stash_leaf, w_leaf[extra]])
        tree.stash_val = np.concatenate([tree.stash_val, w_val[extra]])
        raise StashOverflow("stash overflow")
    return value


def oram_aggregate(inp, tracer=None, rng=None, bucket_z=4, stash_size=20, counters=None):
    """d-slot ORAM, one ``write_add`` per input cell, then ``d`` reads.

    Padding cells become a ``write_add`` of 0.0 to address 0 so every cell costs
    exactly one access.
    """
    return oram_aggregate_tree(inp, tracer, rng, bucket_z, stash_size, counters)[0]


def oram_aggregate_tree(inp, tracer=None, rng=None, bucket_z=4, stash_size=20, counters=None):
    """As :func:`oram_aggregate`, also returning the tree (for its leaf log)."""
    rng = np.random.default_rng() if rng is None else rng
    idx, val = inp.unpacked()
    pad = idx == SENTINEL_INDEX
    if np.any(idx[~pad] >= inp.d):
        raise ValueError("index out of range")
    addrs = o_select_array(pad, np.uint32(0), idx).tolist()
    deltas = o_select_array(pad, np.float32(0), val).tolist()
    tree = oram_init(inp.d, bucket_z, rng, stash_size)
    for a, v in zip(addrs, deltas):
        oram_access(tree, WRITE_ADD, a, v, rng, tracer)
    out = np.array([oram_access(tree, READ_OP, a, 0.0, rng, tracer) for a in range(inp.d)], dtype=np.float32)
    if counters is not None:
        counters["oram_accesses"] += tree.accesses
        counters["stash_overflows"] += tree.overflows
    return out, tree

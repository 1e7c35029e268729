"""Branchless conditional select/swap and the packed gradient cell.

A cell is a 64-bit word: the high 32 bits hold the parameter index, the low
32 bits hold the IEEE-754 bit pattern of the float32 value. One select or swap
therefore moves a whole (index, value) pair.

The scalar functions mirror a CMOV sequence with bit masks; the ``*_array``
versions apply the same masking element-wise to numpy arrays.
"""

import struct

import numpy as np

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

SENTINEL_INDEX = MASK32
SENTINEL_CELL = SENTINEL_INDEX << 32  # (MAX, 0.0)


def o_select(cond, on_true, on_false):
    """Return ``on_true`` if ``cond`` else ``on_false`` without branching on ``cond``."""
    mask = (-int(cond)) & MASK64
    return (on_false ^ ((on_true ^ on_false) & mask)) & MASK64


def o_swap(cond, a, b):
    """Return ``(b, a)`` if ``cond`` else ``(a, b)``, branch-free."""
    mask = (-int(cond)) & MASK64
    t = (a ^ b) & mask
    return (a ^ t) & MASK64, (b ^ t) & MASK64


def _as_bits(x):
    x = np.asarray(x)
    if x.dtype.kind == "f":
        return x.view(np.dtype(f"u{x.dtype.itemsize}"))
    return x


def o_select_array(cond, on_true, on_false):
    """Element-wise ``o_select`` over numpy arrays (any 32/64-bit dtype)."""
    on_true = np.asarray(on_true)
    on_false = np.asarray(on_false)
    dtype = np.result_type(on_true, on_false)
    t = _as_bits(on_true.astype(dtype, copy=False))
    f = _as_bits(on_false.astype(dtype, copy=False))
    mask = np.negative(np.asarray(cond).astype(t.dtype))
    out = f ^ ((t ^ f) & mask)
    return out.view(dtype)


def o_swap_arrays(cond, a, b):
    """In-place element-wise ``o_swap`` of two equal-shape uint64 array views."""
    t = np.bitwise_xor(a, b)
    t &= np.negative(np.asarray(cond).astype(np.uint64))
    a ^= t
    b ^= t


def pack(index, value):
    """Pack one ``(index, float32 value)`` pair into a 64-bit word."""
    (bits,) = struct.unpack("<I", struct.pack("<f", value))
    return ((int(index) & MASK32) << 32) | bits


def unpack(word):
    (value,) = struct.unpack("<f", struct.pack("<I", word & MASK32))
    return word >> 32, value


def pack_cells(indices, values):
    indices = np.asarray(indices, dtype=np.uint64)
    bits = np.asarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)
    return (indices << np.uint64(32)) | bits


def unpack_cells(cells):
    cells = np.asarray(cells, dtype=np.uint64)
    indices = (cells >> np.uint64(32)).astype(np.uint32)
    values = (cells & np.uint64(MASK32)).astype(np.uint32).view(np.float32)
    return indices, values

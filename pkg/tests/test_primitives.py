import ast
import inspect
import struct

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from olive import primitives as P

words = st.integers(0, P.MASK64)


@given(st.booleans(), words, words)
def test_o_select_matches_conditional(cond, a, b):
    assert P.o_select(cond, a, b) == (a if cond else b)


@given(st.booleans(), words, words)
def test_o_swap_matches_conditional(cond, a, b):
    assert P.o_swap(cond, a, b) == ((b, a) if cond else (a, b))


def test_scalar_primitives_have_no_branches():
    for fn in (P.o_select, P.o_swap):
        tree = ast.parse(inspect.getsource(fn))
        banned = (ast.If, ast.IfExp, ast.While, ast.For, ast.BoolOp, ast.Match)
        assert not any(isinstance(node, banned) for node in ast.walk(tree)), fn.__name__


@given(st.integers(0, P.MASK32), st.floats(width=32, allow_nan=False))
def test_pack_roundtrip(index, value):
    word = P.pack(index, value)
    assert word >> 32 == index
    i, v = P.unpack(word)
    assert i == index
    assert struct.pack("<f", v) == struct.pack("<f", value)


def test_sentinel_cell():
    assert P.unpack(P.SENTINEL_CELL) == (2**32 - 1, 0.0)
    assert P.pack(5, 1.5) < P.SENTINEL_CELL


def test_pack_cells_matches_scalar():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 2**32, 50, dtype=np.uint64)
    val = rng.normal(size=50).astype(np.float32)
    cells = P.pack_cells(idx, val)
    assert cells.tolist() == [P.pack(int(i), float(v)) for i, v in zip(idx, val)]
    i2, v2 = P.unpack_cells(cells)
    assert np.array_equal(i2, idx.astype(np.uint32))
    assert np.array_equal(v2.view(np.uint32), val.view(np.uint32))


def test_o_select_array_floats_and_ints():
    cond = np.array([True, False, True])
    a = np.array([1.5, 2.5, -0.0], dtype=np.float32)
    b = np.array([9.0, 8.0, 7.0], dtype=np.float32)
    out = P.o_select_array(cond, a, b)
    assert out.dtype == np.float32
    assert out.view(np.uint32).tolist() == np.array([1.5, 8.0, -0.0], np.float32).view(np.uint32).tolist()
    u = P.o_select_array(cond, np.uint64(7), np.arange(3, dtype=np.uint64))
    assert u.tolist() == [7, 1, 7]


def test_o_swap_arrays_in_place():
    a = np.array([1, 2, 3], dtype=np.uint64)
    b = np.array([4, 5, 6], dtype=np.uint64)
    P.o_swap_arrays(np.array([True, False, True]), a, b)
    assert a.tolist() == [4, 2, 6]
    assert b.tolist() == [1, 5, 3]

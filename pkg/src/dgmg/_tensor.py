"""Batched sum-factorization kernels.

Layout conventions used throughout the package:

- node (coefficient) tensors are *canonical*: shape (B, n_d, ..., n_1) with
  direction 1 on the last axis, so that C-order flattening reproduces the
  lexicographic index i = sum_t i_t (k+1)^(t-1);
- quadrature-point tensors are *reversed*: shape (B, q_1, ..., q_d).

`forward_*` kernels map canonical to reversed, `backward_*` kernels are their
exact adjoints (reversed to canonical).  All heavy intermediates are taken
from a Workspace so repeated applications reuse memory; on this class of
machine, first-touch page faults dominate fresh allocations.
"""

from __future__ import annotations

import numpy as np


class Workspace:
    """Named, growable scratch buffers (one pool per key)."""

    def __init__(self):
        self._pools: dict[str, np.ndarray] = {}

    def get(self, key: str, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        pool = self._pools.get(key)
        if pool is None or pool.size < n:
            pool = np.empty(n, dtype=np.float64)
            self._pools[key] = pool
        return pool[:n].reshape(shape)


def _gemm_last(x: np.ndarray, mat: np.ndarray, ws: Workspace, key: str) -> np.ndarray:
    """Contract the last axis: out[..., j] = sum_i x[..., i] mat[i, j]."""
    rows = int(np.prod(x.shape[:-1]))
    out = ws.get(key, (rows, mat.shape[1]))
    np.matmul(x.reshape(rows, x.shape[-1]), mat, out=out)
    return out.reshape(x.shape[:-1] + (mat.shape[1],))


def _transpose_into(x: np.ndarray, perm: tuple[int, ...], ws: Workspace, key: str) -> np.ndarray:
    src = x.transpose(perm)
    out = ws.get(key, src.shape)
    np.copyto(out, src)
    return out


def as_contiguous(x: np.ndarray, ws: Workspace, key: str) -> np.ndarray:
    if x.flags.c_contiguous:
        return x
    out = ws.get(key, x.shape)
    np.copyto(out, x)
    return out


def forward_all(x: np.ndarray, tables: list[np.ndarray], ws: Workspace,
                key: str) -> np.ndarray:
    """Apply tables[t] (out_t, in_t) along direction t for all directions.

    Input canonical (B, n_d, ..., n_1), output reversed (B, m_1, ..., m_d).
    """
    d = len(tables)
    if d == 1:
        return _gemm_last(x, tables[0].T, ws, key + "f0")
    if d == 2:
        t1 = _gemm_last(x, tables[0].T, ws, key + "f0")          # (B, n2, m1)
        t1 = _transpose_into(t1, (0, 2, 1), ws, key + "f1")      # (B, m1, n2)
        return _gemm_last(t1, tables[1].T, ws, key + "f2")       # (B, m1, m2)
    if d == 3:
        t1 = _gemm_last(x, tables[0].T, ws, key + "f0")          # (B, n3, n2, m1)
        t1 = _transpose_into(t1, (0, 1, 3, 2), ws, key + "f1")   # (B, n3, m1, n2)
        t2 = _gemm_last(t1, tables[1].T, ws, key + "f2")         # (B, n3, m1, m2)
        t2 = _transpose_into(t2, (0, 2, 3, 1), ws, key + "f3")   # (B, m1, m2, n3)
        return _gemm_last(t2, tables[2].T, ws, key + "f4")       # (B, m1, m2, m3)
    raise ValueError("supported dimensions are 1..3")


def backward_all(y: np.ndarray, tables: list[np.ndarray], ws: Workspace,
                 key: str) -> np.ndarray:
    """Adjoint of forward_all: reversed (B, m_1, .., m_d) -> canonical."""
    d = len(tables)
    if d == 1:
        return _gemm_last(y, tables[0], ws, key + "b0")
    if d == 2:
        t1 = _gemm_last(y, tables[1], ws, key + "b0")            # (B, m1, n2)
        t1 = _transpose_into(t1, (0, 2, 1), ws, key + "b1")      # (B, n2, m1)
        return _gemm_last(t1, tables[0], ws, key + "b2")         # (B, n2, n1)
    if d == 3:
        t1 = _gemm_last(y, tables[2], ws, key + "b0")            # (B, m1, m2, n3)
        t1 = _transpose_into(t1, (0, 3, 1, 2), ws, key + "b1")   # (B, n3, m1, m2)
        t2 = _gemm_last(t1, tables[1], ws, key + "b2")           # (B, n3, m1, n2)
        t2 = _transpose_into(t2, (0, 1, 3, 2), ws, key + "b3")   # (B, n3, n2, m1)
        return _gemm_last(t2, tables[0], ws, key + "b4")         # (B, n3, n2, n1)
    raise ValueError("supported dimensions are 1..3")


def forward_gradients(x: np.ndarray, vtabs: list[np.ndarray], gtabs: list[np.ndarray],
                      ws: Workspace, key: str, with_value: bool = False):
    """Reference gradients (and optionally values) at quadrature points.

    Returns (grads, value) with grads a list of d reversed-layout tensors.
    Shares the value-interpolation chain between gradient directions.
    """
    d = len(vtabs)
    if d == 1:
        g1 = _gemm_last(x, gtabs[0].T, ws, key + "g1")
        val = _gemm_last(x, vtabs[0].T, ws, key + "v") if with_value else None
        return [g1], val
    if d == 2:
        a = _gemm_last(x, gtabs[0].T, ws, key + "a")             # (B, n2, q1)
        b = _gemm_last(x, vtabs[0].T, ws, key + "b")
        a = _transpose_into(a, (0, 2, 1), ws, key + "at")        # (B, q1, n2)
        b = _transpose_into(b, (0, 2, 1), ws, key + "bt")
        g1 = _gemm_last(a, vtabs[1].T, ws, key + "g1")           # (B, q1, q2)
        g2 = _gemm_last(b, gtabs[1].T, ws, key + "g2")
        val = _gemm_last(b, vtabs[1].T, ws, key + "v") if with_value else None
        return [g1, g2], val
    if d == 3:
        a = _gemm_last(x, gtabs[0].T, ws, key + "a")             # (B, n3, n2, q1)
        b = _gemm_last(x, vtabs[0].T, ws, key + "b")
        a = _transpose_into(a, (0, 1, 3, 2), ws, key + "at")     # (B, n3, q1, n2)
        b = _transpose_into(b, (0, 1, 3, 2), ws, key + "bt")
        a2 = _gemm_last(a, vtabs[1].T, ws, key + "a2")           # (B, n3, q1, q2)
        c2 = _gemm_last(b, gtabs[1].T, ws, key + "c2")
        b2 = _gemm_last(b, vtabs[1].T, ws, key + "b2")
        a2 = _transpose_into(a2, (0, 2, 3, 1), ws, key + "a2t")  # (B, q1, q2, n3)
        c2 = _transpose_into(c2, (0, 2, 3, 1), ws, key + "c2t")
        b2 = _transpose_into(b2, (0, 2, 3, 1), ws, key + "b2t")
        g1 = _gemm_last(a2, vtabs[2].T, ws, key + "g1")          # (B, q1, q2, q3)
        g2 = _gemm_last(c2, vtabs[2].T, ws, key + "g2")
        g3 = _gemm_last(b2, gtabs[2].T, ws, key + "g3")
        val = _gemm_last(b2, vtabs[2].T, ws, key + "v") if with_value else None
        return [g1, g2, g3], val
    raise ValueError("supported dimensions are 1..3")


def backward_gradients(moments: list[np.ndarray], vtabs: list[np.ndarray],
                       gtabs: list[np.ndarray], ws: Workspace, key: str) -> np.ndarray:
    """Adjoint of forward_gradients: accumulate sum_t A_t^T w_t, canonical."""
    d = len(vtabs)
    if d == 1:
        return _gemm_last(moments[0], gtabs[0], ws, key + "o")
    if d == 2:
        s1 = _gemm_last(moments[0], vtabs[1], ws, key + "s1")    # (B, q1, n2)
        s2 = _gemm_last(moments[1], gtabs[1], ws, key + "s2")
        s1 = _transpose_into(s1, (0, 2, 1), ws, key + "s1t")     # (B, n2, q1)
        s2 = _transpose_into(s2, (0, 2, 1), ws, key + "s2t")
        out = _gemm_last(s1, gtabs[0], ws, key + "o")            # (B, n2, n1)
        tmp = _gemm_last(s2, vtabs[0], ws, key + "o2")
        out += tmp
        return out
    if d == 3:
        p1 = _gemm_last(moments[0], vtabs[2], ws, key + "p1")    # (B, q1, q2, n3)
        p2 = _gemm_last(moments[1], vtabs[2], ws, key + "p2")
        p3 = _gemm_last(moments[2], gtabs[2], ws, key + "p3")
        p1 = _transpose_into(p1, (0, 3, 1, 2), ws, key + "p1t")  # (B, n3, q1, q2)
        p2 = _transpose_into(p2, (0, 3, 1, 2), ws, key + "p2t")
        p3 = _transpose_into(p3, (0, 3, 1, 2), ws, key + "p3t")
        r1 = _gemm_last(p1, vtabs[1], ws, key + "r1")            # (B, n3, q1, n2)
        r2 = _gemm_last(p2, gtabs[1], ws, key + "r2")
        r3 = _gemm_last(p3, vtabs[1], ws, key + "r3")
        r2 += r3
        r1 = _transpose_into(r1, (0, 1, 3, 2), ws, key + "r1t")  # (B, n3, n2, q1)
        r2 = _transpose_into(r2, (0, 1, 3, 2), ws, key + "r2t")
        out = _gemm_last(r1, gtabs[0], ws, key + "o")            # canonical
        tmp = _gemm_last(r2, vtabs[0], ws, key + "o2")
        out += tmp
        return out
    raise ValueError("supported dimensions are 1..3")


def reversed_to_canonical(y: np.ndarray) -> np.ndarray:
    """Transpose a reversed-layout tensor (B, m_1..m_d) to canonical order."""
    d = y.ndim - 1
    perm = (0,) + tuple(range(d, 0, -1))
    return np.ascontiguousarray(y.transpose(perm))


def canonical_to_reversed(x: np.ndarray) -> np.ndarray:
    return reversed_to_canonical(x)

"""Matrix-free interior-penalty operator on structured quad/hex levels.

The operator applies the bilinear form (bulk + penalty + consistency +
adjoint consistency) cell-by-cell and face-by-face with sum factorization.
Interior faces use the averaging convention with weight 1/sqrt(2); restricted
to one side this puts trace weight 1/2 on both the penalty point mass and the
consistency terms, while boundary faces take the full interior trace.

Geometry is precomputed per level:

- volume: detJ*w and the symmetric metric  G = detJ * J^-1 J^-T * w  at the
  tensor quadrature points;
- faces: per side the half-weighted vectors t_s = J_s^-1 N w / 2 (N the
  area-scaled outward normal of the lower cell, by the Nanson formula) and
  the penalty weights (gamma_e/2) |N| w.  On Cartesian levels everything
  collapses to per-direction scalars.

A face's physical-gradient flux is then g_s . N = ghat_s . t_s with ghat the
reference gradient, so only reference-space traces are ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._tensor import (
    Workspace,
    backward_all,
    backward_gradients,
    forward_all,
    forward_gradients,
)
from .flops import FlopCounter
from .mesh import MeshLevel, _multilinear_grad_table
from .polybasis import Basis1D, sipg_penalty

__all__ = [
    "DofLayout",
    "OperatorContext",
    "penalty",
    "make_context",
    "apply_operator",
    "residual",
    "compute_rhs",
    "assemble_dense",
    "assemble_sparse",
    "compute_l2_error",
    "interpolate_to_quad",
    "integrate_against_basis",
]

# scalars per workspace chunk in the volume/face loops; bounds transient memory
_CHUNK_SCALARS = 4_000_000

_SYM_PAIRS = {
    1: [(0, 0)],
    2: [(0, 0), (1, 1), (0, 1)],
    3: [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)],
}


def penalty(gamma_hat: float, k: int, h_plus: float, h_minus: float) -> float:
    """Edge-wise penalty gamma_hat * k(k+1) * (1/h+ + 1/h-); boundary faces
    pass h+ = h- = h."""
    return sipg_penalty(gamma_hat, k, h_plus, h_minus)


@dataclass(frozen=True)
class DofLayout:
    """Cell-major lexicographic layout: global index = cell*(k+1)^d + i with
    i = sum_t i_t (k+1)^(t-1)."""

    dim: int
    degree: int
    ncells_dim: int

    @property
    def n1d(self) -> int:
        return self.degree + 1

    @property
    def cell_dofs(self) -> int:
        return self.n1d ** self.dim

    @property
    def ncells(self) -> int:
        return self.ncells_dim ** self.dim

    @property
    def ndofs(self) -> int:
        return self.ncells * self.cell_dofs

    def node_shape(self) -> tuple[int, ...]:
        return (self.n1d,) * self.dim

    def grid_shape(self) -> tuple[int, ...]:
        return (self.ncells_dim,) * self.dim + self.node_shape()

    def global_index(self, cell: int, node_multi: tuple[int, ...]) -> int:
        i = sum(node_multi[t] * self.n1d ** t for t in range(self.dim))
        return cell * self.cell_dofs + i


def _quad_weights_reversed(weights: np.ndarray, d: int) -> np.ndarray:
    """Tensor product weights flattened over (q_1, ..., q_d) in C order."""
    grids = np.meshgrid(*([weights] * d), indexing="ij")
    out = np.ones_like(grids[0])
    for g in grids:
        out = out * g
    return out.ravel()


def _face_quad_weights(weights: np.ndarray, d: int) -> np.ndarray:
    if d == 1:
        return np.ones(1)
    return _quad_weights_reversed(weights, d - 1)


def _vol_ref_points(pts: np.ndarray, d: int) -> np.ndarray:
    """(Q, d) reference coordinates matching the reversed flattening."""
    grids = np.meshgrid(*([pts] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _face_ref_points(pts: np.ndarray, d: int, tau: int, side: float) -> np.ndarray:
    """(Qf, d) reference coordinates on the face x_tau = side."""
    trans = [t for t in range(1, d + 1) if t != tau]
    if trans:
        grids = np.meshgrid(*([pts] * len(trans)), indexing="ij")
        cols = [g.ravel() for g in grids]
        nq = cols[0].size
    else:
        cols = []
        nq = 1
    out = np.empty((nq, d))
    for j, t in enumerate(trans):
        out[:, t - 1] = cols[j]
    out[:, tau - 1] = side
    return out


def _adjugate(j: np.ndarray) -> np.ndarray:
    """Closed-form adjugate of (..., d, d) for d <= 3 (adj = det * inv)."""
    d = j.shape[-1]
    if d == 1:
        return np.ones_like(j)
    if d == 2:
        adj = np.empty_like(j)
        adj[..., 0, 0] = j[..., 1, 1]
        adj[..., 0, 1] = -j[..., 0, 1]
        adj[..., 1, 0] = -j[..., 1, 0]
        adj[..., 1, 1] = j[..., 0, 0]
        return adj
    adj = np.empty_like(j)
    for r in range(3):
        for c in range(3):
            r1, r2 = [x for x in range(3) if x != c]
            c1, c2 = [x for x in range(3) if x != r]
            adj[..., r, c] = (j[..., r1, c1] * j[..., r2, c2]
                              - j[..., r1, c2] * j[..., r2, c1])
            if (r + c) % 2:
                adj[..., r, c] = -adj[..., r, c]
    return adj


def _det(j: np.ndarray) -> np.ndarray:
    d = j.shape[-1]
    if d == 1:
        return j[..., 0, 0]
    if d == 2:
        return j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]
    return np.linalg.det(j)


def _corner_values_table(d: int, ref: np.ndarray) -> np.ndarray:
    """(2^d, Q) multilinear shape values at reference points (Q, d)."""
    q = ref.shape[0]
    out = np.ones((2 ** d, q))
    for c in range(2 ** d):
        for t in range(d):
            x = ref[:, t]
            out[c] = out[c] * (x if (c >> t) & 1 else 1.0 - x)
    return out


@dataclass
class _CartFace:
    """Per-direction face constants of a uniform Cartesian level."""

    wf: np.ndarray        # (Qf,) transversal tensor weights
    area: float           # |N|
    gamma_e: float        # same for interior and boundary on uniform levels
    t_half: float         # |N| / (2 h_tau); multiplied by wf at use sites
    t_full: float


@dataclass
class _CartGeometry:
    h: np.ndarray
    detjw: np.ndarray              # (Q,)
    metric_diag: list[np.ndarray]  # per direction: (Q,)
    faces: list[_CartFace]
    cartesian: bool = True


@dataclass
class _MultiFace:
    pen_half: np.ndarray          # (F, Qf)
    t_plus: np.ndarray            # (F, Qf, d)
    t_minus: np.ndarray           # (F, Qf, d)
    pen_bnd: list[np.ndarray]     # per side p: (Fb, Qf)
    t_bnd: list[np.ndarray]       # per side p: (Fb, Qf, d)
    coords_bnd: list[np.ndarray]  # per side p: (Fb, Qf, d)
    wf: np.ndarray


@dataclass
class _MultiGeometry:
    """Multilinear volume geometry is kept compact: cell corners plus the
    reference shape-gradient table; Jacobians, adjugates and the metric are
    rebuilt chunk-wise inside the kernels (memory beats recompute here).
    Face data, needed in every apply, stays precomputed."""

    corners: np.ndarray      # (B, 2^d, d), shared with the mesh level
    dn_vol: np.ndarray       # (2^d, Q, d)
    wq: np.ndarray           # (Q,)
    cellvol: np.ndarray      # (B,)
    faces: list[_MultiFace]
    cartesian: bool = False

    def jacobians(self, sl: slice):
        """(J, det, adj) at the volume quadrature points of a cell range."""
        jac = np.einsum("fcx,cqt->fqxt", self.corners[sl], self.dn_vol)
        det = _det(jac)
        return jac, det, _adjugate(jac)

    def detjw(self, sl: slice) -> np.ndarray:
        _, det, _ = self.jacobians(sl)
        return det * self.wq[None, :]

    def metric_sym(self, sl: slice) -> np.ndarray:
        """(nc, Q, S) entries of detJ * J^-1 J^-T * w for a cell range."""
        _, det, adj = self.jacobians(sl)
        g = np.einsum("fqxt,fqxs->fqts", adj, adj)
        d = self.corners.shape[-1]
        out = np.empty(g.shape[:2] + (len(_SYM_PAIRS[d]),))
        for j, (a, b) in enumerate(_SYM_PAIRS[d]):
            out[:, :, j] = g[:, :, a, b] / det * self.wq
        return out


@dataclass
class OperatorContext:
    """Everything needed to apply the level operator matrix-free."""

    level: MeshLevel
    basis: Basis1D
    layout: DofLayout
    gamma_hat: float
    geom: object
    ws: Workspace
    counter: FlopCounter | None = None

    @property
    def ndofs(self) -> int:
        return self.layout.ndofs

    def new_vector(self) -> np.ndarray:
        return np.zeros(self.ndofs)

    def count(self, kernel: str, flops: float) -> None:
        if self.counter is not None:
            self.counter.add(kernel, flops)


def _build_multilinear_geometry(level: MeshLevel, basis: Basis1D,
                                gamma_hat: float) -> _MultiGeometry:
    d = level.dim
    k = basis.degree
    quad_pts = basis.quad.points
    quad_w = basis.quad.weights
    q1 = basis.quad.n
    Q = q1 ** d
    B = level.ncells
    n = level.ncells_dim

    vol_ref = _vol_ref_points(quad_pts, d)
    dN_vol = _multilinear_grad_table(d, vol_ref)
    wq = _quad_weights_reversed(quad_w, d)

    cellvol = np.empty(B)
    corners = level.cell_corners()
    chunk = max(64, _CHUNK_SCALARS // (Q * d * d))
    for s in range(0, B, chunk):
        jac = np.einsum("fcx,cqt->fqxt", corners[s:s + chunk], dN_vol)
        det = _det(jac)
        if np.any(det <= 0.0):
            raise ValueError("nonpositive Jacobian at quadrature point")
        cellvol[s:s + chunk] = (det * wq).sum(axis=1)

    corners_grid = corners.reshape((n,) * d + (2 ** d, d))
    cellvol_grid = cellvol.reshape((n,) * d)
    wf = _face_quad_weights(quad_w, d)
    faces = []
    for tau in range(1, d + 1):
        ax = d - tau
        refL = _face_ref_points(quad_pts, d, tau, 1.0)
        refR = _face_ref_points(quad_pts, d, tau, 0.0)
        dN_L = _multilinear_grad_table(d, refL)
        dN_R = _multilinear_grad_table(d, refR)

        def slab_corners(side_slice):
            sl = [slice(None)] * d
            sl[ax] = side_slice
            return corners_grid[tuple(sl)].reshape(-1, 2 ** d, d)

        def slab_volumes(side_slice):
            sl = [slice(None)] * d
            sl[ax] = side_slice
            return cellvol_grid[tuple(sl)].ravel()

        cl = slab_corners(slice(0, n - 1))
        cr = slab_corners(slice(1, n))
        vol_l = slab_volumes(slice(0, n - 1))
        vol_r = slab_volumes(slice(1, n))
        nf = cl.shape[0]
        qf = wf.size
        pen_half = np.empty((nf, qf))
        t_plus = np.empty((nf, qf, d))
        t_minus = np.empty((nf, qf, d))
        fchunk = max(256, _CHUNK_SCALARS // (3 * qf * d * d))
        for s in range(0, nf, fchunk):
            sl = slice(s, min(nf, s + fchunk))
            jl = np.einsum("fcx,cqt->fqxt", cl[sl], dN_L)
            jr = np.einsum("fcx,cqt->fqxt", cr[sl], dN_R)
            detl, detr = _det(jl), _det(jr)
            adjl, adjr = _adjugate(jl), _adjugate(jr)
            nvec = adjl[:, :, tau - 1, :]  # area-weighted normal of the left
            nnorm = np.linalg.norm(nvec, axis=-1)
            area = (nnorm * wf).sum(axis=1)
            h_l = vol_l[sl] / area
            h_r = vol_r[sl] / area
            gamma_e = gamma_hat * k * (k + 1) * (1.0 / h_l + 1.0 / h_r)
            pen_half[sl] = 0.5 * gamma_e[:, None] * nnorm * wf
            t_plus[sl] = np.einsum("fqts,fqs->fqt", adjl, nvec) \
                / detl[..., None] * (0.5 * wf)[None, :, None]
            t_minus[sl] = np.einsum("fqts,fqs->fqt", adjr, nvec) \
                / detr[..., None] * (0.5 * wf)[None, :, None]

        pen_bnd, t_bnd, coords_bnd = [], [], []
        for p, (side, dN_b, ref_b, sign) in enumerate(
                [(slice(0, 1), dN_R, refR, -1.0),
                 (slice(n - 1, n), dN_L, refL, 1.0)]):
            cb = slab_corners(side)
            jb = np.einsum("fcx,cqt->fqxt", cb, dN_b)
            detb = _det(jb)
            adjb = _adjugate(jb)
            nb_vec = sign * adjb[:, :, tau - 1, :]
            nbnorm = np.linalg.norm(nb_vec, axis=-1)
            area_b = (nbnorm * wf).sum(axis=1)
            h_b = slab_volumes(side) / area_b
            ge_b = gamma_hat * k * (k + 1) * (2.0 / h_b)
            pen_bnd.append(ge_b[:, None] * nbnorm * wf)
            t_bnd.append(np.einsum("fqts,fqs->fqt", adjb, nb_vec)
                         / detb[..., None] * wf[None, :, None])
            coords_bnd.append(np.einsum("fcx,cq->fqx", cb,
                                        _corner_values_table(d, ref_b)))
        faces.append(_MultiFace(pen_half=pen_half, t_plus=t_plus,
                                t_minus=t_minus, pen_bnd=pen_bnd, t_bnd=t_bnd,
                                coords_bnd=coords_bnd, wf=wf))
    return _MultiGeometry(corners=corners, dn_vol=dN_vol, wq=wq,
                          cellvol=cellvol, faces=faces)


def _build_cartesian_geometry(level: MeshLevel, basis: Basis1D,
                              gamma_hat: float) -> _CartGeometry:
    d = level.dim
    k = basis.degree
    h = level.lengths
    vol = float(np.prod(h))
    wq = _quad_weights_reversed(basis.quad.weights, d)
    detjw = vol * wq
    metric_diag = [vol / h[t] ** 2 * wq for t in range(d)]
    wf = _face_quad_weights(basis.quad.weights, d)
    faces = []
    for tau in range(1, d + 1):
        area = vol / h[tau - 1]
        gamma_e = sipg_penalty(gamma_hat, k, h[tau - 1], h[tau - 1])
        faces.append(_CartFace(
            wf=wf, area=area, gamma_e=gamma_e,
            t_half=area / (2.0 * h[tau - 1]),
            t_full=area / h[tau - 1],
        ))
    return _CartGeometry(h=h, detjw=detjw, metric_diag=metric_diag, faces=faces)


def make_context(level: MeshLevel, basis: Basis1D, gamma_hat: float = 1.0,
                 counter: FlopCounter | None = None,
                 ws: Workspace | None = None) -> OperatorContext:
    layout = DofLayout(dim=level.dim, degree=basis.degree,
                       ncells_dim=level.ncells_dim)
    if level.cartesian:
        geom = _build_cartesian_geometry(level, basis, gamma_hat)
    else:
        geom = _build_multilinear_geometry(level, basis, gamma_hat)
    return OperatorContext(level=level, basis=basis, layout=layout,
                           gamma_hat=gamma_hat, geom=geom,
                           ws=ws if ws is not None else Workspace(),
                           counter=counter)


# ---------------------------------------------------------------------------
# operator application
# ---------------------------------------------------------------------------

def _cf(batch: float, out: int, inner: int) -> float:
    return float(batch) * out * (2 * inner - 1)


def _value_tables(ctx: OperatorContext, count: int) -> list[np.ndarray]:
    tab = np.ascontiguousarray(ctx.basis.shape_values.T)
    return [tab] * count


def _grad_tables(ctx: OperatorContext, count: int) -> list[np.ndarray]:
    tab = np.ascontiguousarray(ctx.basis.shape_grads.T)
    return [tab] * count


def _volume_apply(ctx: OperatorContext, x2: np.ndarray, v2: np.ndarray) -> float:
    d = ctx.layout.dim
    n = ctx.layout.n1d
    q1 = ctx.basis.quad.n
    Q = q1 ** d
    geom = ctx.geom
    ws = ctx.ws
    vt = _value_tables(ctx, d)
    gt = _grad_tables(ctx, d)
    node_shape = ctx.layout.node_shape()
    B = x2.shape[0]
    chunk = max(32, _CHUNK_SCALARS // (Q * (d + 3)))
    flops = 0.0
    stages = (d - 1) + d * (d + 1) // 2
    for s in range(0, B, chunk):
        sl = slice(s, min(B, s + chunk))
        nb = sl.stop - sl.start
        xb = x2[sl].reshape((nb,) + node_shape)
        grads, _ = forward_gradients(xb, vt, gt, ws, "vol")
        gflat = [gr.reshape(nb, Q) for gr in grads]
        moments = []
        if geom.cartesian:
            for t in range(d):
                m = ws.get(f"volm{t}", grads[t].shape)
                np.multiply(gflat[t], geom.metric_diag[t][None, :],
                            out=m.reshape(nb, Q))
                moments.append(m)
            flops += nb * Q * d
        else:
            sym = geom.metric_sym(sl)
            tmp = ws.get("volt", (nb, Q))
            for t in range(d):
                m = ws.get(f"volm{t}", grads[t].shape)
                m2 = m.reshape(nb, Q)
                m2[:] = 0.0
                for j, (a, b) in enumerate(_SYM_PAIRS[d]):
                    if a == t:
                        other = b
                    elif b == t:
                        other = a
                    else:
                        continue
                    np.multiply(sym[:, :, j], gflat[other], out=tmp)
                    m2 += tmp
                moments.append(m)
            flops += nb * Q * d * (2 * d - 1)
        out = backward_gradients(moments, vt, gt, ws, "vol")
        v2[sl] += out.reshape(nb, -1)
        flops += 2 * stages * _cf(nb, Q, n) + nb * Q
    return flops


def _trace(slab: np.ndarray, vec: np.ndarray, tau: int, d: int,
           ws: Workspace, key: str) -> np.ndarray:
    """Contract the node axis of direction tau with a boundary vector.

    slab: contiguous (F, n_d, ..., n_1); returns (F, transversal nodes)."""
    axis = 1 + (d - tau)
    if axis != slab.ndim - 1:
        perm = tuple(i for i in range(slab.ndim) if i != axis) + (axis,)
        src = slab.transpose(perm)
        buf = ws.get(key + "t", src.shape)
        np.copyto(buf, src)
        slab = buf
    rows = int(np.prod(slab.shape[:-1]))
    out = ws.get(key, (rows,))
    np.matmul(slab.reshape(rows, slab.shape[-1]), vec, out=out)
    return out.reshape(slab.shape[:-1])


def _untrace_add(v_flat: np.ndarray, trans_nodes: np.ndarray, vec: np.ndarray,
                 tau: int, d: int, ws: Workspace, key: str) -> None:
    """v_flat (F, nodes) += trans_nodes (F, transversal) outer vec along tau."""
    axis = 1 + (d - tau)
    shape_vec = [1] * (d + 1)
    shape_vec[axis] = vec.size
    expanded = np.expand_dims(trans_nodes, axis)
    buf = ws.get(key, v_flat.shape)
    np.multiply(expanded, vec.reshape(shape_vec), out=buf)
    v_flat += buf


def _face_side_values(ctx: OperatorContext, slab: np.ndarray, tau: int, p: int,
                      vt, gt, need_tangential: bool, key: str):
    """Value and reference-gradient traces at face quadrature points.

    Returns (value, normal ref-gradient, tangential list); all arrays are
    reversed-layout over the transversal directions, shape (F, q, ...)."""
    d = ctx.layout.dim
    ws = ctx.ws
    bval = ctx.basis.boundary_values[p]
    bgrad = ctx.basis.boundary_grads[p]
    tv = _trace(slab, bval, tau, d, ws, key + "v")
    tg = _trace(slab, bgrad, tau, d, ws, key + "g")
    if d == 1:
        return tv.reshape(-1, 1), tg.reshape(-1, 1), []
    if need_tangential:
        tang, val = forward_gradients(tv, vt, gt, ws, key + "fg", with_value=True)
        gnorm = forward_all(tg, vt, ws, key + "fa")
        return val, gnorm, tang
    val = forward_all(tv, vt, ws, key + "fv")
    gnorm = forward_all(tg, vt, ws, key + "fa")
    return val, gnorm, []


def _face_side_scatter(ctx: OperatorContext, v_flat: np.ndarray, tau: int,
                       p: int, vt, gt, mom_val, mom_gnorm, mom_tang,
                       key: str) -> None:
    """Adjoint of _face_side_values: accumulate face moments into v_flat
    (a contiguous (F, nodes...) buffer)."""
    d = ctx.layout.dim
    ws = ctx.ws
    bval = ctx.basis.boundary_values[p]
    bgrad = ctx.basis.boundary_grads[p]
    if d == 1:
        _untrace_add(v_flat, mom_val.reshape(-1), bval, tau, d, ws, key + "u1")
        _untrace_add(v_flat, mom_gnorm.reshape(-1), bgrad, tau, d, ws, key + "u2")
        return
    trans_val = backward_all(mom_val, vt, ws, key + "bv")
    if mom_tang:
        tmp = backward_gradients(mom_tang, vt, gt, ws, key + "bt")
        trans_val += tmp
    trans_g = backward_all(mom_gnorm, vt, ws, key + "bg")
    _untrace_add(v_flat, trans_val, bval, tau, d, ws, key + "u1")
    _untrace_add(v_flat, trans_g, bgrad, tau, d, ws, key + "u2")


def _slab(grid: np.ndarray, d: int, tau: int, lo: int, hi: int) -> np.ndarray:
    sl = [slice(None)] * grid.ndim
    sl[d - tau] = slice(lo, hi)
    return grid[tuple(sl)]


def _transversal_tables(ctx: OperatorContext, tau: int):
    d = ctx.layout.dim
    trans = [t for t in range(1, d + 1) if t != tau]
    return trans, _value_tables(ctx, len(trans)), _grad_tables(ctx, len(trans))


def _row_chunks(slab_shape: tuple[int, ...], d: int, max_faces: int):
    """Yield (row_slice, face_offset, n_faces) chunks along the leading cell
    axis, so that contiguous face-flat geometry slices line up with slab
    sub-views."""
    rows = slab_shape[0]
    row_faces = int(np.prod(slab_shape[1:d])) if d > 1 else 1
    step = max(1, max_faces // max(1, row_faces))
    for r0 in range(0, rows, step):
        r1 = min(rows, r0 + step)
        yield slice(r0, r1), r0 * row_faces, (r1 - r0) * row_faces


def _faces_apply(ctx: OperatorContext, xg: np.ndarray, vg: np.ndarray) -> float:
    d = ctx.layout.dim
    n1 = ctx.layout.n1d
    nc = ctx.level.ncells_dim
    q1 = ctx.basis.quad.n
    qf = q1 ** (d - 1)
    geom = ctx.geom
    ws = ctx.ws
    cart = geom.cartesian
    node_shape = ctx.layout.node_shape()
    flops = 0.0
    max_faces = max(32, _CHUNK_SCALARS // max(1, qf * (6 * d + 12)))
    qshape = (q1,) * (d - 1) if d > 1 else (1,)

    for tau in range(1, d + 1):
        trans, vt, gt = _transversal_tables(ctx, tau)
        fgeo = geom.faces[tau - 1]

        # ----- interior faces -----
        if nc > 1:
            xl = _slab(xg, d, tau, 0, nc - 1)
            xr = _slab(xg, d, tau, 1, nc)
            vl = _slab(vg, d, tau, 0, nc - 1)
            vr = _slab(vg, d, tau, 1, nc)
            for rows, off, nb in _row_chunks(xl.shape, d, max_faces):
                xlc = ws.get("fxl", (nb,) + node_shape)
                np.copyto(xlc.reshape(xl[rows].shape), xl[rows])
                xrc = ws.get("fxr", (nb,) + node_shape)
                np.copyto(xrc.reshape(xr[rows].shape), xr[rows])
                geo_sl = slice(off, off + nb)
                vp, gp, tp = _face_side_values(ctx, xlc, tau, 1, vt, gt,
                                               not cart, "fL")
                vm, gm, tm = _face_side_values(ctx, xrc, tau, 0, vt, gt,
                                               not cart, "fR")
                shape = (nb,) + qshape
                vp2, vm2 = vp.reshape(nb, qf), vm.reshape(nb, qf)
                gp2, gm2 = gp.reshape(nb, qf), gm.reshape(nb, qf)
                jump = ws.get("fjmp", (nb, qf))
                np.subtract(vp2, vm2, out=jump)
                mv = ws.get("fmv", (nb, qf))
                tmp = ws.get("ftmp", (nb, qf))
                if cart:
                    th = fgeo.t_half * fgeo.wf
                    pen = 0.5 * fgeo.gamma_e * fgeo.area * fgeo.wf
                    np.multiply(jump, pen[None, :], out=mv)
                    np.add(gp2, gm2, out=tmp)
                    tmp *= th[None, :]
                    mv -= tmp
                    mg = ws.get("fmg", (nb, qf))
                    np.multiply(jump, -th[None, :], out=mg)
                    mvneg = ws.get("fmvn", (nb, qf))
                    np.negative(mv, out=mvneg)
                    momp = mg.reshape(shape)
                    contrib = ws.get("fcl", (nb,) + node_shape)
                    contrib[:] = 0.0
                    _face_side_scatter(ctx, contrib, tau, 1, vt, gt,
                                       mv.reshape(shape), momp, [], "sL")
                    vl[rows] += contrib.reshape(vl[rows].shape)
                    contrib = ws.get("fcr", (nb,) + node_shape)
                    contrib[:] = 0.0
                    _face_side_scatter(ctx, contrib, tau, 0, vt, gt,
                                       mvneg.reshape(shape), momp, [], "sR")
                    vr[rows] += contrib.reshape(vr[rows].shape)
                    flops += nb * qf * 8
                else:
                    tpl = fgeo.t_plus[geo_sl]
                    tmi = fgeo.t_minus[geo_sl]
                    gall_p, gall_m = [None] * d, [None] * d
                    ti = 0
                    for t in range(1, d + 1):
                        if t == tau:
                            gall_p[t - 1], gall_m[t - 1] = gp2, gm2
                        else:
                            gall_p[t - 1] = tp[ti].reshape(nb, qf)
                            gall_m[t - 1] = tm[ti].reshape(nb, qf)
                            ti += 1
                    np.multiply(jump, fgeo.pen_half[geo_sl], out=mv)
                    for t in range(d):
                        np.multiply(gall_p[t], tpl[:, :, t], out=tmp)
                        mv -= tmp
                        np.multiply(gall_m[t], tmi[:, :, t], out=tmp)
                        mv -= tmp
                    mvneg = ws.get("fmvn", (nb, qf))
                    np.negative(mv, out=mvneg)
                    momp, momm = [], []
                    for t in range(d):
                        bp = ws.get(f"fmp{t}", (nb, qf))
                        np.multiply(jump, tpl[:, :, t], out=bp)
                        np.negative(bp, out=bp)
                        momp.append(bp)
                        bm = ws.get(f"fmm{t}", (nb, qf))
                        np.multiply(jump, tmi[:, :, t], out=bm)
                        np.negative(bm, out=bm)
                        momm.append(bm)
                    contrib = ws.get("fcl", (nb,) + node_shape)
                    contrib[:] = 0.0
                    _face_side_scatter(
                        ctx, contrib, tau, 1, vt, gt, mv.reshape(shape),
                        momp[tau - 1].reshape(shape),
                        [momp[t - 1].reshape(shape) for t in trans], "sL")
                    vl[rows] += contrib.reshape(vl[rows].shape)
                    contrib = ws.get("fcr", (nb,) + node_shape)
                    contrib[:] = 0.0
                    _face_side_scatter(
                        ctx, contrib, tau, 0, vt, gt, mvneg.reshape(shape),
                        momm[tau - 1].reshape(shape),
                        [momm[t - 1].reshape(shape) for t in trans], "sR")
                    vr[rows] += contrib.reshape(vr[rows].shape)
                    flops += nb * qf * (8 * d + 4)
                per_side = 2 * _cf(nb, n1 ** (d - 1), n1)
                if d > 1:
                    per_side += (2 + d) * _cf(nb, qf, n1)
                flops += 4 * per_side

        # ----- boundary faces -----
        for p, (lo, hi) in enumerate([(0, 1), (nc - 1, nc)]):
            xb = _slab(xg, d, tau, lo, hi)
            vb = _slab(vg, d, tau, lo, hi)
            for rows, off, nb in _row_chunks(xb.shape, d, max_faces):
                xbc = ws.get("fxb", (nb,) + node_shape)
                np.copyto(xbc.reshape(xb[rows].shape), xb[rows])
                geo_sl = slice(off, off + nb)
                vv, gg, tt = _face_side_values(ctx, xbc, tau, p, vt, gt,
                                               not cart, "fB")
                shape = (nb,) + qshape
                vv2, gg2 = vv.reshape(nb, qf), gg.reshape(nb, qf)
                mv = ws.get("bmv", (nb, qf))
                tmp = ws.get("btmp", (nb, qf))
                if cart:
                    sign = 1.0 if p == 1 else -1.0
                    tfw = sign * fgeo.t_full * fgeo.wf
                    pen = fgeo.gamma_e * fgeo.area * fgeo.wf
                    np.multiply(vv2, pen[None, :], out=mv)
                    np.multiply(gg2, tfw[None, :], out=tmp)
                    mv -= tmp
                    mg = ws.get("bmg", (nb, qf))
                    np.multiply(vv2, -tfw[None, :], out=mg)
                    contrib = ws.get("fcb", (nb,) + node_shape)
                    contrib[:] = 0.0
                    _face_side_scatter(ctx, contrib, tau, p, vt, gt,
                                       mv.reshape(shape), mg.reshape(shape),
                                       [], "sB")
                    vb[rows] += contrib.reshape(vb[rows].shape)
                    flops += nb * qf * 5
                else:
                    tb = fgeo.t_bnd[p][geo_sl]
                    gall = [None] * d
                    ti = 0
                    for t in range(1, d + 1):
                        if t == tau:
                            gall[t - 1] = gg2
                        else:
                            gall[t - 1] = tt[ti].reshape(nb, qf)
                            ti += 1
                    np.multiply(vv2, fgeo.pen_bnd[p][geo_sl], out=mv)
                    for t in range(d):
                        np.multiply(gall[t], tb[:, :, t], out=tmp)
                        mv -= tmp
                    mom = []
                    for t in range(d):
                        bb = ws.get(f"bm{t}", (nb, qf))
                        np.multiply(vv2, tb[:, :, t], out=bb)
                        np.negative(bb, out=bb)
                        mom.append(bb)
                    contrib = ws.get("fcb", (nb,) + node_shape)
                    contrib[:] = 0.0
                    _face_side_scatter(
                        ctx, contrib, tau, p, vt, gt, mv.reshape(shape),
                        mom[tau - 1].reshape(shape),
                        [mom[t - 1].reshape(shape) for t in trans], "sB")
                    vb[rows] += contrib.reshape(vb[rows].shape)
                    flops += nb * qf * (4 * d + 3)
                per_side = 2 * _cf(nb, n1 ** (d - 1), n1)
                if d > 1:
                    per_side += (2 + d) * _cf(nb, qf, n1)
                flops += 2 * per_side
    return flops


def apply_operator(ctx: OperatorContext, u: np.ndarray,
                   out: np.ndarray | None = None,
                   kernel: str = "operator_apply") -> np.ndarray:
    """v = A u with the interior-penalty form, matrix-free."""
    layout = ctx.layout
    u = np.asarray(u, dtype=float)
    if u.size != layout.ndofs:
        raise ValueError("vector size does not match level")
    v = out if out is not None else np.empty(layout.ndofs)
    v[:] = 0.0
    x2 = u.reshape(layout.ncells, layout.cell_dofs)
    v2 = v.reshape(layout.ncells, layout.cell_dofs)
    flops = _volume_apply(ctx, x2, v2)
    xg = u.reshape(layout.grid_shape())
    vg = v.reshape(layout.grid_shape())
    flops += _faces_apply(ctx, xg, vg)
    ctx.count(kernel, flops)
    return v


def residual(ctx: OperatorContext, x: np.ndarray, b: np.ndarray,
             out: np.ndarray, kernel: str = "residual") -> np.ndarray:
    """out = b - A x."""
    apply_operator(ctx, x, out=out, kernel=kernel)
    np.subtract(b, out, out=out)
    ctx.count(kernel, ctx.ndofs)
    return out


# ---------------------------------------------------------------------------
# right-hand side, errors
# ---------------------------------------------------------------------------

def _cell_quad_coords(level: MeshLevel, sl: slice, nv_table: np.ndarray) -> np.ndarray:
    corners = level.cell_corners(np.arange(sl.start, sl.stop))
    return np.einsum("fcx,cq->fqx", corners, nv_table)


def compute_rhs(ctx: OperatorContext, f, g) -> np.ndarray:
    """Load vector: volume source f plus Nitsche boundary terms with data g,
    using the same penalty and trace weights as the operator."""
    layout = ctx.layout
    d = layout.dim
    q1 = ctx.basis.quad.n
    Q = q1 ** d
    ws = ctx.ws
    rhs = np.zeros(layout.ndofs)
    v2 = rhs.reshape(layout.ncells, layout.cell_dofs)
    vt = _value_tables(ctx, d)
    ref = _vol_ref_points(ctx.basis.quad.points, d)
    nv_table = _corner_values_table(d, ref)
    chunk = max(32, _CHUNK_SCALARS // (Q * (d + 2)))
    flops = 0.0
    for s in range(0, layout.ncells, chunk):
        sl = slice(s, min(layout.ncells, s + chunk))
        nb = sl.stop - sl.start
        coords = _cell_quad_coords(ctx.level, sl, nv_table)
        fvals = np.asarray(f(coords.reshape(-1, d)), dtype=float).reshape(nb, Q)
        if ctx.geom.cartesian:
            fvals *= ctx.geom.detjw[None, :]
        else:
            fvals *= ctx.geom.detjw(sl)
        w = fvals.reshape((nb,) + (q1,) * d)
        out = backward_all(np.ascontiguousarray(w), vt, ws, "rhs")
        v2[sl] += out.reshape(nb, -1)
        flops += nb * Q + d * _cf(nb, Q, q1)

    vg = rhs.reshape(layout.grid_shape())
    nc = ctx.level.ncells_dim
    qf = q1 ** (d - 1)
    node_shape = layout.node_shape()
    qshape = (q1,) * (d - 1) if d > 1 else (1,)
    for tau in range(1, d + 1):
        trans, vtt, gtt = _transversal_tables(ctx, tau)
        fgeo = ctx.geom.faces[tau - 1]
        for p, (lo, hi) in enumerate([(0, 1), (nc - 1, nc)]):
            vb = _slab(vg, d, tau, lo, hi)
            Fb = int(np.prod(vb.shape[:d]))
            if ctx.geom.cartesian:
                ref_b = _face_ref_points(ctx.basis.quad.points, d, tau, float(p))
                cell_ids = _boundary_cell_ids(ctx.level, tau, p)
                corners = ctx.level.cell_corners(cell_ids)
                coords = np.einsum("fcx,cq->fqx", corners,
                                   _corner_values_table(d, ref_b))
                gvals = np.asarray(g(coords.reshape(-1, d)),
                                   dtype=float).reshape(Fb, qf)
                sign = 1.0 if p == 1 else -1.0
                pen = fgeo.gamma_e * fgeo.area * fgeo.wf
                mv = gvals * pen[None, :]
                mgn = gvals * (-sign * fgeo.t_full * fgeo.wf)[None, :]
                mom = [mgn if t == tau else np.zeros_like(mgn)
                       for t in range(1, d + 1)]
            else:
                coords = fgeo.coords_bnd[p]
                gvals = np.asarray(g(coords.reshape(-1, d)),
                                   dtype=float).reshape(Fb, qf)
                mv = gvals * fgeo.pen_bnd[p]
                tb = fgeo.t_bnd[p]
                mom = [gvals * (-tb[:, :, t]) for t in range(d)]
            contrib = ws.get("rhsb", (Fb,) + node_shape)
            contrib[:] = 0.0
            _face_side_scatter(
                ctx, contrib, tau, p, vtt, gtt,
                mv.reshape((Fb,) + qshape),
                mom[tau - 1].reshape((Fb,) + qshape),
                [mom[t - 1].reshape((Fb,) + qshape) for t in trans], "rhsc")
            vb += contrib.reshape(vb.shape)
            flops += Fb * qf * (2 + d)
    ctx.count("rhs", flops)
    return rhs


def _boundary_cell_ids(level: MeshLevel, tau: int, p: int) -> np.ndarray:
    d, n = level.dim, level.ncells_dim
    ids = np.arange(level.ncells).reshape((n,) * d)
    sl = [slice(None)] * d
    sl[d - tau] = slice(0, 1) if p == 0 else slice(n - 1, n)
    return ids[tuple(sl)].ravel()


def compute_l2_error(ctx: OperatorContext, u: np.ndarray, exact,
                     n_quad: int | None = None) -> float:
    """L2 norm of (u_h - exact), with an enriched Gauss rule (default k+3)."""
    from .polybasis import gauss_quadrature, lagrange_values

    layout = ctx.layout
    d = layout.dim
    k = ctx.basis.degree
    nq = n_quad if n_quad is not None else k + 3
    quad = gauss_quadrature(nq)
    tab = np.ascontiguousarray(lagrange_values(ctx.basis.nodes, quad.points).T)
    vt = [tab] * d
    ref = _vol_ref_points(quad.points, d)
    nv_table = _corner_values_table(d, ref)
    wq = _quad_weights_reversed(quad.weights, d)
    dN = _multilinear_grad_table(d, ref)
    Q = nq ** d
    ws = Workspace()
    x2 = u.reshape(layout.ncells, layout.cell_dofs)
    total = 0.0
    chunk = max(16, _CHUNK_SCALARS // (Q * (d * d + 2)))
    for s in range(0, layout.ncells, chunk):
        sl = slice(s, min(layout.ncells, s + chunk))
        nb = sl.stop - sl.start
        xb = x2[sl].reshape((nb,) + layout.node_shape())
        vals = forward_all(xb, vt, ws, "err").reshape(nb, Q)
        coords = _cell_quad_coords(ctx.level, sl, nv_table)
        diff = vals - np.asarray(exact(coords.reshape(-1, d)),
                                 dtype=float).reshape(nb, Q)
        if ctx.geom.cartesian:
            w = float(np.prod(ctx.level.lengths)) * wq[None, :]
        else:
            corners = ctx.level.cell_corners(np.arange(sl.start, sl.stop))
            jac = np.einsum("fcx,cqt->fqxt", corners, dN)
            w = _det(jac) * wq[None, :]
        total += float((diff * diff * w).sum())
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# dense / sparse assembly (oracle and coarse-solver paths)
# ---------------------------------------------------------------------------

def _build_full(tabs: list[np.ndarray], n_dofs: int) -> np.ndarray:
    d = len(tabs)
    if d == 1:
        return tabs[0]
    if d == 2:
        return np.einsum("aq,br->baqr", tabs[0], tabs[1]).reshape(n_dofs, -1)
    return np.einsum("aq,br,cs->cbaqrs",
                     tabs[0], tabs[1], tabs[2]).reshape(n_dofs, -1)


def _full_tables(ctx: OperatorContext):
    """Full (non-factorized) tensor tables PHI (N, Q) and DPHI[t] (N, Q)."""
    d = ctx.layout.dim
    v = ctx.basis.shape_values
    g = ctx.basis.shape_grads
    n = ctx.layout.cell_dofs
    phi = _build_full([v] * d, n)
    dphi = [_build_full([g if s == t else v for s in range(1, d + 1)], n)
            for t in range(1, d + 1)]
    return phi, dphi


def _full_trace_tables(ctx: OperatorContext, tau: int, p: int):
    """Trace tables on the face x_tau = p: value row (N, Qf) and the d
    reference-gradient rows."""
    d = ctx.layout.dim
    v = ctx.basis.shape_values
    g = ctx.basis.shape_grads
    n = ctx.layout.cell_dofs
    bv = ctx.basis.boundary_values[p][:, None]
    bg = ctx.basis.boundary_grads[p][:, None]
    val = _build_full([bv if s == tau else v for s in range(1, d + 1)], n)
    grads = []
    for t in range(1, d + 1):
        tabs = []
        for s in range(1, d + 1):
            if s == tau:
                tabs.append(bg if t == tau else bv)
            else:
                tabs.append(g if s == t else v)
        grads.append(_build_full(tabs, n))
    return val, grads


def _assemble_entries(ctx: OperatorContext, emit) -> None:
    """Direct-quadrature assembly; emit(rows, cols, block) per contribution.

    This path never touches the sum-factorized kernels; it integrates with
    full tensor tables and serves as the independent oracle."""
    layout = ctx.layout
    d = layout.dim
    N = layout.cell_dofs
    nc = ctx.level.ncells_dim
    geom = ctx.geom
    phi, dphi = _full_tables(ctx)
    pairs = _SYM_PAIRS[d]

    for cell in range(layout.ncells):
        amat = np.zeros((N, N))
        if geom.cartesian:
            for t in range(d):
                amat += (dphi[t] * geom.metric_diag[t][None, :]) @ dphi[t].T
        else:
            sym = geom.metric_sym(slice(cell, cell + 1))[0]
            for j, (a, b) in enumerate(pairs):
                blk = (dphi[a] * sym[:, j][None, :]) @ dphi[b].T
                amat += blk if a == b else blk + blk.T
        idx = cell * N + np.arange(N)
        emit(idx, idx, amat)

    grid = np.arange(layout.ncells).reshape((nc,) * d)
    for tau in range(1, d + 1):
        ax = d - tau
        fgeo = geom.faces[tau - 1]
        val1, gr1 = _full_trace_tables(ctx, tau, 1)
        val0, gr0 = _full_trace_tables(ctx, tau, 0)
        sl_l = [slice(None)] * d
        sl_r = [slice(None)] * d
        sl_l[ax] = slice(0, nc - 1)
        sl_r[ax] = slice(1, nc)
        left = grid[tuple(sl_l)].ravel()
        right = grid[tuple(sl_r)].ravel()
        for fi in range(len(left)):
            cl, cr = int(left[fi]), int(right[fi])
            if geom.cartesian:
                pen = 0.5 * fgeo.gamma_e * fgeo.area * fgeo.wf
                gpl = gr1[tau - 1] * (fgeo.t_half * fgeo.wf)[None, :]
                gmr = gr0[tau - 1] * (fgeo.t_half * fgeo.wf)[None, :]
            else:
                pen = fgeo.pen_half[fi]
                tpl = fgeo.t_plus[fi]
                tmi = fgeo.t_minus[fi]
                gpl = sum(gr1[t] * tpl[:, t][None, :] for t in range(d))
                gmr = sum(gr0[t] * tmi[:, t][None, :] for t in range(d))
            vj = np.vstack([val1, -val0])   # signed jump rows
            gs = np.vstack([gpl, gmr])      # weighted average-flux rows
            block = (vj * pen[None, :]) @ vj.T - vj @ gs.T - gs @ vj.T
            idx = np.concatenate([cl * N + np.arange(N), cr * N + np.arange(N)])
            emit(idx, idx, block)

        for p, (lo, hi) in enumerate([(0, 1), (nc - 1, nc)]):
            slb = [slice(None)] * d
            slb[ax] = slice(lo, hi)
            bcells = grid[tuple(slb)].ravel()
            valb, grb = _full_trace_tables(ctx, tau, p)
            for fi in range(len(bcells)):
                cb = int(bcells[fi])
                if geom.cartesian:
                    sign = 1.0 if p == 1 else -1.0
                    pen = fgeo.gamma_e * fgeo.area * fgeo.wf
                    gb = grb[tau - 1] * (sign * fgeo.t_full * fgeo.wf)[None, :]
                else:
                    pen = fgeo.pen_bnd[p][fi]
                    tb = fgeo.t_bnd[p][fi]
                    gb = sum(grb[t] * tb[:, t][None, :] for t in range(d))
                block = (valb * pen[None, :]) @ valb.T - valb @ gb.T - gb @ valb.T
                idx = cb * N + np.arange(N)
                emit(idx, idx, block)


def assemble_dense(ctx: OperatorContext, via: str = "quadrature") -> np.ndarray:
    """Dense level matrix, for oracle-sized problems only.

    via="quadrature": direct integration with full tensor tables;
    via="matvec": columns from apply_operator on unit vectors.
    Both paths must agree (tested)."""
    n = ctx.ndofs
    if n > 20000:
        raise ValueError("dense assembly limited to 20000 dofs")
    if via == "matvec":
        a = np.empty((n, n))
        e = np.zeros(n)
        col = np.empty(n)
        for j in range(n):
            e[j] = 1.0
            apply_operator(ctx, e, out=col)
            a[:, j] = col
            e[j] = 0.0
        return a
    if via != "quadrature":
        raise ValueError("via must be 'quadrature' or 'matvec'")
    a = np.zeros((n, n))

    def emit(rows, cols, block):
        a[np.ix_(rows, cols)] += block

    _assemble_entries(ctx, emit)
    return a


def assemble_sparse(ctx: OperatorContext):
    """CSR level matrix via the direct-quadrature path (coarse solves)."""
    import scipy.sparse as sp

    rows_list, cols_list, vals_list = [], [], []

    def emit(rows, cols, block):
        rows_list.append(np.repeat(rows, len(cols)))
        cols_list.append(np.tile(cols, len(rows)))
        vals_list.append(np.asarray(block, dtype=float).ravel())

    _assemble_entries(ctx, emit)
    n = ctx.ndofs
    mat = sp.coo_matrix(
        (np.concatenate(vals_list),
         (np.concatenate(rows_list), np.concatenate(cols_list))),
        shape=(n, n),
    )
    return mat.tocsr()


# ---------------------------------------------------------------------------
# spec'd single-cell kernels
# ---------------------------------------------------------------------------

def interpolate_to_quad(basis: Basis1D, u: np.ndarray, dim: int,
                        gradients: bool = False):
    """Values (and reference gradients) of one cell's coefficients at the
    tensor quadrature points, canonical layout (q_d, ..., q_1)."""
    n = basis.n
    x = np.ascontiguousarray(np.asarray(u, dtype=float).reshape((1,) + (n,) * dim))
    ws = Workspace()
    tab_v = np.ascontiguousarray(basis.shape_values.T)
    vt = [tab_v] * dim
    if not gradients:
        y = forward_all(x, vt, ws, "itq")
        return _rev_to_can(y)[0].copy()
    tab_g = np.ascontiguousarray(basis.shape_grads.T)
    gt = [tab_g] * dim
    grads, val = forward_gradients(x, vt, gt, ws, "itq", with_value=True)
    return (_rev_to_can(val)[0].copy(), [_rev_to_can(g)[0].copy() for g in grads])


def integrate_against_basis(basis: Basis1D, w: np.ndarray, dim: int) -> np.ndarray:
    """Adjoint of interpolate_to_quad: (sum_q phi_i(x_q) W_q)_i."""
    q = basis.quad.n
    y = np.asarray(w, dtype=float).reshape((1,) + (q,) * dim)
    y = np.ascontiguousarray(_rev_to_can(y))  # canonical -> reversed (involution)
    ws = Workspace()
    vt = [np.ascontiguousarray(basis.shape_values.T)] * dim
    out = backward_all(y, vt, ws, "iab")
    return out[0].copy()


def _rev_to_can(y: np.ndarray) -> np.ndarray:
    d = y.ndim - 1
    return np.ascontiguousarray(y.transpose((0,) + tuple(range(d, 0, -1))))

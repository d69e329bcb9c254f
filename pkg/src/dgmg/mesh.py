"""Nested hierarchies of quadrilateral/hexahedral meshes on the unit box.

Levels are structured tensor grids: level l has (coarse * 2^l)^d cells.  The
topology is always structured (cell neighbors are index shifts); distortion
only moves vertex coordinates, so multilinear geometry coexists with implicit
structured adjacency.  Vertex grids are stored with axes (i_d, ..., i_1, comp)
so that C-order flattening matches the lexicographic cell/vertex ids used by
the DoF layout (direction 1 fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Cell",
    "MeshLevel",
    "MeshHierarchy",
    "VertexPatch",
    "ColorPartition",
    "build_hierarchy",
    "distort",
    "enumerate_vertex_patches",
    "color_cells_redblack",
    "color_patches_structured",
    "color_graph_dsatur",
    "patch_conflict_graph",
    "surrogate_lengths",
    "dump_level",
    "check_conformity",
    "check_nestedness",
]


@dataclass(frozen=True)
class Cell:
    """View of a single cell: corner coordinates in lexicographic order
    (corner c = sum_t s_t 2^(t-1) for offsets s in {0,1}^d)."""

    id: int
    vertices: np.ndarray  # (2^d, d)
    mapping: str          # "cartesian" | "multilinear"
    lengths: np.ndarray | None  # (d,) when cartesian


class MeshLevel:
    def __init__(self, dim: int, index: int, ncells_dim: int,
                 vertex_grid: np.ndarray, cartesian: bool,
                 lengths: np.ndarray | None):
        self.dim = dim
        self.index = index
        self.ncells_dim = ncells_dim
        self.vertex_grid = vertex_grid  # (n+1, ..., n+1, d)
        self.cartesian = cartesian
        self.lengths = lengths          # (d,) uniform per direction, if cartesian

    @property
    def ncells(self) -> int:
        return self.ncells_dim ** self.dim

    @property
    def nvertices(self) -> int:
        return (self.ncells_dim + 1) ** self.dim

    def cell_grid_shape(self) -> tuple[int, ...]:
        return (self.ncells_dim,) * self.dim

    def corner_offsets(self) -> np.ndarray:
        """(2^d, d) binary offsets, lexicographic (s_1 fastest)."""
        d = self.dim
        out = np.empty((2 ** d, d), dtype=np.int64)
        for c in range(2 ** d):
            for t in range(d):
                out[c, t] = (c >> t) & 1
        return out

    def cell_corners(self, ids: np.ndarray | None = None) -> np.ndarray:
        """Corner coordinates, shape (ncells_selected, 2^d, d).

        The full array is computed once and cached; slices share it."""
        if getattr(self, "_corners", None) is None:
            d, n = self.dim, self.ncells_dim
            corners = np.empty((2 ** d,) + (n,) * d + (d,))
            for c, s in enumerate(self.corner_offsets()):
                sl = tuple(slice(s[d - 1 - ax], s[d - 1 - ax] + n)
                           for ax in range(d))
                corners[c] = self.vertex_grid[sl]
            self._corners = np.ascontiguousarray(
                np.moveaxis(corners, 0, -2).reshape(self.ncells, 2 ** d, d))
        if ids is not None:
            return self._corners[np.asarray(ids)]
        return self._corners

    def cell(self, cell_id: int) -> Cell:
        verts = self.cell_corners(np.array([cell_id]))[0]
        return Cell(
            id=cell_id,
            vertices=verts,
            mapping="cartesian" if self.cartesian else "multilinear",
            lengths=None if self.lengths is None else self.lengths.copy(),
        )

    def cell_multi_index(self, cell_id: int) -> tuple[int, ...]:
        """(c_1, ..., c_d) with c_1 fastest in the linear id."""
        n = self.ncells_dim
        out = []
        for _ in range(self.dim):
            out.append(cell_id % n)
            cell_id //= n
        return tuple(out)


@dataclass
class MeshHierarchy:
    dim: int
    coarse_cells_per_dim: int
    levels: list[MeshLevel]
    distortion_factor: float = 0.0
    distortion_seed: int | None = None

    @property
    def finest(self) -> MeshLevel:
        return self.levels[-1]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def _cartesian_vertex_grid(dim: int, n: int) -> np.ndarray:
    coords = np.linspace(0.0, 1.0, n + 1)
    grid = np.empty((n + 1,) * dim + (dim,))
    for t in range(1, dim + 1):
        shape = [1] * dim
        shape[dim - t] = n + 1
        grid[..., t - 1] = coords.reshape(shape)
    return grid


def build_hierarchy(dim: int, coarse_cells_per_dim: int, max_level: int) -> MeshHierarchy:
    """Cartesian hierarchy on [0,1]^d, levels 0..max_level."""
    if dim not in (1, 2, 3):
        raise ValueError("dim must be 1, 2 or 3")
    if coarse_cells_per_dim < 1:
        raise ValueError("need at least one coarse cell per direction")
    if max_level < 0:
        raise ValueError("max_level must be >= 0")
    levels = []
    for l in range(max_level + 1):
        n = coarse_cells_per_dim * 2 ** l
        h = np.full(dim, 1.0 / n)
        levels.append(MeshLevel(dim, l, n, _cartesian_vertex_grid(dim, n),
                                cartesian=True, lengths=h))
    return MeshHierarchy(dim=dim, coarse_cells_per_dim=coarse_cells_per_dim,
                         levels=levels)


def _refine_vertex_grid(coarse: np.ndarray, dim: int, n: int) -> np.ndarray:
    """Midpoint refinement: children of multilinear cells keep straight edges,
    so new vertices are arithmetic means of the surrounding coarse vertices."""
    fine = np.empty((2 * n + 1,) * dim + (dim,))
    for parity in range(2 ** dim):
        s = [(parity >> t) & 1 for t in range(dim)]  # s[t] for direction t+1
        target = tuple(slice(s[dim - 1 - ax], None, 2) for ax in range(dim))
        acc = None
        count = 0
        for sub in range(2 ** dim):
            t_off = [(sub >> t) & 1 for t in range(dim)]
            if any(t_off[t] > s[t] for t in range(dim)):
                continue
            src = tuple(
                slice(t_off[dim - 1 - ax],
                      t_off[dim - 1 - ax] + n + 1 - s[dim - 1 - ax])
                for ax in range(dim)
            )
            block = coarse[src]
            acc = block.copy() if acc is None else acc + block
            count += 1
        fine[target] = acc / count
    return fine


def _check_positive_jacobians(level: MeshLevel) -> None:
    """Sample the multilinear Jacobian determinant at 3^d Gauss points."""
    from .polybasis import gauss_quadrature

    d = level.dim
    pts = gauss_quadrature(3).points
    # evaluate in chunks to bound memory
    n_chunk = max(1, 2_000_000 // (3 ** d * 2 ** d))
    all_corners = level.cell_corners()
    grids = np.meshgrid(*([pts] * d), indexing="ij")
    ref = np.stack([g.ravel() for g in grids], axis=-1)  # (Q, d) dir order
    dN = _multilinear_grad_table(d, ref)                 # (2^d, Q, d)
    for start in range(0, level.ncells, n_chunk):
        c = all_corners[start:start + n_chunk]
        jac = np.einsum("fcx,cqt->fqxt", c, dN)
        det = np.linalg.det(jac)
        if not np.all(det > 0.0):
            bad = int(start + np.argwhere(~np.all(det > 0.0, axis=1))[0, 0])
            raise ValueError(
                f"nonpositive mapping Jacobian on level {level.index}, cell {bad}"
            )


def _multilinear_grad_table(d: int, ref: np.ndarray) -> np.ndarray:
    """Gradients of the 2^d multilinear corner shape functions at points
    ref (Q, d); returns (2^d, Q, d)."""
    q = ref.shape[0]
    out = np.empty((2 ** d, q, d))
    for c in range(2 ** d):
        s = [(c >> t) & 1 for t in range(d)]
        for t in range(d):
            g = np.ones(q)
            for u in range(d):
                x = ref[:, u]
                if u == t:
                    g = g * (1.0 if s[u] else -1.0)
                else:
                    g = g * (x if s[u] else (1.0 - x))
            out[c, :, t] = g
    return out


def distort(hierarchy: MeshHierarchy, factor: float, rng_seed: int) -> MeshHierarchy:
    """Shift every interior vertex of the coarse level by factor*h_v in a
    uniformly random direction, then rebuild the finer levels by midpoint
    refinement so the hierarchy stays nested.

    h_v is the minimal length of the edges meeting at v (uniform coarse grid:
    the mesh width).  factor = 0 returns an identical geometry.
    """
    if not 0.0 <= factor < 0.5:
        raise ValueError("distortion factor must be in [0, 0.5)")
    dim = hierarchy.dim
    coarse = hierarchy.levels[0]
    grid = coarse.vertex_grid.copy()
    n = coarse.ncells_dim

    # minimal incident edge length per vertex, from the undistorted grid
    h_v = np.full((n + 1,) * dim, np.inf)
    for ax in range(dim):
        edge = np.linalg.norm(np.diff(coarse.vertex_grid, axis=ax), axis=-1)
        lo = [slice(None)] * dim
        hi = [slice(None)] * dim
        lo[ax] = slice(0, n)
        hi[ax] = slice(1, n + 1)
        np.minimum.at(h_v, tuple(lo), edge)
        np.minimum.at(h_v, tuple(hi), edge)

    interior = np.ones((n + 1,) * dim, dtype=bool)
    for ax in range(dim):
        sl = [slice(None)] * dim
        sl[ax] = [0, n]
        interior[tuple(sl)] = False

    rng = np.random.default_rng(rng_seed)
    n_int = int(interior.sum())
    dirs = rng.standard_normal((n_int, dim))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    while np.any(norms < 1e-12):  # essentially never; keep the magnitude exact
        redraw = norms[:, 0] < 1e-12
        dirs[redraw] = rng.standard_normal((int(redraw.sum()), dim))
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs /= norms
    grid[interior] += factor * h_v[interior, None] * dirs

    levels = [MeshLevel(dim, 0, n, grid, cartesian=factor == 0.0,
                        lengths=coarse.lengths if factor == 0.0 else None)]
    for l in range(1, hierarchy.num_levels):
        prev = levels[-1]
        fine_grid = _refine_vertex_grid(prev.vertex_grid, dim, prev.ncells_dim)
        levels.append(MeshLevel(dim, l, 2 * prev.ncells_dim, fine_grid,
                                cartesian=prev.cartesian,
                                lengths=None if not prev.cartesian
                                else prev.lengths / 2.0))
    out = MeshHierarchy(dim=dim, coarse_cells_per_dim=hierarchy.coarse_cells_per_dim,
                        levels=levels, distortion_factor=factor,
                        distortion_seed=rng_seed)
    if factor > 0.0:
        for level in out.levels:
            _check_positive_jacobians(level)
    return out


@dataclass(frozen=True)
class VertexPatch:
    """The 2^d cells around one interior vertex, ordered lexicographically by
    their position relative to the vertex."""

    vertex: tuple[int, ...]   # (v_1, ..., v_d)
    cells: np.ndarray         # (2^d,) cell ids


class VertexPatchSet:
    """All vertex patches of a level, in vectorized form."""

    def __init__(self, level: MeshLevel):
        d, n = level.dim, level.ncells_dim
        if n < 2:
            self.vertex_indices = np.empty((0, d), dtype=np.int64)
            self.cells = np.empty((0, 2 ** d), dtype=np.int64)
            self.level = level
            return
        # enumerate interior vertices with v_1 fastest (lexicographic ids)
        axes = [np.arange(1, n)] * d
        grids = np.meshgrid(*axes[::-1], indexing="ij")  # axes dir_d .. dir_1
        v = np.stack([g.ravel() for g in grids[::-1]], axis=-1)  # (P, d)
        strides = np.array([n ** (t) for t in range(d)])  # id = sum c_t n^(t-1)
        base = ((v - 1) * strides).sum(axis=1)
        offs = []
        for c in range(2 ** d):
            s = np.array([(c >> t) & 1 for t in range(d)])
            offs.append((s * strides).sum())
        self.vertex_indices = v
        self.cells = base[:, None] + np.array(offs)[None, :]
        self.level = level

    def __len__(self) -> int:
        return self.cells.shape[0]

    def patch(self, j: int) -> VertexPatch:
        return VertexPatch(vertex=tuple(int(t) for t in self.vertex_indices[j]),
                           cells=self.cells[j])


def enumerate_vertex_patches(level: MeshLevel) -> VertexPatchSet:
    """One patch per interior vertex; (n-1)^d patches on structured levels."""
    return VertexPatchSet(level)


@dataclass
class ColorPartition:
    """Disjoint index sets covering range(n_subdomains)."""

    n_subdomains: int
    sets: list[np.ndarray]

    @property
    def num_colors(self) -> int:
        return len(self.sets)

    def validate_cover(self) -> bool:
        seen = np.concatenate(self.sets) if self.sets else np.empty(0, dtype=int)
        return len(seen) == self.n_subdomains and len(np.unique(seen)) == self.n_subdomains


def color_cells_redblack(level: MeshLevel) -> ColorPartition:
    """Checkerboard by parity of the cell multi-index sum; two same-color
    cells never share a face."""
    d, n = level.dim, level.ncells_dim
    idx = np.indices((n,) * d).sum(axis=0).ravel() % 2
    ids = np.arange(level.ncells)
    sets = [ids[idx == 0], ids[idx == 1]]
    return ColorPartition(level.ncells, [s for s in sets if len(s)])


def color_patches_structured(level: MeshLevel,
                             patches: VertexPatchSet | None = None) -> ColorPartition:
    """Parqueting (vertex parity per direction) combined with red-black on
    each parity sublattice: at most 2^(d+1) colors; same-color patches share
    neither a cell nor a face."""
    patches = patches if patches is not None else enumerate_vertex_patches(level)
    v = patches.vertex_indices
    if len(v) == 0:
        return ColorPartition(0, [])
    parity = (v % 2)
    parquet = (parity * (2 ** np.arange(level.dim))[None, :]).sum(axis=1)
    rb = (v // 2).sum(axis=1) % 2
    color = parquet * 2 + rb
    ids = np.arange(len(v))
    sets = [ids[color == c] for c in range(2 ** (level.dim + 1))]
    return ColorPartition(len(v), [s for s in sets if len(s)])


def color_graph_dsatur(adjacency: list[set[int]]) -> ColorPartition:
    """DSATUR greedy coloring; deterministic: max saturation, ties by degree
    then by lowest index."""
    n = len(adjacency)
    color = np.full(n, -1, dtype=np.int64)
    sat: list[set[int]] = [set() for _ in range(n)]
    degree = np.array([len(a) for a in adjacency])
    for _ in range(n):
        best, best_key = -1, (-1, -1, 0)
        for v in range(n):
            if color[v] >= 0:
                continue
            key = (len(sat[v]), degree[v], -v)
            if key > best_key:
                best, best_key = v, key
        c = 0
        while c in sat[best]:
            c += 1
        color[best] = c
        for w in adjacency[best]:
            if color[w] < 0:
                sat[w].add(c)
    ncolors = int(color.max()) + 1 if n else 0
    ids = np.arange(n)
    return ColorPartition(n, [ids[color == c] for c in range(ncolors)])


def patch_conflict_graph(patches: VertexPatchSet,
                         multiplicative: bool = False) -> list[set[int]]:
    """Conflict adjacency for vertex patches: sharing a cell always
    conflicts; for multiplicative smoothers, cells sharing a face do too."""
    level = patches.level
    d, n = level.dim, level.ncells_dim
    cell_owner: dict[int, list[int]] = {}
    for j in range(len(patches)):
        for c in patches.cells[j]:
            cell_owner.setdefault(int(c), []).append(j)
    adj: list[set[int]] = [set() for _ in range(len(patches))]
    for owners in cell_owner.values():
        for a in owners:
            for b in owners:
                if a != b:
                    adj[a].add(b)
    if multiplicative:
        strides = [n ** t for t in range(d)]
        for cell, owners in cell_owner.items():
            multi = [(cell // strides[t]) % n for t in range(d)]
            for t in range(d):
                if multi[t] + 1 < n:
                    nb = cell + strides[t]
                    for a in owners:
                        for b in cell_owner.get(nb, ()):
                            if a != b:
                                adj[a].add(b)
                                adj[b].add(a)
    return adj


def surrogate_lengths(corners: np.ndarray) -> np.ndarray:
    """Edge-averaged box dimensions of (batched) multilinear cells.

    corners: (..., 2^d, d) with lexicographic corner order; returns (..., d):
    per direction the mean length of the 2^(d-1) edges aligned with it.
    Placement/orientation of the surrogate box is irrelevant for separable
    operators; only the lengths enter the local factors.
    """
    corners = np.asarray(corners)
    d = corners.shape[-1]
    out = np.empty(corners.shape[:-2] + (d,))
    for t in range(d):
        lengths = []
        for c in range(2 ** d):
            if (c >> t) & 1:
                continue
            edge = corners[..., c + (1 << t), :] - corners[..., c, :]
            lengths.append(np.linalg.norm(edge, axis=-1))
        stack = np.stack(lengths, axis=-1)
        if np.any(stack <= 0.0):
            raise ValueError("degenerate (zero-length) edge")
        out[..., t] = stack.mean(axis=-1)
    return out


def dump_level(level: MeshLevel) -> str:
    """Plain-text dump: one `v x y [z]` line per vertex (lexicographic ids,
    direction 1 fastest), then one `c i0 i1 ...` line per cell listing its
    corner vertex ids in lexicographic corner order."""
    d, n = level.dim, level.ncells_dim
    verts = level.vertex_grid.reshape(-1, d)
    lines = [f"# dim {d} cells_per_dim {n}"]
    for p in verts:
        lines.append("v " + " ".join(f"{x:.17g}" for x in p))
    stride = [(n + 1) ** t for t in range(d)]
    for cell in range(level.ncells):
        multi = level.cell_multi_index(cell)
        ids = []
        for c in range(2 ** d):
            vid = sum((multi[t] + ((c >> t) & 1)) * stride[t] for t in range(d))
            ids.append(vid)
        lines.append("c " + " ".join(str(i) for i in ids))
    return "\n".join(lines) + "\n"


def check_conformity(level: MeshLevel) -> bool:
    """Exact face matching: every interior face, reconstructed independently
    from both adjacent cells' corner lists, has identical vertex coordinates;
    every other face lies on the domain boundary."""
    d, n = level.dim, level.ncells_dim
    corners = level.cell_corners().reshape((n,) * d + (2 ** d, d))
    for t in range(d):  # face normal along direction t+1
        ax = d - 1 - t
        left = [slice(None)] * d
        right = [slice(None)] * d
        left[ax] = slice(0, n - 1)
        right[ax] = slice(1, n)
        hi = [c for c in range(2 ** d) if (c >> t) & 1]
        lo = [c for c in range(2 ** d) if not (c >> t) & 1]
        face_left = corners[tuple(left)][..., hi, :]
        face_right = corners[tuple(right)][..., lo, :]
        if not np.array_equal(face_left, face_right):
            return False
    return np.all(np.isfinite(level.vertex_grid))


def check_nestedness(hier: MeshHierarchy, tol: float = 1e-13) -> bool:
    """Each parent cell equals the union of its 2^d children: the children's
    outer corners coincide with the parent's corners, and shared child
    corners are the multilinear midpoints of the parent."""
    for l in range(hier.num_levels - 1):
        coarse, fine = hier.levels[l], hier.levels[l + 1]
        expect = _refine_vertex_grid(coarse.vertex_grid, hier.dim, coarse.ncells_dim)
        if not np.allclose(expect, fine.vertex_grid, atol=tol, rtol=0.0):
            return False
    return True

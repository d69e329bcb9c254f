import numpy as np
import pytest

from dgmg import mesh


def test_build_hierarchy_counts():
    h = mesh.build_hierarchy(2, 2, 1)
    assert h.levels[0].ncells == 4
    assert h.levels[1].ncells == 16
    patches = mesh.enumerate_vertex_patches(h.levels[0])
    assert len(patches) == 1
    h3 = mesh.build_hierarchy(3, 2, 3)
    assert h3.levels[3].ncells == 4096
    assert len(mesh.enumerate_vertex_patches(h3.levels[3])) == 3375


def test_patch_counts_structured():
    h = mesh.build_hierarchy(2, 4, 0)
    assert len(mesh.enumerate_vertex_patches(h.levels[0])) == 9


def test_cell_corners_cartesian():
    h = mesh.build_hierarchy(2, 2, 0)
    lvl = h.levels[0]
    c = lvl.cell(0)
    assert np.allclose(c.vertices, [[0, 0], [0.5, 0], [0, 0.5], [0.5, 0.5]])
    c3 = lvl.cell(3)
    assert np.allclose(c3.vertices, [[0.5, 0.5], [1, 0.5], [0.5, 1], [1, 1]])


def test_conformity_and_nestedness_cartesian():
    h = mesh.build_hierarchy(2, 2, 2)
    for lvl in h.levels:
        assert mesh.check_conformity(lvl)
    assert mesh.check_nestedness(h)


@pytest.mark.parametrize("dim", [2, 3])
def test_distort_zero_factor_identical(dim):
    h = mesh.build_hierarchy(dim, 2, 1)
    hd = mesh.distort(h, 0.0, rng_seed=42)
    for a, b in zip(h.levels, hd.levels):
        assert np.array_equal(a.vertex_grid, b.vertex_grid)


def test_distort_displacement_magnitude():
    h = mesh.build_hierarchy(2, 8, 1)
    hd = mesh.distort(h, 0.25, rng_seed=7)
    g0 = h.levels[0].vertex_grid
    g1 = hd.levels[0].vertex_grid
    diff = np.linalg.norm(g1 - g0, axis=-1)
    interior = diff[1:-1, 1:-1]
    h0 = 1.0 / 8
    assert np.allclose(interior, 0.25 * h0, atol=1e-14)
    # boundary vertices unmoved
    assert np.all(diff[0, :] == 0) and np.all(diff[-1, :] == 0)
    assert np.all(diff[:, 0] == 0) and np.all(diff[:, -1] == 0)


def test_distort_reproducible_and_nested():
    h = mesh.build_hierarchy(2, 4, 2)
    d1 = mesh.distort(h, 0.25, rng_seed=3)
    d2 = mesh.distort(h, 0.25, rng_seed=3)
    for a, b in zip(d1.levels, d2.levels):
        assert np.array_equal(a.vertex_grid, b.vertex_grid)
    assert mesh.check_nestedness(d1)
    for lvl in d1.levels:
        assert mesh.check_conformity(lvl)


def test_distort_different_seed_differs():
    h = mesh.build_hierarchy(2, 4, 0)
    d1 = mesh.distort(h, 0.2, rng_seed=1)
    d2 = mesh.distort(h, 0.2, rng_seed=2)
    assert not np.array_equal(d1.levels[0].vertex_grid, d2.levels[0].vertex_grid)


def test_distort_rejects_large_factor():
    h = mesh.build_hierarchy(2, 2, 0)
    with pytest.raises(ValueError):
        mesh.distort(h, 0.5, rng_seed=0)


def test_redblack_cells():
    h = mesh.build_hierarchy(2, 2, 0)
    cp = mesh.color_cells_redblack(h.levels[0])
    assert cp.num_colors == 2
    assert cp.validate_cover()
    sets = [set(s.tolist()) for s in cp.sets]
    assert {0, 3} in sets and {1, 2} in sets
    h3 = mesh.build_hierarchy(3, 2, 0)
    cp3 = mesh.color_cells_redblack(h3.levels[0])
    assert cp3.num_colors == 2
    assert all(len(s) == 4 for s in cp3.sets)


def _patch_cells_conflict(level, patches, i, j, faces=False):
    ci = set(patches.cells[i].tolist())
    cj = set(patches.cells[j].tolist())
    if ci & cj:
        return True
    if not faces:
        return False
    d, n = level.dim, level.ncells_dim
    strides = [n**t for t in range(d)]
    for a in ci:
        for t in range(d):
            pos = (a // strides[t]) % n
            for nb in ([a + strides[t]] if pos + 1 < n else []) + \
                      ([a - strides[t]] if pos > 0 else []):
                if nb in cj:
                    return True
    return False


@pytest.mark.parametrize("dim,coarse,level,expected", [
    (2, 2, 3, 8),
    (3, 2, 2, 16),
])
def test_structured_patch_coloring_counts(dim, coarse, level, expected):
    h = mesh.build_hierarchy(dim, coarse, level)
    lvl = h.levels[level]
    patches = mesh.enumerate_vertex_patches(lvl)
    cp = mesh.color_patches_structured(lvl, patches)
    assert cp.num_colors == expected
    assert cp.validate_cover()


def test_structured_patch_coloring_single_patch():
    h = mesh.build_hierarchy(2, 2, 0)
    cp = mesh.color_patches_structured(h.levels[0])
    assert cp.num_colors == 1


def test_structured_patch_coloring_proper():
    h = mesh.build_hierarchy(2, 2, 2)
    lvl = h.levels[2]
    patches = mesh.enumerate_vertex_patches(lvl)
    cp = mesh.color_patches_structured(lvl, patches)
    for s in cp.sets:
        for a in range(len(s)):
            for b in range(a + 1, len(s)):
                assert not _patch_cells_conflict(lvl, patches, s[a], s[b],
                                                 faces=True)


def test_dsatur_empty_and_complete():
    cp = mesh.color_graph_dsatur([set() for _ in range(5)])
    assert cp.num_colors == 1
    k4 = [set(range(4)) - {i} for i in range(4)]
    cp = mesh.color_graph_dsatur(k4)
    assert cp.num_colors == 4
    assert cp.validate_cover()


def test_dsatur_deterministic():
    adj = [{1, 2}, {0, 2}, {0, 1, 3}, {2}]
    c1 = mesh.color_graph_dsatur(adj)
    c2 = mesh.color_graph_dsatur(adj)
    for a, b in zip(c1.sets, c2.sets):
        assert np.array_equal(a, b)


def test_dsatur_patch_graph_color_count():
    h = mesh.build_hierarchy(2, 2, 3)
    lvl = h.levels[3]
    patches = mesh.enumerate_vertex_patches(lvl)
    adj = mesh.patch_conflict_graph(patches, multiplicative=True)
    cp = mesh.color_graph_dsatur(adj)
    assert cp.validate_cover()
    assert cp.num_colors <= 20
    # proper coloring under the declared conflict relation
    for s in cp.sets:
        ss = set(s.tolist())
        for v in s:
            assert not (adj[v] & ss)


def test_surrogate_lengths_cartesian_identity():
    h = mesh.build_hierarchy(2, 2, 0)
    corners = h.levels[0].cell_corners()
    sl = mesh.surrogate_lengths(corners)
    assert np.allclose(sl, 0.5)
    h3 = mesh.build_hierarchy(3, 4, 0)
    sl3 = mesh.surrogate_lengths(h3.levels[0].cell_corners())
    assert np.allclose(sl3, 0.25)


def test_surrogate_lengths_shifted_vertex():
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.2, 1.1]])
    sl = mesh.surrogate_lengths(corners)
    # x-edges: (v0,v1) length 1 and (v2,v3) length sqrt(1.2^2+0.1^2)
    lx = 0.5 * (1.0 + np.hypot(1.2, 0.1))
    ly = 0.5 * (1.0 + np.hypot(0.2, 1.1))
    assert np.allclose(sl, [lx, ly], atol=1e-14)


def test_surrogate_lengths_axis_aligned_shift():
    # axis-aligned distortion: lengths are plain averages per direction
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.2, 1.0]])
    sl = mesh.surrogate_lengths(corners)
    assert np.allclose(sl, [1.1, np.mean([1.0, np.hypot(0.2, 1.0)])])


def test_surrogate_degenerate_edge_raises():
    corners = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        mesh.surrogate_lengths(corners)


def test_dump_level_roundtrip():
    h = mesh.build_hierarchy(2, 2, 0)
    text = mesh.dump_level(h.levels[0])
    lines = [l for l in text.strip().splitlines() if not l.startswith("#")]
    vlines = [l for l in lines if l.startswith("v ")]
    clines = [l for l in lines if l.startswith("c ")]
    assert len(vlines) == 9 and len(clines) == 4
    first = np.array([float(x) for x in vlines[0].split()[1:]])
    assert np.allclose(first, [0.0, 0.0])
    ids = [int(x) for x in clines[0].split()[1:]]
    assert ids == [0, 1, 3, 4]


def test_vertex_patch_cells_order():
    h = mesh.build_hierarchy(2, 4, 0)
    patches = mesh.enumerate_vertex_patches(h.levels[0])
    p = patches.patch(0)  # vertex (1, 1)
    assert p.vertex == (1, 1)
    assert p.cells.tolist() == [0, 1, 4, 5]

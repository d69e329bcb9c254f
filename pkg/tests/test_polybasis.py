import numpy as np
import pytest

from dgmg import polybasis as pb

import oracles


def test_gauss_lobatto_small_degrees():
    assert np.allclose(pb.gauss_lobatto_nodes(1), [0.0, 1.0])
    assert np.allclose(pb.gauss_lobatto_nodes(2), [0.0, 0.5, 1.0])
    s5 = np.sqrt(5.0)
    expect = [0.0, (5 - s5) / 10, (5 + s5) / 10, 1.0]
    assert np.allclose(pb.gauss_lobatto_nodes(3), expect, atol=1e-14)


def test_gauss_lobatto_rejects_degree_zero():
    with pytest.raises(ValueError):
        pb.gauss_lobatto_nodes(0)


@pytest.mark.parametrize("k", range(1, 16))
def test_gauss_lobatto_structure(k):
    nodes = pb.gauss_lobatto_nodes(k)
    assert nodes[0] == 0.0 and nodes[-1] == 1.0
    assert np.all(np.diff(nodes) > 0)
    assert len(nodes) == k + 1


def test_gauss_quadrature_small():
    q1 = pb.gauss_quadrature(1)
    assert np.allclose(q1.points, [0.5]) and np.allclose(q1.weights, [1.0])
    q2 = pb.gauss_quadrature(2)
    expect = [(1 - 1 / np.sqrt(3)) / 2, (1 + 1 / np.sqrt(3)) / 2]
    assert np.allclose(sorted(q2.points), expect)
    assert np.allclose(q2.weights, [0.5, 0.5])
    # exactness degree 3 with two points
    assert abs(np.sum(q2.weights * q2.points**3) - 0.25) < 1e-15


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 16])
def test_gauss_quadrature_monomial_exactness(n):
    q = pb.gauss_quadrature(n)
    assert abs(q.weights.sum() - 1.0) < 1e-14
    for m in range(2 * n):
        exact = 1.0 / (m + 1)
        got = float(np.sum(q.weights * q.points**m))
        assert abs(got - exact) < 1e-13


@pytest.mark.parametrize("k", [1, 2, 3, 5, 9, 15])
def test_basis_cardinality_and_partition_of_unity(k):
    b = pb.Basis1D.make(k)
    # cardinality at the nodes
    vals = pb.lagrange_values(b.nodes, b.nodes)
    assert np.allclose(vals, np.eye(k + 1), atol=1e-13)
    # partition of unity at all tabulated points
    assert np.allclose(b.shape_values.sum(axis=0), 1.0, atol=1e-13)
    assert np.allclose(b.boundary_values.sum(axis=1), 1.0, atol=1e-13)
    # gradients sum to zero (derivative of the constant)
    assert np.allclose(b.shape_grads.sum(axis=0), 0.0, atol=1e-12)


def test_basis_derivative_against_oracle():
    k = 4
    b = pb.Basis1D.make(k)
    coeffs = oracles.lagrange_coeffs(b.nodes)
    for i, c in enumerate(coeffs):
        dc = oracles.poly_deriv(c)
        for q, x in enumerate(b.quad.points):
            assert abs(b.shape_grads[i, q] - oracles.poly_eval(dc, x)) < 1e-11


def test_penalty_values():
    assert pb.sipg_penalty(1.0, 3, 1.0, 1.0) == pytest.approx(24.0)
    assert pb.sipg_penalty(4.0, 3, 1.0, 1.0) == pytest.approx(96.0)
    ratio = pb.sipg_penalty(1.0, 7, 2.0, 2.0) / pb.sipg_penalty(1.0, 3, 2.0, 2.0)
    assert ratio == pytest.approx(56.0 / 12.0)
    with pytest.raises(ValueError):
        pb.sipg_penalty(1.0, 3, -1.0, 1.0)


def test_cell_factor_mass_and_bulk_k1():
    b = pb.Basis1D.make(1)
    f = pb.univariate_cell_factors(b, 1.0)
    assert np.allclose(f.mass, [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], atol=1e-14)
    assert np.allclose(f.bulk, [[1, -1], [-1, 1]], atol=1e-14)


def test_face_consistency_block_k1():
    b = pb.Basis1D.make(1)
    g = pb._face_consistency(b, 1.0, 0, 1.0)
    assert np.allclose(g, [[1.0, -1.0], [0.0, 0.0]], atol=1e-14)


@pytest.mark.parametrize("k", range(1, 16))
def test_cell_factor_spd_gamma_one(k):
    b = pb.Basis1D.make(k)
    f = pb.univariate_cell_factors(b, 1.0, gamma_hat=1.0)
    assert np.allclose(f.stiffness, f.stiffness.T, atol=1e-12)
    assert np.linalg.eigvalsh(f.stiffness)[0] > 0.0
    assert np.linalg.eigvalsh(f.mass)[0] > 0.0


@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_cell_factor_against_1d_oracle(k):
    """Single cell with both faces at the boundary equals the one-cell dense
    SIPG assembly."""
    b = pb.Basis1D.make(k)
    f = pb.univariate_cell_factors(b, 0.7)
    oracle = oracles.dense_1d_sipg(b.nodes, [0.7])
    assert np.allclose(f.stiffness, oracle, atol=1e-12)
    mass = oracles.dense_1d_mass(b.nodes, [0.7])
    assert np.allclose(f.mass, mass, atol=1e-13)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
@pytest.mark.parametrize("hs", [(1.0, 1.0), (0.5, 0.5), (0.4, 0.8)])
def test_patch_factor_against_1d_oracle(k, hs):
    """Patch matrix equals the dense two-cell SIPG assembly entrywise."""
    b = pb.Basis1D.make(k)
    hp, hm = hs
    f = pb.univariate_patch_factors(b, hp, hm)
    oracle = oracles.dense_1d_sipg(b.nodes, [hp, hm])
    assert np.allclose(f.stiffness, oracle, atol=1e-12)
    assert np.allclose(f.stiffness, f.stiffness.T, atol=1e-13)
    mass = oracles.dense_1d_mass(b.nodes, [hp, hm])
    assert np.allclose(f.mass, mass, atol=1e-13)


def test_patch_diagonal_block_is_cell_factor():
    """A+ equals the cell factor on I+ whose right face is interior with the
    actual neighbor length."""
    k = 3
    b = pb.Basis1D.make(k)
    hp, hm = 0.5, 0.25
    patch = pb.univariate_patch_factors(b, hp, hm)
    cell = pb.univariate_cell_factors(b, hp, pb.BOUNDARY, pb.interior(hm))
    n = k + 1
    assert np.allclose(patch.stiffness[:n, :n], cell.stiffness, atol=1e-13)


def test_generalized_eig_identity_and_diagonal():
    pair = pb.generalized_sym_eig(np.eye(4), np.eye(4))
    assert np.allclose(pair.values, 1.0)
    assert np.allclose(pair.vectors @ pair.vectors.T, np.eye(4), atol=1e-12)
    a = np.diag([1.0, 2.0])
    m = np.diag([4.0, 1.0])
    pair = pb.generalized_sym_eig(a, m)
    assert np.allclose(sorted(pair.values), [0.25, 2.0], atol=1e-14)
    # columns are M-orthonormal: z^T M z = I
    assert np.allclose(pair.vectors.T @ m @ pair.vectors, np.eye(2), atol=1e-13)


def test_generalized_eig_random_residual():
    rng = np.random.default_rng(3)
    n = 8
    q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    a = q @ np.diag(rng.uniform(0.5, 4.0, n)) @ q.T
    m = q @ np.diag(rng.uniform(0.5, 2.0, n)) @ q.T
    a = 0.5 * (a + a.T)
    m = 0.5 * (m + m.T)
    pair = pb.generalized_sym_eig(a, m)
    z, lam = pair.vectors, pair.values
    assert np.all(np.diff(lam) >= -1e-12)
    res = np.linalg.norm(a @ z - m @ z @ np.diag(lam)) / np.linalg.norm(a)
    assert res < 1e-10
    assert np.linalg.norm(z.T @ a @ z - np.diag(lam)) <= 1e-10 * np.linalg.norm(a)
    assert np.linalg.norm(z.T @ m @ z - np.eye(n)) <= 1e-10


def test_generalized_eig_mass_not_spd():
    with pytest.raises(pb.MassNotSPDError):
        pb.generalized_sym_eig(np.eye(3), -np.eye(3))


def test_generalized_eig_batched_matches_single():
    rng = np.random.default_rng(5)
    n, bsz = 4, 7
    a = rng.standard_normal((bsz, n, n))
    a = a + a.transpose(0, 2, 1) + 6 * np.eye(n)
    m = rng.standard_normal((bsz, n, n)) * 0.1
    m = m @ m.transpose(0, 2, 1) + np.eye(n)
    z, lam = pb.generalized_sym_eig_batched(a, m)
    for i in range(bsz):
        pair = pb.generalized_sym_eig(a[i], m[i])
        assert np.allclose(lam[i], pair.values, atol=1e-11)
        res = np.linalg.norm(a[i] @ z[i] - m[i] @ z[i] @ np.diag(lam[i]))
        assert res / np.linalg.norm(a[i]) < 1e-10


@pytest.mark.parametrize("k", [1, 3, 5])
def test_eigen_residual_invariant_for_factors(k):
    b = pb.Basis1D.make(k)
    f = pb.univariate_cell_factors(b, 0.3, gamma_hat=1.0)
    pair = pb.generalized_sym_eig(f.stiffness, f.mass)
    z, lam = pair.vectors, pair.values
    na = np.linalg.norm(f.stiffness)
    assert np.linalg.norm(z.T @ f.stiffness @ z - np.diag(lam)) <= 1e-10 * na
    assert np.linalg.norm(z.T @ f.mass @ z - np.eye(k + 1)) <= 1e-10

import numpy as np
import pytest

from dgmg import krylov as kr


def mat_op(a):
    def apply(x, out):
        np.matmul(a, x, out=out)
    return apply


def test_fractional_iterations_formula():
    # history (1, 1e-9) with delta 1e-8 -> 8/9
    nf = kr.fractional_iterations([1.0, 1e-9], 1e-8)
    assert nf == pytest.approx(8.0 / 9.0, abs=1e-12)


def test_fractional_iterations_exact_hit():
    nf = kr.fractional_iterations([1.0, 0.5, 1e-8], 1e-8)
    assert nf == pytest.approx(2.0)


def test_fractional_iterations_geometric():
    hist = [10.0 ** (-k) for k in range(0, 10)]
    nf = kr.fractional_iterations(hist, 1e-8)
    assert nf == pytest.approx(8.0, abs=1e-12)


def test_fractional_iterations_degenerate_crossing_falls_back():
    # exact zero at the crossing breaks the log interpolation
    with pytest.warns(UserWarning):
        nf = kr.fractional_iterations([1.0, 0.5, 0.0], 1e-8)
    assert nf == pytest.approx(2.0)
    # non-monotone history before the crossing is fine: only the crossing
    # pair enters the formula
    nf = kr.fractional_iterations([1.0, 2.0, 1e-9], 1e-8)
    assert 1.0 < nf <= 2.0


def test_fractional_iterations_continuity():
    hist = [10.0 ** (-0.37 * k) for k in range(0, 40)]
    base = kr.fractional_iterations(hist, 1e-8)
    pert = kr.fractional_iterations(hist, 1.01e-8)
    assert abs(base - pert) <= 0.05


def test_pcg_identity_preconditioner_diagonal():
    a = np.diag([1.0, 2.0, 3.0])
    b = np.array([1.0, 1.0, 1.0])
    res = kr.pcg(mat_op(a), b, max_it=10)
    assert res.converged and res.iterations <= 3
    assert np.allclose(res.x, b / np.diag(a), atol=1e-10)
    assert res.nu_frac <= res.iterations
    assert res.nu_frac > res.iterations - 1


def test_pcg_exact_preconditioner_one_step():
    rng = np.random.default_rng(0)
    q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    a = q @ np.diag(rng.uniform(1, 5, 6)) @ q.T
    ainv = np.linalg.inv(a)
    b = rng.standard_normal(6)
    res = kr.pcg(mat_op(a), b, mat_op(ainv), delta_red=1e-10)
    assert res.converged and res.iterations == 1


def test_pcg_nonconvergence_flag():
    rng = np.random.default_rng(1)
    n = 40
    d = np.linspace(1, 1e6, n)
    a = np.diag(d)
    b = rng.standard_normal(n)
    res = kr.pcg(mat_op(a), b, delta_red=1e-12, max_it=3)
    assert not res.converged
    assert res.iterations == 3


def test_pcg_zero_rhs():
    a = np.eye(3)
    res = kr.pcg(mat_op(a), np.zeros(3))
    assert res.converged and res.iterations == 0
    assert np.all(res.x == 0.0)


def test_pcg_history_invariants():
    rng = np.random.default_rng(2)
    n = 30
    q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    a = q @ np.diag(rng.uniform(0.5, 8.0, n)) @ q.T
    b = rng.standard_normal(n)
    res = kr.pcg(mat_op(a), b, delta_red=1e-8, max_it=200)
    assert res.converged
    hist = res.history
    assert all(h > 0 for h in hist[:-1])
    assert hist[-1] <= res.eps_tol
    assert res.nu_frac <= res.iterations
    # energy surrogate recorded alongside
    assert len(res.energy_history) >= 1


def test_pcg_preconditioned_residual_orthogonality():
    rng = np.random.default_rng(3)
    n = 25
    q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    a = q @ np.diag(rng.uniform(1.0, 4.0, n)) @ q.T
    binv = np.linalg.inv(a + 0.5 * np.eye(n))
    b = rng.standard_normal(n)

    residuals = []

    def op(x, out):
        np.matmul(a, x, out=out)

    def prec(r, out):
        residuals.append(r.copy())
        np.matmul(binv, r, out=out)

    kr.pcg(op, b, prec, delta_red=1e-12, max_it=6)
    for i in range(min(5, len(residuals))):
        for j in range(i + 1, min(5, len(residuals))):
            ri, rj = residuals[i], residuals[j]
            val = abs(ri @ (binv @ rj))
            scale = np.sqrt((ri @ (binv @ ri)) * (rj @ (binv @ rj)))
            assert val <= 1e-8 * scale


def test_gmres_exact_preconditioner_one_step():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((8, 8)) + 8 * np.eye(8)
    ainv = np.linalg.inv(a)
    b = rng.standard_normal(8)
    res = kr.pgmres(mat_op(a), b, mat_op(ainv), delta_red=1e-10)
    assert res.converged and res.iterations == 1
    assert np.linalg.norm(a @ res.x - b) <= 1e-9 * np.linalg.norm(b)


def test_gmres_monotone_history():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((30, 30)) + 10 * np.eye(30)
    b = rng.standard_normal(30)
    res = kr.pgmres(mat_op(a), b, delta_red=1e-10, max_it=60)
    assert res.converged
    hist = np.array(res.history)
    assert np.all(hist[1:] <= hist[:-1] + 1e-12 * hist[0])
    # final true residual honors the tolerance
    assert np.linalg.norm(a @ res.x - b) <= 1.1e-10 * np.linalg.norm(b)


def test_gmres_agrees_with_cg_on_spd():
    rng = np.random.default_rng(6)
    n = 40
    q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    a = q @ np.diag(rng.uniform(0.5, 6.0, n)) @ q.T
    binv = np.linalg.inv(np.diag(np.diag(a)))
    b = rng.standard_normal(n)
    res_cg = kr.pcg(mat_op(a), b, mat_op(binv), delta_red=1e-8, max_it=200)
    res_gm = kr.pgmres(mat_op(a), b, mat_op(binv), delta_red=1e-8, max_it=200)
    assert res_cg.converged and res_gm.converged
    assert abs(res_cg.iterations - res_gm.iterations) <= 1


def test_gmres_restart_path():
    rng = np.random.default_rng(7)
    n = 30
    a = rng.standard_normal((n, n)) + 12 * np.eye(n)
    b = rng.standard_normal(n)
    res = kr.pgmres(mat_op(a), b, delta_red=1e-9, max_it=100, restart=5)
    assert res.converged
    assert np.linalg.norm(a @ res.x - b) <= 1e-8 * np.linalg.norm(b)


def test_lanczos_min_ritz_positive_for_spd():
    rng = np.random.default_rng(8)
    n = 50
    q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    a = q @ np.diag(rng.uniform(0.3, 5.0, n)) @ q.T
    assert kr.lanczos_min_ritz(mat_op(a), n) > 0.0

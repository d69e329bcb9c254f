"""Independent reference implementations used as test oracles.

Everything here avoids the package's evaluation/contraction code paths:
polynomials are handled through numpy's dense polynomial coefficient
arithmetic (exact integration via antiderivatives), tensor operations through
explicit full matrices and loops.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import polynomial as P


def lagrange_coeffs(nodes: np.ndarray) -> list[np.ndarray]:
    """Monomial coefficient arrays of the Lagrange basis on `nodes`."""
    coeffs = []
    for i, xi in enumerate(nodes):
        c = np.array([1.0])
        for j, xj in enumerate(nodes):
            if j == i:
                continue
            c = P.polymul(c, np.array([-xj, 1.0])) / (xi - xj)
        coeffs.append(c)
    return coeffs


def poly_eval(c: np.ndarray, x: float) -> float:
    return float(P.polyval(x, c))


def poly_deriv(c: np.ndarray) -> np.ndarray:
    return P.polyder(c)


def integrate_product(c1: np.ndarray, c2: np.ndarray, a: float, b: float) -> float:
    """Exact integral of p1*p2 over [a, b]."""
    prod = P.polymul(c1, c2)
    anti = P.polyint(prod)
    return float(P.polyval(b, anti) - P.polyval(a, anti))


def dense_1d_sipg(nodes: np.ndarray, lengths: list[float],
                  gamma_hat: float = 1.0) -> np.ndarray:
    """Dense SIPG matrix of a 1D interval mesh with the 1/sqrt(2) averaging.

    Cells are [x_m, x_{m+1}] with the given lengths; the basis per cell is the
    reference Lagrange basis mapped affinely.  Dirichlet data enters weakly at
    both ends (full trace, h+ = h- = h).
    """
    k = len(nodes) - 1
    ncell = len(lengths)
    n = k + 1
    coeffs = lagrange_coeffs(nodes)
    dcoeffs = [poly_deriv(c) for c in coeffs]
    a = np.zeros((ncell * n, ncell * n))

    # bulk: (1/h) int phi_i' phi_j' on the reference cell
    for m, h in enumerate(lengths):
        for i in range(n):
            for j in range(n):
                a[m * n + i, m * n + j] += \
                    integrate_product(dcoeffs[j], dcoeffs[i], 0.0, 1.0) / h

    def val(i, p):
        return poly_eval(coeffs[i], float(p))

    def dval(i, p, h):
        return poly_eval(dcoeffs[i], float(p)) / h

    # boundary faces: gamma u v - (u' n) v - u (v' n)
    for (m, p, normal) in [(0, 0, -1.0), (ncell - 1, 1, +1.0)]:
        h = lengths[m]
        gamma = gamma_hat * k * (k + 1) * (2.0 / h)
        for i in range(n):
            for j in range(n):
                a[m * n + i, m * n + j] += (
                    gamma * val(j, p) * val(i, p)
                    - normal * dval(j, p, h) * val(i, p)
                    - normal * val(j, p) * dval(i, p, h)
                )

    # interior faces between cells m (left, trace at 1) and m+1 (at 0)
    for m in range(ncell - 1):
        hl, hr = lengths[m], lengths[m + 1]
        gamma = gamma_hat * k * (k + 1) * (1.0 / hl + 1.0 / hr)
        # dof blocks: L = cell m, R = cell m+1
        for (bi, pi, hi, si) in [(m, 1, hl, +1.0), (m + 1, 0, hr, -1.0)]:
            for (bj, pj, hj, sj) in [(m, 1, hl, +1.0), (m + 1, 0, hr, -1.0)]:
                for i in range(n):
                    for j in range(n):
                        jump_i = si * val(i, pi)
                        jump_j = sj * val(j, pj)
                        avg_di = dval(i, pi, hi)
                        avg_dj = dval(j, pj, hj)
                        a[bi * n + i, bj * n + j] += (
                            0.5 * gamma * jump_j * jump_i
                            - 0.5 * avg_dj * jump_i
                            - 0.5 * jump_j * avg_di
                        )
    return a


def dense_1d_mass(nodes: np.ndarray, lengths: list[float]) -> np.ndarray:
    k = len(nodes) - 1
    n = k + 1
    coeffs = lagrange_coeffs(nodes)
    m = np.zeros((len(lengths) * n, len(lengths) * n))
    for c, h in enumerate(lengths):
        for i in range(n):
            for j in range(n):
                m[c * n + i, c * n + j] = h * integrate_product(
                    coeffs[j], coeffs[i], 0.0, 1.0)
    return m


def naive_tensor_interp(tables: list[np.ndarray], u: np.ndarray) -> np.ndarray:
    """Full O(n^2d) interpolation: tables[t] (m_t, n_t) acts on direction t+1;
    u canonical (n_d, ..., n_1).  Returns canonical (m_d, ..., m_1)."""
    d = len(tables)
    full = None
    for t in range(d - 1, -1, -1):  # direction d is the slowest index
        full = tables[t] if full is None else np.kron(full, tables[t])
    out = full @ u.ravel()
    return out.reshape(tuple(tables[t].shape[0] for t in range(d - 1, -1, -1)))


def dense_kron(mats: list[np.ndarray]) -> np.ndarray:
    """kron(m_d, ..., m_1): mats listed per direction 1..d."""
    full = None
    for t in range(len(mats) - 1, -1, -1):
        full = mats[t] if full is None else np.kron(full, mats[t])
    return full


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar callable at points (m, d)."""
    x = np.atleast_2d(x)
    m, d = x.shape
    g = np.empty((m, d))
    for t in range(d):
        e = np.zeros(d)
        e[t] = h
        g[:, t] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_laplacian(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    x = np.atleast_2d(x)
    m, d = x.shape
    out = np.zeros(m)
    f0 = f(x)
    for t in range(d):
        e = np.zeros(d)
        e[t] = h
        out += (f(x + e) - 2 * f0 + f(x - e)) / h**2
    return out

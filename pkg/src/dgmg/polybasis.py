"""One-dimensional Lagrange basis on Gauss-Lobatto nodes, Gauss quadrature,
the univariate interior-penalty matrices and a symmetric-definite generalized
eigensolver.

Everything here works on the reference interval [0, 1].  The univariate
matrices are the building blocks of the Kronecker-sum local solvers: per
direction a mass matrix M and a stiffness matrix A that collects the bulk
term and the Nitsche face terms (penalty, consistency, adjoint consistency).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg

from .flops import FlopCounter, generalized_eig_flops

__all__ = [
    "Basis1D",
    "Quadrature1D",
    "FaceSpec",
    "UnivariateFactors",
    "EigenPair1D",
    "MassNotSPDError",
    "EigenSolveError",
    "gauss_lobatto_nodes",
    "gauss_quadrature",
    "lagrange_values",
    "lagrange_derivatives",
    "sipg_penalty",
    "univariate_cell_factors",
    "univariate_patch_factors",
    "generalized_sym_eig",
    "generalized_sym_eig_batched",
]


class MassNotSPDError(np.linalg.LinAlgError):
    """Raised when the mass matrix of a generalized pencil is not SPD."""


class EigenSolveError(np.linalg.LinAlgError):
    """Raised when the symmetric eigensolver fails to converge."""


def gauss_lobatto_nodes(k: int) -> np.ndarray:
    """k+1 Gauss-Lobatto points on [0, 1]: endpoints plus roots of P_k'.

    Degree 0 is rejected: the interior-penalty parameter scales with k(k+1)
    and vanishes, which is outside the supported discretizations.
    """
    if k < 1:
        raise ValueError("polynomial degree must be >= 1")
    if k == 1:
        return np.array([0.0, 1.0])
    ck = np.zeros(k + 1)
    ck[k] = 1.0
    dck = npleg.legder(ck)
    x = np.real(npleg.legroots(dck))
    # one Newton step to polish the companion-matrix roots
    d2ck = npleg.legder(dck)
    x = x - npleg.legval(x, dck) / npleg.legval(x, d2ck)
    x.sort()
    nodes = np.concatenate(([-1.0], x, [1.0]))
    return (nodes + 1.0) / 2.0


@dataclass(frozen=True)
class Quadrature1D:
    """Gauss-Legendre rule on [0, 1]."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points)


def gauss_quadrature(n: int) -> Quadrature1D:
    """n-point Gauss-Legendre rule on [0, 1], exact for degree <= 2n-1."""
    if n < 1:
        raise ValueError("quadrature point count must be >= 1")
    x, w = npleg.leggauss(n)
    return Quadrature1D(points=(x + 1.0) / 2.0, weights=w / 2.0)


def lagrange_values(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Table phi_i(x_q), shape (len(nodes), len(x)).

    Direct product evaluation; exact at the nodes themselves (no special
    casing needed) and well conditioned for the node counts used here.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m = len(nodes)
    vals = np.empty((m, len(x)))
    for i in range(m):
        num = np.ones_like(x)
        den = 1.0
        for l in range(m):
            if l == i:
                continue
            num *= x - nodes[l]
            den *= nodes[i] - nodes[l]
        vals[i] = num / den
    return vals

def lagrange_derivatives(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Table phi_i'(x_q) via the product rule; valid at arbitrary points."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m = len(nodes)
    grads = np.zeros((m, len(x)))
    for i in range(m):
        den = 1.0
        for l in range(m):
            if l != i:
                den *= nodes[i] - nodes[l]
        acc = np.zeros_like(x)
        for j in range(m):
            if j == i:
                continue
            term = np.ones_like(x)
            for l in range(m):
                if l == i or l == j:
                    continue
                term *= x - nodes[l]
            acc += term
        grads[i] = acc / den
    return grads


@dataclass(frozen=True)
class Basis1D:
    """Lagrange basis of degree k on Gauss-Lobatto nodes, with tabulated
    values/gradients at the quadrature points and at the endpoints."""

    degree: int
    nodes: np.ndarray
    quad: Quadrature1D
    shape_values: np.ndarray    # (k+1, n_q)
    shape_grads: np.ndarray     # (k+1, n_q)
    boundary_values: np.ndarray  # (2, k+1); row p = values at x=p
    boundary_grads: np.ndarray   # (2, k+1)

    @classmethod
    def make(cls, k: int, n_q: int | None = None) -> "Basis1D":
        # n_q = k+1 Gauss points: exact for the Cartesian bilinear form
        nodes = gauss_lobatto_nodes(k)
        quad = gauss_quadrature(k + 1 if n_q is None else n_q)
        ends = np.array([0.0, 1.0])
        return cls(
            degree=k,
            nodes=nodes,
            quad=quad,
            shape_values=lagrange_values(nodes, quad.points),
            shape_grads=lagrange_derivatives(nodes, quad.points),
            boundary_values=lagrange_values(nodes, ends).T.copy(),
            boundary_grads=lagrange_derivatives(nodes, ends).T.copy(),
        )

    @property
    def n(self) -> int:
        return self.degree + 1


def sipg_penalty(gamma_hat: float, k: int, h_plus: float, h_minus: float) -> float:
    """Edge penalty gamma_hat * k(k+1) * (1/h+ + 1/h-)."""
    if h_plus <= 0.0 or h_minus <= 0.0:
        raise ValueError("cell lengths must be positive")
    return gamma_hat * k * (k + 1) * (1.0 / h_plus + 1.0 / h_minus)


@dataclass(frozen=True)
class FaceSpec:
    """How one end of a 1D subdomain couples to the outside.

    `boundary=True` marks a physical boundary face (trace weight 1, penalty
    with h+ = h- = own length).  Interior faces use trace weight 1/2; the
    neighbor length enters the penalty, defaulting to the own length when
    unknown.
    """

    boundary: bool
    neighbor_length: float | None = None


BOUNDARY = FaceSpec(boundary=True)


def interior(neighbor_length: float | None = None) -> FaceSpec:
    return FaceSpec(boundary=False, neighbor_length=neighbor_length)


@dataclass(frozen=True)
class UnivariateFactors:
    """Per-direction factors of the Kronecker-sum local matrix.

    `stiffness` is the assembled A (bulk + Nitsche face terms) and `mass`
    the matching M; both are (k+1) square for cells and 2(k+1) square for
    vertex patches (block structure [plus, minus]).  The raw pieces are kept
    for tests.
    """

    mass: np.ndarray
    stiffness: np.ndarray
    bulk: np.ndarray
    nitsche: tuple[np.ndarray, np.ndarray]
    lengths: tuple[float, ...]
    interface: np.ndarray | None = None  # patch coupling block (plus, minus)


def _face_consistency(basis: Basis1D, h: float, p: int, eta: float) -> np.ndarray:
    """G[i_test, i_trial] = (-1)^(p+1) * (eta/h) * phi_trial'(p) * phi_test(p)."""
    sign = -1.0 if p == 0 else 1.0
    bv = basis.boundary_values[p]
    bg = basis.boundary_grads[p]
    return sign * (eta / h) * np.outer(bv, bg)


def _face_nitsche(basis: Basis1D, h: float, p: int, spec: FaceSpec,
                  gamma_hat: float) -> np.ndarray:
    """Nitsche block for face p: eta*gamma_e*M_p - G - G^T.

    The trace weight eta multiplies the penalty point mass as well: it is
    what the averaging operator produces when the form is restricted to one
    cell (interior faces see half the jump).
    """
    eta = 1.0 if spec.boundary else 0.5
    h_nb = h if spec.boundary or spec.neighbor_length is None else spec.neighbor_length
    gamma_e = sipg_penalty(gamma_hat, basis.degree, h, h_nb)
    bv = basis.boundary_values[p]
    g = _face_consistency(basis, h, p, eta)
    return eta * gamma_e * np.outer(bv, bv) - g - g.T


def _interval_mass_bulk(basis: Basis1D, h: float) -> tuple[np.ndarray, np.ndarray]:
    w = basis.quad.weights
    mass = h * (basis.shape_values * w) @ basis.shape_values.T
    bulk = (1.0 / h) * (basis.shape_grads * w) @ basis.shape_grads.T
    return mass, bulk


def univariate_cell_factors(basis: Basis1D, h: float,
                            left: FaceSpec = BOUNDARY, right: FaceSpec = BOUNDARY,
                            gamma_hat: float = 1.0) -> UnivariateFactors:
    """Univariate mass and stiffness-with-Nitsche factors of a cell."""
    if h <= 0.0:
        raise ValueError("interval length must be positive")
    mass, bulk = _interval_mass_bulk(basis, h)
    n0 = _face_nitsche(basis, h, 0, left, gamma_hat)
    n1 = _face_nitsche(basis, h, 1, right, gamma_hat)
    return UnivariateFactors(
        mass=mass, stiffness=bulk + n0 + n1, bulk=bulk,
        nitsche=(n0, n1), lengths=(h,),
    )


def univariate_patch_factors(basis: Basis1D, h_plus: float, h_minus: float,
                             left: FaceSpec = BOUNDARY, right: FaceSpec = BOUNDARY,
                             gamma_hat: float = 1.0) -> UnivariateFactors:
    """Blocked 2(k+1) factors of a two-cell vertex-patch direction.

    Interval I+ is the left subinterval, I- the right one.  The diagonal
    blocks are cell factors whose inner face is interior with the actual
    neighbor length; the coupling block carries the interface penalty,
    consistency and adjoint consistency with the 1/2 averaging weights.
    """
    if h_plus <= 0.0 or h_minus <= 0.0:
        raise ValueError("interval lengths must be positive")
    k = basis.degree
    fp = univariate_cell_factors(basis, h_plus, left, interior(h_minus), gamma_hat)
    fm = univariate_cell_factors(basis, h_minus, interior(h_plus), right, gamma_hat)

    gamma_e = sipg_penalty(gamma_hat, k, h_plus, h_minus)
    bv0, bv1 = basis.boundary_values
    bg0, bg1 = basis.boundary_grads
    # rows: test functions on I+ (traces at x=1); cols: trial on I- (at x=0)
    a_pm = (-0.5 * gamma_e) * np.outer(bv1, bv0) \
        - (0.5 / h_minus) * np.outer(bv1, bg0) \
        + (0.5 / h_plus) * np.outer(bg1, bv0)

    n = k + 1
    mass = np.zeros((2 * n, 2 * n))
    mass[:n, :n] = fp.mass
    mass[n:, n:] = fm.mass
    stiff = np.zeros((2 * n, 2 * n))
    stiff[:n, :n] = fp.stiffness
    stiff[n:, n:] = fm.stiffness
    stiff[:n, n:] = a_pm
    stiff[n:, :n] = a_pm.T
    bulk = np.zeros((2 * n, 2 * n))
    bulk[:n, :n] = fp.bulk
    bulk[n:, n:] = fm.bulk
    return UnivariateFactors(
        mass=mass, stiffness=stiff, bulk=bulk,
        nitsche=(fp.nitsche[0], fm.nitsche[1]),
        lengths=(h_plus, h_minus), interface=a_pm,
    )


@dataclass(frozen=True)
class EigenPair1D:
    """Generalized eigenpairs: Z^T A Z = diag(lam), Z^T M Z = I."""

    vectors: np.ndarray
    values: np.ndarray


def generalized_sym_eig(a: np.ndarray, m: np.ndarray,
                        counter: FlopCounter | None = None) -> EigenPair1D:
    """Solve the symmetric-definite pencil (A, M) via Cholesky reduction.

    Eigenvalues ascending.  Raises MassNotSPDError if M has no Cholesky
    factor and EigenSolveError if the reduced symmetric solve fails.
    """
    a = np.asarray(a, dtype=float)
    m = np.asarray(m, dtype=float)
    scale = np.linalg.norm(a, ord=np.inf)
    if scale > 0 and np.linalg.norm(a - a.T, ord=np.inf) > 1e-12 * scale:
        raise ValueError("stiffness matrix is not symmetric")
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise MassNotSPDError("mass not SPD") from exc
    import scipy.linalg as sla

    c = sla.solve_triangular(chol, a, lower=True)
    c = sla.solve_triangular(chol, c.T, lower=True)
    c = 0.5 * (c + c.T)
    try:
        lam, v = np.linalg.eigh(c)
    except np.linalg.LinAlgError as exc:
        raise EigenSolveError("symmetric eigensolver did not converge") from exc
    z = sla.solve_triangular(chol.T, v, lower=False)
    if counter is not None:
        counter.add("smoother_setup", generalized_eig_flops(a.shape[0]))
    return EigenPair1D(vectors=z, values=lam)


def generalized_sym_eig_batched(a: np.ndarray, m: np.ndarray,
                                counter: FlopCounter | None = None
                                ) -> tuple[np.ndarray, np.ndarray]:
    """Batched pencil solve for stacks (B, n, n); returns (Z, lam).

    Same reduction as the scalar version, vectorized with numpy's stacked
    cholesky/solve/eigh.
    """
    a = np.asarray(a, dtype=float)
    m = np.asarray(m, dtype=float)
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise MassNotSPDError("mass not SPD") from exc
    c = np.linalg.solve(chol, a)
    c = np.linalg.solve(chol, c.transpose(0, 2, 1))
    c = 0.5 * (c + c.transpose(0, 2, 1))
    lam, v = np.linalg.eigh(c)
    z = np.linalg.solve(chol.transpose(0, 2, 1), v)
    if counter is not None:
        counter.add("smoother_setup", a.shape[0] * generalized_eig_flops(a.shape[1]))
    return z, lam

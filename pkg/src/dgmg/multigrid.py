"""Nested DG transfer operators and the multigrid V-cycle preconditioner.

Prolongation is the embedding of a parent cell's polynomial into its 2^d
children, realized per direction by the two interval embedding matrices
E^0, E^1 (parent basis evaluated at the children's mapped nodes); restriction
is the Euclidean adjoint.  Geometry never enters: children are parameterized
through the parent's reference cell, so the same matrices serve Cartesian and
distorted hierarchies.

The coarse solve is direct by default (dense Cholesky for small levels,
sparse LU above); a Chebyshev-accelerated CG using the additive cell smoother
as inner preconditioner is available for the iterative path (tolerance 1e-8).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._tensor import Workspace, forward_all
from .dgop import (
    OperatorContext,
    apply_operator,
    assemble_dense,
    assemble_sparse,
    residual,
)
from .flops import FlopCounter
from .polybasis import Basis1D, lagrange_values
from .smoothers import LevelSmoother, SmootherConfig, make_level_smoother

__all__ = [
    "TransferPair",
    "build_transfer",
    "LevelTransfer",
    "MultigridConfig",
    "CoarseSolver",
    "VCycle",
]


@dataclass(frozen=True)
class TransferPair:
    """1D embedding matrices: E^s[i, j] = phi_j((x_i + s) / 2)."""

    e0: np.ndarray
    e1: np.ndarray


def build_transfer(basis: Basis1D) -> TransferPair:
    nodes = basis.nodes
    e0 = lagrange_values(nodes, nodes / 2.0).T.copy()
    e1 = lagrange_values(nodes, (nodes + 1.0) / 2.0).T.copy()
    return TransferPair(e0=np.ascontiguousarray(e0), e1=np.ascontiguousarray(e1))


class LevelTransfer:
    """Prolongation/restriction between one level pair (coarse -> fine)."""

    def __init__(self, pair: TransferPair, coarse_ctx: OperatorContext,
                 fine_ctx: OperatorContext,
                 counter: FlopCounter | None = None):
        self.pair = pair
        self.coarse = coarse_ctx
        self.fine = fine_ctx
        self.counter = counter
        self.ws = Workspace()
        d = coarse_ctx.layout.dim
        self.dim = d
        self.children = [[(s >> t) & 1 for t in range(d)]
                         for s in range(2 ** d)]

    def _tables(self, child) -> list[np.ndarray]:
        return [self.pair.e1 if child[t] else self.pair.e0
                for t in range(self.dim)]

    def _fine_view(self, vec: np.ndarray, child):
        """Strided view of the fine grid selecting one child per coarse cell,
        shaped (coarse cells ..., nodes ...)."""
        d = self.dim
        nc = self.coarse.level.ncells_dim
        n1 = self.fine.layout.n1d
        interleaved = vec.reshape(
            tuple(x for _ in range(d) for x in (nc, 2)) + (n1,) * d)
        sel = []
        for ax in range(d):
            sel.extend([slice(None), child[d - 1 - ax]])
        return interleaved[tuple(sel)]

    def prolongate(self, coarse_vec: np.ndarray,
                   out_fine: np.ndarray) -> np.ndarray:
        d = self.dim
        layout = self.coarse.layout
        xc = np.ascontiguousarray(
            coarse_vec.reshape((layout.ncells,) + layout.node_shape()))
        n1 = layout.n1d
        flops = 0.0
        for child in self.children:
            y = forward_all(xc, self._tables(child), self.ws, "pro")
            can = self.ws.get("proc", y.shape)
            np.copyto(can, y.transpose((0,) + tuple(range(d, 0, -1))))
            view = self._fine_view(out_fine, child)
            np.copyto(view, can.reshape(view.shape))
            flops += d * layout.ncells * n1 ** d * (2 * n1 - 1)
        if self.counter is not None:
            self.counter.add("transfer", flops)
        return out_fine

    def restrict(self, fine_vec: np.ndarray,
                 out_coarse: np.ndarray) -> np.ndarray:
        d = self.dim
        layout = self.coarse.layout
        n1 = layout.n1d
        out2 = out_coarse.reshape(layout.ncells, layout.cell_dofs)
        out2[:] = 0.0
        flops = 0.0
        for child in self.children:
            view = self._fine_view(fine_vec, child)
            buf = self.ws.get("resg", (layout.ncells,) + layout.node_shape())
            np.copyto(buf.reshape(view.shape), view)
            tables = [np.ascontiguousarray(t.T) for t in self._tables(child)]
            y = forward_all(buf, tables, self.ws, "res")
            can = self.ws.get("resc", y.shape)
            np.copyto(can, y.transpose((0,) + tuple(range(d, 0, -1))))
            out2 += can.reshape(layout.ncells, layout.cell_dofs)
            flops += d * layout.ncells * n1 ** d * (2 * n1 - 1)
        if self.counter is not None:
            self.counter.add("transfer", flops)
        return out_coarse


@dataclass(frozen=True)
class MultigridConfig:
    smoother: SmootherConfig = SmootherConfig()
    coarse: str = "auto"           # "auto" | "direct" | "chebyshev_cg"
    coarse_tol: float = 1e-8
    # dense Cholesky below this size, sparse LU above (both direct)
    dense_coarse_limit: int = 4096

    def __post_init__(self):
        if self.coarse not in ("auto", "direct", "chebyshev_cg"):
            raise ValueError("coarse must be auto, direct or chebyshev_cg")
        if self.coarse_tol <= 0.0:
            raise ValueError("coarse tolerance must be positive")


class CoarseSolver:
    """Level-0 solver: direct factorization or Chebyshev(ACS)-preconditioned
    CG to a 1e-8 relative residual."""

    def __init__(self, ctx: OperatorContext, basis: Basis1D,
                 config: MultigridConfig,
                 counter: FlopCounter | None = None):
        self.ctx = ctx
        self.config = config
        self.counter = counter
        n = ctx.ndofs
        mode = config.coarse
        if mode == "auto":
            # direct while the factorization stays cheap: dense for tiny
            # levels, sparse LU while the per-cell blocks are small; the
            # iterative path otherwise (large blocks make LU memory-bound)
            if n <= config.dense_coarse_limit or \
                    (ctx.layout.cell_dofs <= 256 and n <= 500_000):
                mode = "direct"
            else:
                mode = "chebyshev_cg"
        self.mode = mode
        if mode == "direct":
            if n <= config.dense_coarse_limit:
                import scipy.linalg as sla

                a = assemble_dense(ctx, via="quadrature")
                self._cho = sla.cho_factor(a)
                self._solve = self._solve_dense
            else:
                import scipy.sparse.linalg as spla

                a = assemble_sparse(ctx)
                self._lu = spla.splu(a.tocsc())
                self._solve = self._solve_sparse
        else:
            self._setup_chebyshev_cg(basis)
            self._solve = self._solve_cheb

    # --- direct paths ---
    def _solve_dense(self, b: np.ndarray, out: np.ndarray) -> None:
        import scipy.linalg as sla

        out[:] = sla.cho_solve(self._cho, b)

    def _solve_sparse(self, b: np.ndarray, out: np.ndarray) -> None:
        out[:] = self._lu.solve(b)

    # --- Chebyshev(ACS)-preconditioned CG ---
    def _setup_chebyshev_cg(self, basis: Basis1D) -> None:
        ctx = self.ctx
        cfg = SmootherConfig(kind="acs", omega=0.7, m_pre=1, m_post=1)
        self._acs = make_level_smoother(ctx, basis, cfg, counter=self.counter)
        lam_max = self._estimate_lambda_max()
        self._cheb_lo = 0.06 * lam_max
        self._cheb_hi = 1.2 * lam_max
        self._cheb_degree = 8

    def _acs_apply(self, r: np.ndarray, out: np.ndarray) -> None:
        """out = omega * sum_j R_j^T A_j^-1 R_j r (the ACS preconditioner)."""
        out[:] = 0.0
        self._acs.set.solve_partitioned(out, r, self._acs.all_parts,
                                        self._acs.config.omega)

    def _op(self, x: np.ndarray, out: np.ndarray) -> None:
        apply_operator(self.ctx, x, out=out, kernel="coarse_solve")

    def _estimate_lambda_max(self, iters: int = 20, seed: int = 1234) -> float:
        """Largest Ritz value of the ACS-preconditioned operator from a short
        preconditioned Lanczos (CG coefficient) recurrence."""
        n = self.ctx.ndofs
        rng = np.random.default_rng(seed)
        r = rng.standard_normal(n)
        z = np.empty(n)
        ap = np.empty(n)
        self._acs_apply(r, z)
        p = z.copy()
        rz = float(r @ z)
        alphas, betas = [], []
        for _ in range(iters):
            self._op(p, ap)
            pap = float(p @ ap)
            if pap <= 0.0 or rz <= 0.0:
                break
            alpha = rz / pap
            r = r - alpha * ap
            self._acs_apply(r, z)
            rz_new = float(r @ z)
            beta = rz_new / rz
            alphas.append(alpha)
            betas.append(beta)
            p = z + beta * p
            rz = rz_new
            if rz < 1e-28:
                break
        m = len(alphas)
        if m == 0:
            return 1.0
        t = np.zeros((m, m))
        for i in range(m):
            t[i, i] = 1.0 / alphas[i] + (betas[i - 1] / alphas[i - 1] if i else 0.0)
            if i + 1 < m:
                off = np.sqrt(betas[i]) / alphas[i]
                t[i, i + 1] = off
                t[i + 1, i] = off
        return float(np.linalg.eigvalsh(t)[-1])

    def _cheb_precond(self, b: np.ndarray, out: np.ndarray) -> None:
        """Fixed-degree Chebyshev iteration for A x = b preconditioned by the
        ACS operator, from x = 0; a fixed SPD polynomial preconditioner."""
        lo, hi = self._cheb_lo, self._cheb_hi
        theta = 0.5 * (hi + lo)
        delta = 0.5 * (hi - lo)
        n = b.size
        x = out
        x[:] = 0.0
        r = b.copy()
        z = np.empty(n)
        ap = np.empty(n)
        self._acs_apply(r, z)
        p = z.copy()
        alpha = 1.0 / theta
        for it in range(self._cheb_degree):
            x += alpha * p
            self._op(x, ap)
            np.subtract(b, ap, out=r)
            self._acs_apply(r, z)
            beta = (0.5 * delta * alpha) ** 2
            alpha = 1.0 / (theta - beta / alpha)
            p = z + beta * p

    def _solve_cheb(self, b: np.ndarray, out: np.ndarray) -> None:
        from .krylov import pcg

        n = b.size
        res = pcg(self._op, b, self._cheb_precond,
                  delta_red=self.config.coarse_tol, max_it=10 * n)
        if not res.converged:
            raise RuntimeError("coarse solve exceeded its iteration cap")
        out[:] = res.x

    def solve(self, b: np.ndarray, out: np.ndarray) -> np.ndarray:
        self._solve(b, out)
        if self.counter is not None and self.mode == "direct":
            self.counter.add("coarse_solve", 2.0 * self.ctx.ndofs ** 2)
        return out


class VCycle:
    """Multigrid V-cycle over a stack of level contexts, used as a linear
    preconditioner (zero initial guess on every level)."""

    def __init__(self, contexts: list[OperatorContext], basis: Basis1D,
                 config: MultigridConfig,
                 counter: FlopCounter | None = None,
                 count_per_subdomain: bool = False):
        self.contexts = contexts
        self.basis = basis
        self.config = config
        self.counter = counter
        self.smoothers: list[LevelSmoother | None] = [None]
        for ctx in contexts[1:]:
            self.smoothers.append(make_level_smoother(
                ctx, basis, config.smoother, counter=counter,
                count_per_subdomain=count_per_subdomain))
        pair = build_transfer(basis)
        self.transfers = [LevelTransfer(pair, contexts[l], contexts[l + 1],
                                        counter=counter)
                          for l in range(len(contexts) - 1)]
        self.coarse = CoarseSolver(contexts[0], basis, config, counter=counter)
        self._x = [ctx.new_vector() for ctx in contexts]
        self._b = [ctx.new_vector() for ctx in contexts]
        self._r = [ctx.new_vector() for ctx in contexts]

    @property
    def top(self) -> int:
        return len(self.contexts) - 1

    def vcycle(self, ell: int, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        """One V-cycle on level ell, in place on x (x is the initial guess)."""
        if ell == 0:
            self.coarse.solve(b, x)
            return x
        ctx = self.contexts[ell]
        smoother = self.smoothers[ell]
        cfg = self.config.smoother
        for _ in range(cfg.m_pre):
            smoother.smooth(x, b, reverse=False)
        residual(ctx, x, b, out=self._r[ell])
        self.transfers[ell - 1].restrict(self._r[ell], self._b[ell - 1])
        self._x[ell - 1][:] = 0.0
        self.vcycle(ell - 1, self._x[ell - 1], self._b[ell - 1])
        self.transfers[ell - 1].prolongate(self._x[ell - 1], self._r[ell])
        x += self._r[ell]
        for _ in range(cfg.m_post):
            smoother.smooth(x, b, reverse=cfg.symmetrize)
        return x

    def apply(self, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Preconditioner action: one V-cycle from a zero initial guess."""
        x = out if out is not None else np.empty_like(b)
        x[:] = 0.0
        return self.vcycle(self.top, x, b)

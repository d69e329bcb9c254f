"""Additive and multiplicative Schwarz smoothing sweeps over colored
subdomain sets.

The additive sweep computes one residual and applies all local solvers to it
(color by color, which is mathematically equivalent to the uncolored sum);
the multiplicative sweep refreshes the residual before every color.  Within a
color the subdomains write to disjoint dofs, so batched scatter adds are
conflict-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgop import OperatorContext, residual
from .fastdiag import CellSolverSet, PatchSolverSet
from .flops import FlopCounter
from .mesh import (
    ColorPartition,
    color_cells_redblack,
    color_graph_dsatur,
    color_patches_structured,
    enumerate_vertex_patches,
    patch_conflict_graph,
)
from .polybasis import Basis1D

__all__ = [
    "SmootherConfig",
    "SubdomainMap",
    "LevelSmoother",
    "make_level_smoother",
    "smooth_additive",
    "smooth_multiplicative",
    "restrict_to_subdomain",
    "scatter_add_subdomain",
]

_KINDS = ("acs", "mcs", "avs", "mvs")


@dataclass(frozen=True)
class SmootherConfig:
    kind: str = "acs"
    omega: float = 1.0
    m_pre: int = 1
    m_post: int = 1
    coloring: str = "structured"   # "structured" | "graph"
    symmetrize: bool = False       # reverse color order in post-smoothing

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown smoother kind {self.kind!r}")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError("relaxation must satisfy 0 < omega <= 1")
        if self.m_pre < 0 or self.m_post < 0:
            raise ValueError("smoothing step counts must be >= 0")
        if self.coloring not in ("structured", "graph"):
            raise ValueError("coloring must be 'structured' or 'graph'")

    @property
    def additive(self) -> bool:
        return self.kind in ("acs", "avs")

    @property
    def cell_based(self) -> bool:
        return self.kind in ("acs", "mcs")


class SubdomainMap:
    """Explicit R_j index lists: per subdomain the global dofs of V_j."""

    def __init__(self, indices: list[np.ndarray]):
        self.indices = indices

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def for_cells(cls, ctx: OperatorContext) -> "SubdomainMap":
        n = ctx.layout.cell_dofs
        return cls([np.arange(j * n, (j + 1) * n)
                    for j in range(ctx.layout.ncells)])

    @classmethod
    def for_patches(cls, solver_set: PatchSolverSet) -> "SubdomainMap":
        return cls([solver_set.subdomain_indices(j)
                    for j in range(len(solver_set.patches))])


def restrict_to_subdomain(subdomains: SubdomainMap, x: np.ndarray,
                          j: int) -> np.ndarray:
    return x[subdomains.indices[j]]


def scatter_add_subdomain(subdomains: SubdomainMap, local: np.ndarray, j: int,
                          x: np.ndarray, scale: float = 1.0) -> None:
    np.add.at(x, subdomains.indices[j], scale * local)


def _cell_conflict_graph(ctx: OperatorContext) -> list[set[int]]:
    """Face-sharing conflicts between cells (multiplicative cell smoother)."""
    d, n = ctx.layout.dim, ctx.level.ncells_dim
    adj: list[set[int]] = [set() for _ in range(ctx.layout.ncells)]
    strides = [n ** t for t in range(d)]
    for c in range(ctx.layout.ncells):
        for t in range(d):
            if (c // strides[t]) % n + 1 < n:
                nb = c + strides[t]
                adj[c].add(nb)
                adj[nb].add(c)
    return adj


class LevelSmoother:
    """One level's Schwarz smoother: solver set + coloring + sweep drivers."""

    def __init__(self, ctx: OperatorContext, config: SmootherConfig,
                 solver_set, colors: ColorPartition):
        self.ctx = ctx
        self.config = config
        self.set = solver_set
        self.colors = colors
        # per color, per congruence class id selections (precomputed)
        self.parts = [solver_set.partition(ids) for ids in colors.sets]
        self.all_parts = solver_set.partition(None)
        self._r = np.zeros(ctx.ndofs)

    def smooth(self, x: np.ndarray, b: np.ndarray, reverse: bool = False) -> None:
        if self.config.additive:
            self.smooth_additive(x, b)
        else:
            self.smooth_multiplicative(x, b, reverse=reverse)

    def smooth_additive(self, x: np.ndarray, b: np.ndarray,
                        colors: ColorPartition | None = None) -> None:
        """One residual, then relaxed local corrections color by color."""
        omega = self.config.omega
        residual(self.ctx, x, b, out=self._r)
        if colors is None:
            for parts in self.parts:
                self.set.solve_partitioned(x, self._r, parts, omega)
        else:
            for ids in colors.sets:
                self.set.solve_scaled_into(x, self._r, ids, omega,
                                           safe_accumulate=True)

    def smooth_additive_uncolored(self, x: np.ndarray, b: np.ndarray) -> None:
        """Reference uncolored sum (overlap-safe accumulation)."""
        omega = self.config.omega
        residual(self.ctx, x, b, out=self._r)
        self.set.solve_scaled_into(x, self._r, None, omega,
                                   safe_accumulate=True)

    def smooth_multiplicative(self, x: np.ndarray, b: np.ndarray,
                              reverse: bool = False) -> None:
        """Residual refresh inside the loop over colors."""
        omega = self.config.omega
        order = range(len(self.parts))
        if reverse:
            order = reversed(order)
        for c in order:
            residual(self.ctx, x, b, out=self._r)
            self.set.solve_partitioned(x, self._r, self.parts[c], omega)


def make_level_smoother(ctx: OperatorContext, basis: Basis1D,
                        config: SmootherConfig,
                        counter: FlopCounter | None = None,
                        count_per_subdomain: bool = False) -> LevelSmoother:
    """Build the solver set and coloring demanded by the configuration."""
    if config.cell_based:
        solver_set = CellSolverSet(ctx.level, basis, ctx.gamma_hat,
                                   counter=counter,
                                   count_per_subdomain=count_per_subdomain)
        if config.additive:
            # no write conflicts: a single color equals the uncolored sum
            colors = ColorPartition(ctx.layout.ncells,
                                    [np.arange(ctx.layout.ncells)])
        elif config.coloring == "structured":
            colors = color_cells_redblack(ctx.level)
        else:
            colors = color_graph_dsatur(_cell_conflict_graph(ctx))
    else:
        patches = enumerate_vertex_patches(ctx.level)
        solver_set = PatchSolverSet(ctx.level, basis, ctx.gamma_hat,
                                    patches=patches, counter=counter,
                                    count_per_subdomain=count_per_subdomain)
        if config.coloring == "structured":
            colors = color_patches_structured(ctx.level, patches)
        else:
            adj = patch_conflict_graph(patches,
                                       multiplicative=not config.additive)
            colors = color_graph_dsatur(adj)
    return LevelSmoother(ctx, config, solver_set, colors)


def smooth_additive(smoother: LevelSmoother, x: np.ndarray,
                    b: np.ndarray) -> np.ndarray:
    """Module-level driver for the additive sweep (in place, returns x)."""
    if not smoother.config.additive:
        raise ValueError("smoother is not additive")
    smoother.smooth_additive(x, b)
    return x


def smooth_multiplicative(smoother: LevelSmoother, x: np.ndarray, b: np.ndarray,
                          reverse: bool = False) -> np.ndarray:
    if smoother.config.additive:
        raise ValueError("smoother is not multiplicative")
    smoother.smooth_multiplicative(x, b, reverse=reverse)
    return x

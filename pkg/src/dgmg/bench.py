"""Benchmark driver: manufactured problem, experiment configuration, solver
runs with iteration/FLOP records, and CSV/markdown reporting.

The manufactured solution is a superposition of three normalized Gaussian
bells (sigma = 1/3) whose centers are fixed in 3D and projected onto z = 0 in
2D.  The exponent uses the squared distance ||x - x_i||^2 / sigma^2 by
default; the non-squared variant is available behind a flag for comparison
but is not used for error norms.
"""

from __future__ import annotations

import io
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import dgop, mesh
from .dgop import OperatorContext, apply_operator, compute_l2_error, compute_rhs
from .flops import FlopCounter
from .krylov import pcg, pgmres
from .multigrid import MultigridConfig, VCycle
from .polybasis import Basis1D
from .smoothers import SmootherConfig, make_level_smoother

__all__ = [
    "ManufacturedProblem",
    "manufactured",
    "ExperimentConfig",
    "RunRecord",
    "run_experiment",
    "report",
    "complexity_report",
]

SIGMA = 1.0 / 3.0
SOURCE_POINTS_3D = np.array([
    [0.0, 0.0, 0.0],
    [0.25, 0.85, 0.85],
    [0.6, 0.4, 0.4],
])


@dataclass(frozen=True)
class ManufacturedProblem:
    dim: int
    sigma: float
    points: np.ndarray
    literal_exponent: bool

    def u(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        c = 1.0 / (np.sqrt(2.0 * np.pi) * self.sigma)
        out = np.zeros(len(x))
        for p in self.points:
            r2 = ((x - p) ** 2).sum(axis=1)
            if self.literal_exponent:
                out += np.exp(-np.sqrt(r2) / self.sigma**2)
            else:
                out += np.exp(-r2 / self.sigma**2)
        return c * out

    def f(self, x: np.ndarray) -> np.ndarray:
        """-Laplace(u), analytically."""
        x = np.atleast_2d(x)
        d = self.dim
        s2 = self.sigma**2
        c = 1.0 / (np.sqrt(2.0 * np.pi) * self.sigma)
        out = np.zeros(len(x))
        for p in self.points:
            r2 = ((x - p) ** 2).sum(axis=1)
            if self.literal_exponent:
                r = np.sqrt(np.maximum(r2, 1e-300))
                out += -(1.0 / s2**2 - (d - 1) / (s2 * r)) * np.exp(-r / s2)
            else:
                out += (2.0 * d / s2 - 4.0 * r2 / s2**2) * np.exp(-r2 / s2)
        return c * out

    def g(self, x: np.ndarray) -> np.ndarray:
        return self.u(x)


def manufactured(dim: int, literal_exponent: bool = False) -> ManufacturedProblem:
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    pts = SOURCE_POINTS_3D[:, :dim].copy()
    return ManufacturedProblem(dim=dim, sigma=SIGMA, points=pts,
                               literal_exponent=literal_exponent)


_OMEGA_DEFAULTS = {
    ("acs", "cartesian"): 0.7,
    ("acs", "distorted"): 0.50,
    ("mcs", "cartesian"): 1.0,
    ("mcs", "distorted"): 0.75,
    ("avs", "cartesian"): 0.25,
    ("avs", "distorted"): 0.25,
    ("mvs", "cartesian"): 1.0,
    ("mvs", "distorted"): 1.0,
}


@dataclass
class ExperimentConfig:
    dim: int = 2
    degree: int = 3
    coarse_cells: int | None = None
    level_min: int = 3
    level_max: int = 3
    mesh_kind: str = "cartesian"       # "cartesian" | "distorted"
    distortion: float = 0.25
    seed: int = 1234
    gamma_hat: float | None = None
    smoother: str = "acs"
    omega: float | None = None
    m_pre: int = 1
    m_post: int = 1
    coloring: str = "structured"
    solver: str | None = None          # "cg" | "gmres"
    delta_red: float = 1e-8
    count_flops: bool = False
    symmetrize: bool | None = None
    coarse_solver: str = "auto"
    max_it: int = 200
    literal_exponent: bool = False

    def resolved(self) -> "ExperimentConfig":
        """Fill defaults and check combination consistency."""
        cfg = replace(self)
        if cfg.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if cfg.mesh_kind not in ("cartesian", "distorted"):
            raise ValueError("mesh must be cartesian or distorted")
        if cfg.smoother not in ("acs", "mcs", "avs", "mvs"):
            raise ValueError("smoother must be one of acs, mcs, avs, mvs")
        if cfg.level_min > cfg.level_max or cfg.level_min < 0:
            raise ValueError("invalid level range")
        if cfg.coarse_cells is None:
            cfg.coarse_cells = 2 if cfg.mesh_kind == "cartesian" \
                else (32 if cfg.dim == 2 else 8)
        if cfg.gamma_hat is None:
            cfg.gamma_hat = 1.0 if cfg.mesh_kind == "cartesian" else 4.0
        if cfg.mesh_kind == "distorted" and cfg.gamma_hat < 4.0:
            warnings.warn("distorted meshes usually need gamma_hat >= 4 "
                          "for stability")
        if cfg.omega is None:
            cfg.omega = _OMEGA_DEFAULTS[(cfg.smoother, cfg.mesh_kind)]
        multiplicative = cfg.smoother in ("mcs", "mvs")
        if cfg.solver is None:
            if multiplicative:
                cfg.solver = "gmres" if cfg.mesh_kind == "cartesian" else "cg"
            else:
                cfg.solver = "cg"
        if cfg.solver not in ("cg", "gmres"):
            raise ValueError("solver must be cg or gmres")
        if cfg.symmetrize is None:
            cfg.symmetrize = bool(multiplicative and cfg.solver == "cg")
        if multiplicative and cfg.solver == "cg" and not cfg.symmetrize:
            raise ValueError("multiplicative smoothing inside CG requires "
                             "the symmetrized V-cycle")
        if cfg.mesh_kind == "distorted" and cfg.smoother in ("avs", "mvs"):
            raise ValueError("vertex-patch smoothers are not supported on "
                             "distorted meshes (no surrogate path)")
        return cfg

    def echo(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RunRecord:
    config: dict
    level: int
    dofs_per_level: list[int]
    converged: bool
    iterations: int
    nu_frac: float
    wall_time: float
    flops: dict[str, float]
    c_factors: dict[str, float]
    ncells: int
    l2_error: float | None = None

    @property
    def dofs(self) -> int:
        return self.dofs_per_level[-1]


def _build_stack(cfg: ExperimentConfig, level: int,
                 counter: FlopCounter | None):
    hier = mesh.build_hierarchy(cfg.dim, cfg.coarse_cells, level)
    if cfg.mesh_kind == "distorted":
        hier = mesh.distort(hier, cfg.distortion, rng_seed=cfg.seed)
    basis = Basis1D.make(cfg.degree)
    ctxs = [dgop.make_context(lvl, basis, gamma_hat=cfg.gamma_hat,
                              counter=counter)
            for lvl in hier.levels]
    smoother_cfg = SmootherConfig(kind=cfg.smoother, omega=cfg.omega,
                                  m_pre=cfg.m_pre, m_post=cfg.m_post,
                                  coloring=cfg.coloring,
                                  symmetrize=cfg.symmetrize)
    mg_cfg = MultigridConfig(smoother=smoother_cfg, coarse=cfg.coarse_solver)
    cycle = VCycle(ctxs, basis, mg_cfg, counter=counter)
    return hier, basis, ctxs, cycle


def _complexity_probe(cfg: ExperimentConfig, ctx: OperatorContext,
                      basis: Basis1D) -> dict[str, float]:
    """Counted FLOPs of the reference per-subdomain algorithm on one level:
    one operator application and one additive-cell smoother step, plus the
    modeled per-subdomain local-solver setup."""
    probe = FlopCounter()
    saved = ctx.counter
    ctx.counter = probe
    smoother_cfg = SmootherConfig(kind="acs", omega=0.7)
    smoother = make_level_smoother(ctx, basis, smoother_cfg, counter=probe,
                                   count_per_subdomain=True)
    setup = probe.get("smoother_setup")
    u = np.zeros(ctx.ndofs)
    apply_operator(ctx, u, kernel="operator_apply")
    one_apply = probe.get("operator_apply")
    smoother.smooth(u, np.zeros(ctx.ndofs))
    ctx.counter = saved
    return {
        "apply": one_apply,
        "smoother_residual": probe.get("residual"),
        "local_solvers": probe.get("local_solver"),
        "setup": setup,
        "smoother_step": probe.get("residual") + probe.get("local_solver"),
    }


def _normalized_factors(probe: dict[str, float], ncells: int, k: int,
                        d: int) -> dict[str, float]:
    """C = n_FLOP / (n_sub * n1d^order) with n1d = k+1 (the per-direction dof
    count; honest operation counts are polynomials in k+1, so normalizing by
    it is what makes the local-solver factor degree-independent)."""
    n1 = k + 1
    vol = ncells * float(n1) ** (d + 1)
    return {
        "apply": probe["apply"] / vol,
        "smoother_step": probe["smoother_step"] / vol,
        "local_solvers": probe["local_solvers"] / vol,
        "setup": probe["setup"] / (ncells * float(n1) ** 3),
    }


def _run_single_level(cfg: ExperimentConfig, level: int,
                      problem: ManufacturedProblem,
                      compute_error: bool) -> RunRecord:
    """One solve; all per-level state dies with this frame, which keeps the
    peak memory of multi-level ranges at a single stack."""
    counter = FlopCounter() if cfg.count_flops else None
    t0 = time.perf_counter()
    hier, basis, ctxs, cycle = _build_stack(cfg, level, counter)
    ctx = ctxs[-1]
    b = compute_rhs(ctx, problem.f, problem.g)

    def op(x, out):
        apply_operator(ctx, x, out=out)

    def pre(r, out):
        cycle.apply(r, out)

    if cfg.solver == "cg":
        res = pcg(op, b, pre, delta_red=cfg.delta_red, max_it=cfg.max_it,
                  counter=counter)
    else:
        res = pgmres(op, b, pre, delta_red=cfg.delta_red,
                     max_it=cfg.max_it, counter=counter)
    wall = time.perf_counter() - t0
    probe = {}
    factors = {}
    if cfg.count_flops:
        probe = _complexity_probe(cfg, ctx, basis)
        factors = _normalized_factors(probe, ctx.layout.ncells,
                                      cfg.degree, cfg.dim)
    err = None
    if compute_error:
        err = compute_l2_error(ctx, res.x, problem.u)
    flops = dict(counter.snapshot()) if counter is not None else {}
    flops.update({f"probe_{k}": v for k, v in probe.items()})
    return RunRecord(
        config=cfg.echo(), level=level,
        dofs_per_level=[c.ndofs for c in ctxs],
        converged=res.converged, iterations=res.iterations,
        nu_frac=res.nu_frac, wall_time=wall, flops=flops,
        c_factors=factors, ncells=ctx.layout.ncells, l2_error=err,
    )


def run_experiment(config: ExperimentConfig,
                   compute_error: bool = False) -> list[RunRecord]:
    """Solve the manufactured problem on each level in the configured range;
    one record per level.  Non-convergence is recorded, not raised."""
    cfg = config.resolved()
    problem = manufactured(cfg.dim, cfg.literal_exponent)
    return [_run_single_level(cfg, level, problem, compute_error)
            for level in range(cfg.level_min, cfg.level_max + 1)]


_COLUMNS = ["level", "dofs", "smoother", "omega", "nu", "nu_frac",
            "flops_total", "flops_local_solvers", "flops_residual", "c_cmplx"]


def _record_row(rec: RunRecord) -> list:
    total = sum(v for k, v in rec.flops.items() if not k.startswith("probe_"))
    return [
        rec.level,
        rec.dofs,
        rec.config["smoother"],
        rec.config["omega"],
        rec.iterations,
        rec.nu_frac,
        total,
        rec.flops.get("local_solver", 0.0),
        rec.flops.get("residual", 0.0),
        rec.c_factors.get("apply", 0.0),
    ]


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def report(records: list[RunRecord], fmt: str = "csv") -> str:
    """Stable-column report; CSV uses 17 significant digits so numeric fields
    round-trip bitwise."""
    if not records:
        raise ValueError("no records to report")
    if fmt == "csv":
        out = io.StringIO()
        out.write(",".join(_COLUMNS) + "\n")
        for rec in records:
            out.write(",".join(_fmt(v) for v in _record_row(rec)) + "\n")
        return out.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(_COLUMNS) + " |",
                 "|" + "|".join(["---"] * len(_COLUMNS)) + "|"]
        for rec in records:
            vals = _record_row(rec)
            cells = [v if isinstance(v, str) else
                     (str(v) if isinstance(v, int) else format(v, ".6g"))
                     for v in vals]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError("format must be csv or markdown")


def complexity_report(records: list[RunRecord], fmt: str = "markdown") -> str:
    """Normalized work-load factors per polynomial degree.

    Rows: operator application, additive smoother step, local solvers (all
    x n1d^(d+1)) and the per-subdomain solver setup (x n1d^3), with
    n1d = k+1.  Requires records produced with FLOP counting enabled."""
    recs = [r for r in records if r.c_factors]
    if not recs:
        raise ValueError("complexity report requires FLOP counting")
    recs = sorted(recs, key=lambda r: r.config["degree"])
    degrees = [r.config["degree"] for r in recs]
    rows = [
        ("operator apply", "apply", "n1d^(d+1)"),
        ("smoother step (ACS)", "smoother_step", "n1d^(d+1)"),
        ("local solvers", "local_solvers", "n1d^(d+1)"),
        ("setup of local solvers", "setup", "n1d^3"),
    ]
    if fmt == "csv":
        out = io.StringIO()
        out.write("quantity," + ",".join(f"k={k}" for k in degrees) + ",order\n")
        for label, key, order in rows:
            vals = [format(r.c_factors[key], ".17g") for r in recs]
            out.write(f"{label}," + ",".join(vals) + f",{order}\n")
        return out.getvalue()
    header = "| factor | " + " | ".join(f"k={k}" for k in degrees) + " | order |"
    sep = "|" + "|".join(["---"] * (len(degrees) + 2)) + "|"
    lines = [header, sep]
    for label, key, order in rows:
        vals = " | ".join(format(r.c_factors[key], ".4g") for r in recs)
        lines.append(f"| {label} | {vals} | {order} |")
    return "\n".join(lines) + "\n"

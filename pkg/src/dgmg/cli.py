"""Benchmark command line.

Runs the configured experiment over a level range and emits a CSV or
markdown report.  Exit codes: 0 when every run converged, 2 when any run
failed to converge, 1 on usage errors.

Options may come from a flat key=value config file (--config); command line
flags override file entries.  Keys in the file use the flag names without
leading dashes, e.g. ``smoother=mvs``.
"""

from __future__ import annotations

import argparse
import sys

from .bench import ExperimentConfig, complexity_report, report, run_experiment


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with code 1
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_levels(text: str) -> tuple[int, int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return int(lo), int(hi)
    val = int(text)
    return val, val


def _parse_degrees(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def build_parser() -> _Parser:
    p = _Parser(prog="dgmg-bench",
                description="matrix-free DG multigrid benchmark driver")
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--dim", type=int, choices=(2, 3))
    p.add_argument("--degree",
                   help="polynomial degree K, or a comma list for the "
                        "complexity report (e.g. 7,11,15)")
    p.add_argument("--levels", help="finest level L or a range Lmin..Lmax")
    p.add_argument("--coarse", type=int, help="coarse cells per direction")
    p.add_argument("--mesh", choices=("cartesian", "distorted"))
    p.add_argument("--distortion", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--penalty-hat", type=float, dest="penalty_hat")
    p.add_argument("--smoother", choices=("acs", "mcs", "avs", "mvs"))
    p.add_argument("--omega", type=float)
    p.add_argument("--pre", type=int, help="pre-smoothing steps")
    p.add_argument("--post", type=int, help="post-smoothing steps")
    p.add_argument("--coloring", choices=("structured", "graph"))
    p.add_argument("--solver", choices=("cg", "gmres"))
    p.add_argument("--tol", type=float, help="relative residual reduction")
    p.add_argument("--count-flops", action="store_true", default=None)
    p.add_argument("--format", choices=("csv", "markdown"), dest="fmt")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--symmetrize", choices=("auto", "on", "off"))
    p.add_argument("--coarse-solver",
                   choices=("auto", "direct", "chebyshev_cg"))
    p.add_argument("--max-it", type=int)
    p.add_argument("--complexity-out",
                   help="also write the normalized-complexity table here "
                        "(requires --count-flops)")
    p.add_argument("--dump-mesh",
                   help="write the finest-level mesh as plain text and exit")
    p.add_argument("--l2-error", action="store_true", default=None,
                   help="also compute the L2 error against the manufactured "
                        "solution")
    return p


_DEFAULTS = {
    "dim": 2, "degree": "3", "levels": "3", "coarse": None,
    "mesh": "cartesian", "distortion": 0.25, "seed": 1234,
    "penalty_hat": None, "smoother": "acs", "omega": None,
    "pre": 1, "post": 1, "coloring": "structured", "solver": None,
    "tol": 1e-8, "count_flops": False, "fmt": "csv", "out": None,
    "symmetrize": "auto", "coarse_solver": "auto", "max_it": 200,
    "complexity_out": None, "dump_mesh": None, "l2_error": False,
}

_CASTS = {
    "dim": int, "coarse": int, "distortion": float, "seed": int,
    "penalty_hat": float, "omega": float, "pre": int, "post": int,
    "tol": float, "count_flops": lambda v: v.lower() in ("1", "true", "yes"),
    "max_it": int,
    "l2_error": lambda v: v.lower() in ("1", "true", "yes"),
}


def _merge_options(args: argparse.Namespace) -> dict:
    merged = dict(_DEFAULTS)
    if args.config:
        for key, val in _read_config_file(args.config).items():
            key = key.replace("-", "_")
            if key not in merged:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _CASTS.get(key, str)(val)
    for key in merged:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _experiment_config(opts: dict, degree: int) -> ExperimentConfig:
    lo, hi = _parse_levels(str(opts["levels"]))
    symmetrize = {"auto": None, "on": True, "off": False}[opts["symmetrize"]]
    return ExperimentConfig(
        dim=opts["dim"], degree=degree, coarse_cells=opts["coarse"],
        level_min=lo, level_max=hi, mesh_kind=opts["mesh"],
        distortion=opts["distortion"], seed=opts["seed"],
        gamma_hat=opts["penalty_hat"], smoother=opts["smoother"],
        omega=opts["omega"], m_pre=opts["pre"], m_post=opts["post"],
        coloring=opts["coloring"], solver=opts["solver"],
        delta_red=opts["tol"], count_flops=opts["count_flops"],
        symmetrize=symmetrize, coarse_solver=opts["coarse_solver"],
        max_it=opts["max_it"],
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = _merge_options(args)
        degrees = _parse_degrees(str(opts["degree"]))
        if not degrees:
            raise ValueError("no degree given")

        if opts["dump_mesh"]:
            from . import mesh as meshmod

            cfg = _experiment_config(opts, degrees[0]).resolved()
            hier = meshmod.build_hierarchy(cfg.dim, cfg.coarse_cells,
                                           cfg.level_max)
            if cfg.mesh_kind == "distorted":
                hier = meshmod.distort(hier, cfg.distortion, cfg.seed)
            with open(opts["dump_mesh"], "w", encoding="utf-8") as fh:
                fh.write(meshmod.dump_level(hier.finest))
            return 0

        if opts["complexity_out"] and not opts["count_flops"]:
            raise ValueError("--complexity-out requires --count-flops")
    except (ValueError, OSError) as exc:
        parser.error(str(exc))

    records = []
    try:
        for degree in degrees:
            cfg = _experiment_config(opts, degree)
            records.extend(run_experiment(cfg, compute_error=opts["l2_error"]))
    except ValueError as exc:
        parser.error(str(exc))

    text = report(records, fmt=opts["fmt"])
    if opts["out"]:
        with open(opts["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)

    if opts["complexity_out"]:
        ctext = complexity_report(
            records, fmt="csv" if opts["fmt"] == "csv" else "markdown")
        with open(opts["complexity_out"], "w", encoding="utf-8") as fh:
            fh.write(ctext)

    return 0 if all(r.converged for r in records) else 2


if __name__ == "__main__":
    raise SystemExit(main())

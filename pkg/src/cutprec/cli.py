"""Command line front end for the study runners.

Every subcommand reads an optional JSON config file and applies flag
overrides on top; any solver failure exits with a nonzero status.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import scipy.sparse as sp

from .assembly import export_matrix_market
from .experiments import (COND_METHODS, DENSE_MAX_LEVEL, ExperimentConfig,
                          build_system, run_delta_sweep, run_fd_study,
                          run_interface_study, write_tables)
from .solver import PRECONDITIONER_KINDS, estimate_condition
from .space import FICTITIOUS


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="JSON file with study settings")
    p.add_argument("--max-level", type=int, dest="max_level")
    p.add_argument("--x0", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--deltas", type=float, nargs="+", metavar="D")
    p.add_argument("--delta-level", type=int, dest="delta_level")
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha-bar-rule", dest="alpha_bar_rule",
                   choices=("max", "mean", "harmonic"))
    p.add_argument("--nitsche-length-rule", dest="nitsche_length_rule",
                   choices=("global", "element"),
                   help="force the boundary penalty length scale "
                        "(default: element diameter for the interface "
                        "form, global mesh size for the fictitious one)")
    p.add_argument("--ghost-length-rule", dest="ghost_length_rule",
                   choices=("global", "facet"))
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--preconditioners", nargs="+",
                   choices=PRECONDITIONER_KINDS, metavar="KIND")
    p.add_argument("--base-order", type=int, dest="base_order")
    p.add_argument("--mg-cycles", type=int, dest="mg_cycles")
    p.add_argument("--strip-sweeps", type=int, dest="strip_sweeps")
    p.add_argument("--cond-method", dest="cond_method",
                   choices=COND_METHODS)
    p.add_argument("--output-dir", dest="output_dir")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config \
        else ExperimentConfig()
    overrides = {}
    for name in ExperimentConfig.__dataclass_fields__:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = tuple(value) if isinstance(value, list) \
                else value
    return replace(cfg, **overrides) if overrides else cfg


def _emit(result, config: ExperimentConfig, name: str) -> None:
    paths = write_tables(result, config.output_dir, name)
    print(Path(paths[1]).read_text())
    for p in paths:
        print(f"wrote {p}")


def _cmd_interface_study(args) -> int:
    config = _config_from_args(args)
    _emit(run_interface_study(config), config, "interface_study")
    return 0


def _cmd_delta_sweep(args) -> int:
    config = _config_from_args(args)
    _emit(run_delta_sweep(config), config, "delta_sweep")
    return 0


def _cmd_fd_study(args) -> int:
    config = replace(_config_from_args(args), problem=FICTITIOUS)
    _emit(run_fd_study(config), config, "fd_study")
    return 0


def _cond_method(config: ExperimentConfig, level: int) -> str:
    if config.cond_method == "per-level":
        return "dense" if level <= DENSE_MAX_LEVEL else "lanczos"
    return config.cond_method


def _cmd_cond(args) -> int:
    """Condition numbers of the solved operator and its block-diagonal
    preconditioned variants at one level."""
    config = _config_from_args(args)
    level = config.max_level if args.level is None else args.level
    tsys = build_system(config, level=level)
    method = _cond_method(config, level)
    n0, n1 = tsys.A0.shape[0], tsys.A1.shape[0]
    print(f"problem={config.problem} level={level} N0={n0} N1={n1} "
          f"method={method}")
    est = estimate_condition(tsys.Ahat, method=method)
    print(f"kappa2(Ahat)        = {est.kappa:.4e}  "
          f"[{est.lam_min:.4e}, {est.lam_max:.4e}]")
    DA = sp.block_diag([tsys.A0, tsys.A1], format="csr")
    est = estimate_condition(tsys.Ahat, B=DA, method=method)
    print(f"kappa(DA^-1 Ahat)   = {est.kappa:.4e}  "
          f"[{est.lam_min:.4e}, {est.lam_max:.4e}]")
    est = estimate_condition(tsys.A1, B=sp.diags(tsys.D1).tocsr(),
                             method=method)
    print(f"kappa(D1^-1 A1)     = {est.kappa:.4e}  "
          f"[{est.lam_min:.4e}, {est.lam_max:.4e}]")
    return 0


def _cmd_export_matrices(args) -> int:
    config = _config_from_args(args)
    level = config.max_level if args.level is None else args.level
    tsys = build_system(config, level=level)
    directory = args.directory or \
        str(Path(config.output_dir) / f"matrices_{config.problem}_l{level}")
    names = export_matrix_market(tsys, directory)
    for name in names:
        print(f"wrote {Path(directory) / name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cutprec",
        description="Unfitted interface and fictitious-domain Poisson "
                    "studies with block-preconditioned CG.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("interface-study",
                       help="level sweep of the two-phase interface problem")
    _add_config_options(p)
    p.set_defaults(func=_cmd_interface_study)

    p = sub.add_parser("delta-sweep",
                       help="interface-position robustness at a fixed level")
    _add_config_options(p)
    p.set_defaults(func=_cmd_delta_sweep)

    p = sub.add_parser("fd-study",
                       help="level sweep of the fictitious-domain problem")
    _add_config_options(p)
    p.set_defaults(func=_cmd_fd_study)

    p = sub.add_parser("cond",
                       help="condition numbers of the assembled operator")
    _add_config_options(p)
    p.add_argument("--level", type=int, help="refinement level "
                   "(default: configured max level)")
    p.set_defaults(func=_cmd_cond)

    p = sub.add_parser("export-matrices",
                       help="dump assembled operators in Matrix Market form")
    _add_config_options(p)
    p.add_argument("--level", type=int)
    p.add_argument("--directory", help="target directory "
                   "(default under the configured output dir)")
    p.set_defaults(func=_cmd_export_matrices)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations

"""
Batch front-end for the vanishing-viscosity spectral toolkit.

Usage:

    python -m scripts.cli <command> --config run.json [--out DIR] [--seed N] [--threads N]

Commands:

    lyapunov   Estimate the top Lyapunov exponent of the amplitude cocycle
    spectrum   Eigenvalues of the Galerkin operator (plus an N-sweep when n_list is set)
    branch     Follow the unstable eigenvalue lambda0 along eps_grid down to eps = 0
    riesz      Riesz projection for the configured contour
    packet     Wave-packet residual sweep over (delta, eps)
    report     Merge the manifests of a run directory (report --out DIR)

Exit codes:

    0  success
    2  invalid configuration, invalid input, missing or corrupt manifests
    3  numerical failure
    4  no eigenvalue above mu_hat + delta (the convergence statement is vacuous)

Every command writes `<command>.manifest.json` and its CSV tables into the
output directory. Nothing is written before the configuration validates.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

from vvspec.cocycle import LyapunovEstimate, lyapunov_exponent, write_rates_csv
from vvspec.config import RunConfig, load_run_config
from vvspec.errors import HypothesisNotSatisfied, NumericalFailure
from vvspec.flows import SteadyFlow, flow_from_spec
from vvspec.galerkin import assemble
from vvspec.lattice import build_mode_set
from vvspec.logging_utils import (
    get_logger,
    log_step_end,
    log_step_start,
    log_structured,
)
from vvspec.manifest import (
    build_report,
    load_manifests,
    manifest_path,
    write_manifest,
    write_table,
)
from vvspec.semigroup import (
    decomposition_sweep,
    essential_radius_diagnostic,
    fit_decomposition,
    write_nsweep_csv,
    write_packet_csv,
)
from vvspec.spectra import (
    continue_in_viscosity,
    default_delta,
    eigen_decompose,
    isolation_radius,
    multiplicity,
    riesz_projection,
    unstable_set,
    write_branch_csv,
    write_spectrum_csv,
)

logger = get_logger("vvspec.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_HYPOTHESIS = 4


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _print(msg: str) -> None:
    sys.stdout.write(msg + "\n")
    sys.stdout.flush()


def _print_err(msg: str) -> None:
    sys.stderr.write(msg + "\n")
    sys.stderr.flush()


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "output_dir": args.out,
        "seed": args.seed,
        "threads": args.threads,
    }
    return load_run_config(args.config, overrides)


def _out_dir(config: RunConfig) -> Path:
    return Path(config.output_dir)


def _run_lyapunov(config: RunConfig, flow: SteadyFlow) -> LyapunovEstimate:
    return lyapunov_exponent(
        flow,
        n_samples=config.samples,
        horizon=config.horizon,
        m=config.weight_m,
        seed=config.seed,
        tol=config.tolerances.ode_tol,
    )


def _resolve_mu_hat(config: RunConfig, flow: SteadyFlow) -> Tuple[float, str]:
    """
    mu_hat from the config pin, else from a lyapunov manifest of the same flow
    in the output directory, else from a fresh estimate.
    """
    if config.mu_hat is not None:
        return float(config.mu_hat), "config"

    path = manifest_path(_out_dir(config), "lyapunov")
    if path.exists():
        doc = load_manifests(path.parent).get("lyapunov")
        if doc is not None and doc["config"].get("flow") == config.flow.model_dump(mode="json"):
            return float(doc["payload"]["mu"]), "lyapunov_manifest"

    return _run_lyapunov(config, flow).mu, "estimated"


def _complex_payload(value: complex) -> Dict[str, float]:
    return {"re": float(value.real), "im": float(value.imag)}


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_lyapunov(args: argparse.Namespace) -> int:
    config = _load_config(args)
    flow = flow_from_spec(config.flow, config.dim)
    log_step_start(logger, "lyapunov", flow=flow.name, samples=config.samples)

    estimate = _run_lyapunov(config, flow)
    out = _out_dir(config)
    write_rates_csv(estimate, out / "lyapunov_rates.csv", config.config_hash())
    write_manifest(manifest_path(out, "lyapunov"), "lyapunov", config, estimate.to_payload())

    _print(f"mu = {estimate.mu:.6g} (+/- {estimate.confidence_halfwidth:.2g})")
    log_step_end(logger, "lyapunov", "ok", mu=estimate.mu)
    return EXIT_OK


def cmd_spectrum(args: argparse.Namespace) -> int:
    config = _load_config(args)
    flow = flow_from_spec(config.flow, config.dim)
    log_step_start(logger, "spectrum", flow=flow.name, cutoff=config.cutoff, eps=config.eps)

    modeset = build_mode_set(config.dim, config.cutoff)
    spec = eigen_decompose(
        assemble(flow, modeset, config.eps), config.tolerances.eigen_residual
    )
    mu_hat, mu_source = _resolve_mu_hat(config, flow)
    delta = config.delta if config.delta is not None else default_delta(mu_hat)
    unstable = unstable_set(spec, mu_hat, delta)

    out = _out_dir(config)
    write_spectrum_csv(spec, out / "spectrum.csv", config.config_hash())
    payload: Dict[str, Any] = {
        "dimension": int(spec.eigenvalues.size),
        "mu_hat": mu_hat,
        "mu_hat_source": mu_source,
        "delta": delta,
        "unstable": [_complex_payload(v) for v in unstable],
        "max_residual": float(spec.residuals.max()) if spec.residuals.size else 0.0,
        "residual_breach": spec.residual_breach,
        "rightmost": [_complex_payload(v) for v in spec.eigenvalues[:10]],
    }
    if config.n_list:
        rows = essential_radius_diagnostic(flow, config.t, config.n_list, mu_hat, delta)
        write_nsweep_csv(rows, out / "nsweep.csv", config.config_hash())
        payload["nsweep"] = rows
    write_manifest(manifest_path(out, "spectrum"), "spectrum", config, payload)

    _print(f"{len(unstable)} eigenvalue(s) above mu_hat + delta = {mu_hat + delta:.6g}")
    log_step_end(logger, "spectrum", "ok", unstable=len(unstable))
    return EXIT_OK


def cmd_branch(args: argparse.Namespace) -> int:
    config = _load_config(args)
    flow = flow_from_spec(config.flow, config.dim)
    log_step_start(logger, "branch", flow=flow.name, cutoff=config.cutoff)

    modeset = build_mode_set(config.dim, config.cutoff)
    spec0 = eigen_decompose(assemble(flow, modeset, 0.0), config.tolerances.eigen_residual)
    mu_hat, mu_source = _resolve_mu_hat(config, flow)
    delta = config.delta if config.delta is not None else default_delta(mu_hat)

    lambda0 = config.lambda0
    if lambda0 is None:
        unstable = unstable_set(spec0, mu_hat, delta)
        if not unstable:
            raise HypothesisNotSatisfied(
                f"no eigenvalue of L^0 above mu_hat + delta = {mu_hat + delta:.6g}"
            )
        lambda0 = unstable[0]

    radius = isolation_radius(spec0.eigenvalues, lambda0)
    curve = continue_in_viscosity(
        flow,
        modeset,
        lambda0,
        radius,
        config.eps_grid,
        nodes=config.contour.nodes,
        threads=config.threads,
    )

    out = _out_dir(config)
    write_branch_csv(curve, out / "branch.csv", config.config_hash())
    payload = {
        "mu_hat": mu_hat,
        "mu_hat_source": mu_source,
        "delta": delta,
        "lambda0": _complex_payload(curve.lambda0),
        "radius": curve.radius,
        "reference_multiplicity": curve.reference_multiplicity,
        "flagged": int(sum(curve.flagged)),
        "rows": curve.rows(),
    }
    write_manifest(manifest_path(out, "branch"), "branch", config, payload)

    _print(f"lambda0 = {curve.lambda0:.6g}, radius = {curve.radius:.3g}")
    log_step_end(logger, "branch", "ok", flagged=int(sum(curve.flagged)))
    return EXIT_OK


def cmd_riesz(args: argparse.Namespace) -> int:
    config = _load_config(args)
    flow = flow_from_spec(config.flow, config.dim)
    log_step_start(logger, "riesz", flow=flow.name, eps=config.eps)

    modeset = build_mode_set(config.dim, config.cutoff)
    op = assemble(flow, modeset, config.eps)
    spec = eigen_decompose(op, config.tolerances.eigen_residual)
    contour = config.contour
    proj = riesz_projection(op, contour.center, contour.radius, contour.nodes, spectrum=spec)
    mult = multiplicity(proj)
    inside = spec.inside(contour.center, contour.radius)

    out = _out_dir(config)
    write_table(
        out / "riesz.csv",
        [{"index": i, "re": v.real, "im": v.imag} for i, v in enumerate(inside)],
        ["index", "re", "im"],
        config.config_hash(),
    )
    payload = {
        "center": _complex_payload(contour.center),
        "radius": contour.radius,
        "nodes": contour.nodes,
        "trace": _complex_payload(proj.trace),
        "multiplicity": mult,
        "inside_count": int(inside.size),
        "idempotency_defect": proj.idempotency_defect,
    }
    write_manifest(manifest_path(out, "riesz"), "riesz", config, payload)

    _print(f"multiplicity = {mult} (defect {proj.idempotency_defect:.2e})")
    log_step_end(logger, "riesz", "ok", multiplicity=mult)
    return EXIT_OK


def cmd_packet(args: argparse.Namespace) -> int:
    config = _load_config(args)
    flow = flow_from_spec(config.flow, config.dim)
    packet = config.packet
    if len(packet.carrier) != config.dim:
        raise ValueError(f"packet carrier {packet.carrier} is not {config.dim}D")
    log_step_start(logger, "packet", flow=flow.name, deltas=len(packet.deltas))

    records = decomposition_sweep(
        flow,
        packet.t,
        packet.deltas,
        packet.eps_list,
        packet.carrier,
        tol=min(config.tolerances.ode_tol, 1e-8),
        grid_factor=packet.grid_factor,
    )
    fit = fit_decomposition(records) if len(records) >= 2 else None

    out = _out_dir(config)
    write_packet_csv(records, out / "packet_sweep.csv", config.config_hash())
    payload = {
        "records": [r.as_row() for r in records],
        "fit": None
        if fit is None
        else {
            "c_delta": fit.c_delta,
            "c_sqrt_eps": fit.c_sqrt_eps,
            "r_squared": fit.r_squared,
            "points": fit.points,
        },
    }
    write_manifest(manifest_path(out, "packet"), "packet", config, payload)

    _print(f"{len(records)} packet residual(s) written")
    log_step_end(logger, "packet", "ok", records=len(records))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if not args.out:
        _print_err("report needs --out <run directory>")
        return EXIT_CONFIG
    report = build_report(args.out)
    _print(f"report.json written with {len(report['sections'])} section(s)")
    for warning in report["warnings"]:
        _print_err(f"warning: {warning}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        help="Run configuration (JSON, or YAML by suffix)",
    )
    common.add_argument(
        "--out",
        default=None,
        help="Output directory (overrides output_dir)",
    )
    common.add_argument(
        "--seed",
        default=None,
        type=int,
        help="Random seed (overrides seed)",
    )
    common.add_argument(
        "--threads",
        default=None,
        type=int,
        help="Worker threads for independent eps points (overrides threads)",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vvspec",
        description="Vanishing-viscosity spectral experiments",
    )
    subparsers = parser.add_subparsers(dest="command")
    common = _common_flags()

    commands = (
        ("lyapunov", "Estimate the top Lyapunov exponent", cmd_lyapunov),
        ("spectrum", "Eigenvalues of the Galerkin operator", cmd_spectrum),
        ("branch", "Continue an unstable eigenvalue in viscosity", cmd_branch),
        ("riesz", "Riesz projection for the configured contour", cmd_riesz),
        ("packet", "Wave-packet residual sweep", cmd_packet),
        ("report", "Merge manifests of a run directory", cmd_report),
    )
    for name, help_text, func in commands:
        sub = subparsers.add_parser(name, help=help_text, parents=[common])
        sub.set_defaults(func=func, needs_config=name != "report")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = getattr(args, "func", None)
    if func is None:
        parser.print_help()
        return EXIT_CONFIG
    if args.needs_config and not args.config:
        _print_err(f"{args.command} needs --config <path>")
        return EXIT_CONFIG

    try:
        return int(func(args))
    except HypothesisNotSatisfied as exc:
        _print_err(f"hypothesis not satisfied: {exc}")
        log_step_end(logger, args.command, "hypothesis_not_satisfied")
        return EXIT_HYPOTHESIS
    except NumericalFailure as exc:
        _print_err(f"numerical failure ({type(exc).__name__}): {exc}")
        log_step_end(logger, args.command, "numerical_failure", error=type(exc).__name__)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # ConfigError, pydantic.ValidationError and argument errors all land here.
        _print_err(f"invalid input: {exc}")
        log_structured(
            logger, logging.ERROR, "invalid_input", command=args.command, error=str(exc)
        )
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line experiment harness writing CSV tables.

Exit codes: 0 success, 1 validation failure or malformed flags,
2 threshold violation under ``--assert``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import corner_curl_field, corner_gradient_field

log = logging.getLogger("rtbem")

EXIT_OK, EXIT_INVALID, EXIT_THRESHOLD = 0, 1, 2

INFSUP_TOL = 1e-8
COMMUTE_M12_TOL = 1e-8
COMMUTE_L2_TOL = 1e-9
STABILITY_SLOPE_TOL = 0.3
ORACLE_REL_TOL = 0.05
ORACLE_FLOOR = 1e-9
PIOLA_TOL = 1e-12
RESIDUAL_TOL = 1e-10
SYMMETRY_TOL = 1e-8


class UsageError(Exception):
    """Malformed command line or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class Outcome:
    header: list
    rows: list
    passed: bool
    plot: list | None = None


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def _write_csv(outcome: Outcome, out) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(outcome.header)
    for row in outcome.rows:
        writer.writerow([_fmt(x) for x in row])
    if out is None or str(out) == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue())


def _write_plot(points, path) -> None:
    Path(path).write_text("".join(f"{_fmt(a)} {_fmt(b)}\n" for a, b in points))


# ---------------------------------------------------------------------------
# validators
# ---------------------------------------------------------------------------


def _check_range(name, value, lo=None, hi=None):
    if value is None:
        return
    if lo is not None and value < lo:
        raise UsageError(f"--{name.replace('_', '-')} must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise UsageError(f"--{name.replace('_', '-')} must be <= {hi}, got {value}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _tol(args, default: float) -> float:
    return default if args.tolerance is None else args.tolerance


def cmd_infsup(args) -> Outcome:
    from .interp import infsup_constant

    _check_range("pmin", args.pmin, 2, 16)
    _check_range("pmax", args.pmax, 2, 16)
    if args.pmax < args.pmin:
        raise UsageError("--pmax must be >= --pmin")
    rows, passed = [], True
    for p in range(args.pmin, args.pmax + 1):
        r = infsup_constant(p)
        rows.append([p, r.computed, r.closed_form, r.abs_err])
        passed &= r.abs_err <= _tol(args, INFSUP_TOL)
    return Outcome(["p", "computed", "closed_form", "abs_err"], rows, passed)


def commute_residuals(p: int, field_, phi):
    """Relative defects of the three commuting relations for one p."""
    from .interp import interp_div_L2, interp_div_m12, interp_H1, proj_L2, proj_tildeHm12
    from .refelem import divergence, scalar_curl

    def rel(a, b):
        return (a - b).l2_norm() / max(b.l2_norm(), 1e-300)

    m12 = rel(divergence(interp_div_m12(field_, p).total), proj_tildeHm12(field_.divergence, p - 1))
    l2 = rel(divergence(interp_div_L2(field_, p).total), proj_L2(field_.divergence, p - 1))
    left = rel(interp_div_L2(phi.curl(), p).total, scalar_curl(interp_H1(phi, p), p))
    return m12, l2, left


def cmd_commute(args) -> Outcome:
    from .fields import random_scalar_field, random_vector_field

    _check_range("pmax", args.pmax, 1, 10)
    _check_range("fields", args.fields, 1, 1000)
    rng = np.random.default_rng(args.seed)
    samples = [(random_vector_field(rng), random_scalar_field(rng)) for _ in range(args.fields)]
    rows, passed = [], True
    for i, (u, phi) in enumerate(samples):
        for p in range(1, args.pmax + 1):
            m12, l2, left = commute_residuals(p, u, phi)
            rows.append([i, p, m12, l2, left])
            passed &= (m12 <= _tol(args, COMMUTE_M12_TOL) and l2 <= _tol(args, COMMUTE_L2_TOL)
                       and left <= _tol(args, COMMUTE_L2_TOL))
    return Outcome(["field", "p", "residual_m12", "residual_l2", "residual_curl"], rows, passed)


STABILITY_FAMILIES = {
    "corner_gradient": lambda: corner_gradient_field(),
    "corner_curl": lambda: corner_curl_field(),
    "corner_gradient_sharp": lambda: corner_gradient_field(delta=1e-3),
}


def cmd_stability(args) -> Outcome:
    from .interp import loglog_slope, stability_scan

    _check_range("pmin", args.pmin, 1, 16)
    _check_range("pmax", args.pmax, 2, 16)
    if args.pmax <= args.pmin:
        raise UsageError("--pmax must exceed --pmin")
    ps = list(range(args.pmin, args.pmax + 1))
    rows, passed, plot = [], True, []
    for name, make in STABILITY_FAMILIES.items():
        scan = stability_scan(make(), ps)
        slope = loglog_slope(ps, [r.total for r in scan])
        passed &= slope <= _tol(args, STABILITY_SLOPE_TOL)
        for r in scan:
            rows.append([name, r.p, r.l2_norm, r.div_norm, r.total, slope])
            if name == "corner_gradient":
                plot.append((r.p, r.total))
    return Outcome(["family", "p", "l2_norm", "div_norm", "total", "slope"], rows, passed, plot)


def fracform_cases():
    """(kind, m, n, u) with u a callable on K (or on an edge) and its exact spectral value."""
    s2 = np.sqrt(2.0)
    sine = lambda m, n: (lambda x, y: 2.0 * np.sin(m * np.pi * x) * np.sin(n * np.pi * y))
    cosine = lambda m, n: (lambda x, y: (s2 if m else 1.0) * (s2 if n else 1.0)
                           * np.cos(m * np.pi * x) * np.cos(n * np.pi * y))
    edge = lambda m: (lambda s: s2 * np.sin(m * np.pi * s))
    return [
        ("Hm12_K", 1, 1, sine(1, 1)),
        ("Hm12_K", 2, 1, sine(2, 1)),
        ("tildeH12_K", 1, 1, sine(1, 1)),
        ("tildeHm12_K", 1, 0, cosine(1, 0)),
        ("tildeHm12_K", 1, 1, cosine(1, 1)),
        ("tildeHm12_K", 0, 0, cosine(0, 0)),
        ("tildeH12_edge", 1, None, edge(1)),
        ("tildeH12_edge", 2, None, edge(2)),
    ]


def oracle_row(kind, m, n, u, grids=(16, 32, 64)):
    from .fracform import fd_oracle, inner_product

    spectral = inner_product(kind, u, u)
    oracles = [fd_oracle(kind, u, u, g) for g in grids]
    errs = [abs(o - spectral) / abs(spectral) for o in oracles]
    monotone = all(b <= a or b <= ORACLE_FLOOR for a, b in zip(errs, errs[1:]))
    return [kind, m, n, spectral, *oracles, errs[-1]], errs, monotone


def cmd_fracform(args) -> Outcome:
    rows, passed = [], True
    for kind, m, n, u in fracform_cases():
        row, errs, monotone = oracle_row(kind, m, n, u)
        rows.append(row)
        passed &= errs[-1] <= _tol(args, ORACLE_REL_TOL) and monotone
    header = ["kind", "m", "n", "spectral", "oracle_n16", "oracle_n32", "oracle_n64", "rel_err"]
    return Outcome(header, rows, passed)


def piola_charts():
    from .surface import planar_chart

    rot = np.linalg.qr(np.array([[1.0, 0.3, -0.2], [0.2, 1.0, 0.4], [-0.1, 0.5, 1.0]]))[0]
    axes = (rot[:, 0], rot[:, 1])
    return {
        "unit": planar_chart([[0, 0], [1, 0], [1, 1], [0, 1]]),
        "scaled": planar_chart([[0, 0], [0.25, 0], [0.25, 0.25], [0, 0.25]], (1.0, 2.0, 0.0)),
        "parallelogram": planar_chart([[0, 0], [1.0, 0.2], [1.3, 1.1], [0.3, 0.9]], (0.0, 0.0, 1.0), axes),
        "trapezoid": planar_chart([[0, 0], [1.2, 0.1], [1.0, 1.1], [-0.1, 0.8]], (0.5, -0.2, 0.3), axes),
    }


def cmd_piola(args) -> Outcome:
    from .refelem import EDGES, RTFunction, TensorPolynomial, edge_flux, rt_dimension
    from .surface import pairing_physical, pairing_reference, physical_flux

    _check_range("samples", args.samples, 1, 1000)
    rng = np.random.default_rng(args.seed)
    rows, passed = [], True
    for name, chart in piola_charts().items():
        pair_def, flux_def = 0.0, 0.0
        for _ in range(args.samples):
            phi = TensorPolynomial(rng.standard_normal((4, 4)))
            q = RTFunction.from_vector(3, rng.standard_normal(rt_dimension(3)))
            ref = pairing_reference(phi, q)
            pair_def = max(pair_def, abs(pairing_physical(chart, phi, q) - ref) / max(1.0, abs(ref)))
            for e in EDGES:
                flux_def = max(flux_def, abs(physical_flux(chart, q, e) - edge_flux(q, e)))
        rows.append([name, "pairing", pair_def])
        rows.append([name, "flux", flux_def])
        passed &= pair_def <= _tol(args, PIOLA_TOL) and flux_def <= _tol(args, PIOLA_TOL)
    return Outcome(["chart", "check", "defect"], rows, passed)


def _surface_from_args(args):
    from .surface import SHIPPED_SURFACES, read_mesh_file

    if args.mesh in SHIPPED_SURFACES:
        return SHIPPED_SURFACES[args.mesh]()
    return read_mesh_file(args.mesh)


def _validate_efie(args):
    _check_range("refine", args.refine, 0, 5)
    _check_range("degree", args.degree, 1, 6)
    if not args.wavenumber > 0:
        raise UsageError("--wavenumber must be positive")
    if args.quad_order is not None and args.quad_order < args.degree + 1:
        raise UsageError(f"--quad-order must be >= degree + 1 = {args.degree + 1}")


EFIE_HEADER = ["N", "h", "p", "k", "residual", "energy_surrogate_of_difference_to_finest", "assembly_seconds"]


def cmd_efie_solve(args) -> Outcome:
    from .efie import WaveContext, assemble, solve
    from .surface import build_mesh_and_space

    _validate_efie(args)
    surface = _surface_from_args(args)
    _, space = build_mesh_and_space(surface, args.refine, args.degree)
    system = assemble(space, WaveContext(args.wavenumber), args.quad_order)
    result = solve(system)
    seconds = system.metadata["assembly_seconds"] if args.timing else None
    row = [space.n_free, space.mesh.h, args.degree, args.wavenumber, result.residual, 0.0, seconds]
    passed = result.ok and result.residual <= _tol(args, RESIDUAL_TOL) and system.symmetry_defect() <= SYMMETRY_TOL
    if not result.ok:
        log.warning("solve reported %s: %s", result.status, result.message)
    return Outcome(EFIE_HEADER, [row], passed)


def cmd_convergence(args) -> Outcome:
    from .efie import WaveContext, convergence_study

    _validate_efie(args)
    _check_range("coarsest", args.coarsest, 0, args.refine)
    surface = _surface_from_args(args)
    chain = [(level, args.degree) for level in range(args.coarsest, args.refine + 1)]
    rows_ = convergence_study(surface, chain, WaveContext(args.wavenumber), args.quad_order)
    rows, passed = [], True
    for r in rows_:
        rows.append([r.n, r.h, r.p, r.k, r.residual, r.difference_to_finest, r.assembly_seconds if args.timing else None])
        passed &= r.status == "ok" and r.residual <= _tol(args, RESIDUAL_TOL) and r.symmetry_defect <= SYMMETRY_TOL
    dists = [r.difference_to_finest for r in rows_]
    passed &= all(b < a for a, b in zip(dists, dists[1:]))
    plot = [(r.n, r.difference_to_finest) for r in rows_[:-1]]
    return Outcome(EFIE_HEADER, rows, passed, plot)


COMMANDS = {
    "infsup": cmd_infsup,
    "commute-check": cmd_commute,
    "interp-stability": cmd_stability,
    "fracform-check": cmd_fracform,
    "piola-check": cmd_piola,
    "efie-solve": cmd_efie_solve,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys override flags")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized sweeps")
    common.add_argument("--assert", dest="check", action="store_true", help="exit 2 when a threshold is violated")
    common.add_argument("--out", default="-", help="CSV output path (default stdout)")
    common.add_argument("--plot-data", help="optional two-column plot data file")
    common.add_argument("--tolerance", type=float, default=None,
                        help="override the acceptance threshold checked by --assert")
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="rtbem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("infsup", parents=[common], help="inf-sup constants against the closed form")
    p.add_argument("--pmin", type=int, default=2)
    p.add_argument("--pmax", type=int, default=10)

    p = sub.add_parser("commute-check", parents=[common], help="commuting-diagram residuals")
    p.add_argument("--pmax", type=int, default=6)
    p.add_argument("--fields", type=int, default=20)

    p = sub.add_parser("interp-stability", parents=[common], help="interpolant norms against p")
    p.add_argument("--pmin", type=int, default=2)
    p.add_argument("--pmax", type=int, default=10)

    sub.add_parser("fracform-check", parents=[common], help="spectral inner products against the FD oracle")

    p = sub.add_parser("piola-check", parents=[common], help="Piola pairing and flux identities")
    p.add_argument("--samples", type=int, default=10)

    for name, helptext in (("efie-solve", "assemble and solve one EFIE system"),
                           ("convergence", "solve along a refinement chain")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--mesh", default="screen", help="mesh file, or 'screen' / 'cube'")
        p.add_argument("--refine", type=int, default=1)
        p.add_argument("--degree", type=int, default=1)
        p.add_argument("--wavenumber", type=float, default=1.0)
        p.add_argument("--quad-order", type=int, default=None)
        p.add_argument("--timing", action="store_true", help="fill assembly_seconds (breaks byte-identical output)")
        if name == "convergence":
            p.add_argument("--coarsest", type=int, default=1)
    return parser


OPTIONAL_NUMERIC = {"tolerance": (int, float), "quad_order": int}


def _apply_config(parser, args):
    if not args.config:
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    known = {k for k in vars(args) if k not in ("command", "config")}
    aliases = {"assert": "check"}
    for key, value in data.items():
        dest = aliases.get(key, key.replace("-", "_"))
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        current = getattr(args, dest)
        if dest in OPTIONAL_NUMERIC and value is not None and (
                isinstance(value, bool) or not isinstance(value, OPTIONAL_NUMERIC[dest])):
            raise UsageError(f"config key {key!r} must be a number")
        if current is not None and not isinstance(value, type(current)) and not (
                isinstance(current, float) and isinstance(value, int)):
            raise UsageError(f"config key {key!r} has the wrong type")
        setattr(args, dest, value)
    return args


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _check_range("seed", args.seed, 0, 2**64 - 1)
        if args.tolerance is not None and not args.tolerance > 0:
            raise UsageError("--tolerance must be positive")
        outcome = COMMANDS[args.command](args)
    except UsageError as exc:
        text = str(exc)
        if not text.startswith("usage:"):
            text = f"{parser.format_usage()}rtbem: error: {text}"
        sys.stderr.write(f"{text}\n")
        return EXIT_INVALID
    except (ValueError, TypeError, OSError) as exc:
        sys.stderr.write(f"rtbem: error: {exc}\n")
        return EXIT_INVALID
    _write_csv(outcome, args.out)
    if args.plot_data and outcome.plot:
        _write_plot(outcome.plot, args.plot_data)
    if args.check and not outcome.passed:
        sys.stderr.write(f"rtbem {args.command}: acceptance threshold violated\n")
        return EXIT_THRESHOLD
    return EXIT_OK


def main() -> None:
    sys.exit(run())

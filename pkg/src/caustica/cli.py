"""Command-line runner: ``caustica <subcommand> (--preset NAME | --scenario FILE) [options]``.

Exit codes: 0 success, 2 validation failure (bad input, failed checks or
failed comparison thresholds), 3 numerical failure (flow blow-up in a
scenario that does not expect one).

Tables are CSV with a one-line header and 17-significant-digit floats;
structured results are JSON with sorted keys. Output is byte-identical
across runs for the same inputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import branches as br
from . import fluid as fl
from . import wigner as wg
from .flow import FlowBlowupError, rays
from .integrate import BLOWN_UP, OK
from .presets import PRESET_NAMES, preset
from .symbols import Box, Scenario, ScenarioError, load_scenario, validate_scenario

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# formatting


def fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# argument helpers


def parse_range(text: str, what: str) -> tuple[float, float, int]:
    """``lo:hi:n`` -> (lo, hi, n)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise CLIError(f"{what} must look like lo:hi:n, got {text!r}")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise CLIError(f"cannot parse {what} {text!r}: {exc}") from exc
    if not (hi > lo and n >= 1):
        raise CLIError(f"{what} needs lo < hi and n >= 1")
    return lo, hi, n


def parse_floats(text: str) -> list[float]:
    try:
        return [wg.parse_eps(s) for s in text.split(",") if s.strip()]
    except (ValueError, ZeroDivisionError) as exc:
        raise CLIError(f"cannot parse number list {text!r}: {exc}") from exc


def load(args: argparse.Namespace) -> Scenario:
    try:
        s = preset(args.preset) if args.preset else load_scenario(args.scenario)
    except KeyError as exc:
        raise CLIError(str(exc.args[0]) if exc.args else str(exc)) from exc
    except (ScenarioError, ValueError, OSError) as exc:
        raise CLIError(f"invalid scenario: {exc}") from exc
    changes: dict[str, float] = {}
    if args.tol_ode is not None:
        changes["ode_rtol"] = args.tol_ode
        changes["ode_atol"] = args.tol_ode * 1e-2
    if args.tol_root is not None:
        changes["root"] = args.tol_root
    if changes:
        try:
            s = s.with_tolerances(**changes)
        except ValueError as exc:
            raise CLIError(f"invalid tolerance: {exc}") from exc
    return s


def chunked(fn: Callable[[np.ndarray], list], xs: np.ndarray, threads: int, chunk: int = 256) -> list:
    """Apply ``fn`` to consecutive slices of ``xs``; results keep input order."""
    pieces = [xs[i : i + chunk] for i in range(0, len(xs), chunk)]
    if threads <= 1 or len(pieces) <= 1:
        return [r for p in pieces for r in fn(p)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return [r for part in pool.map(fn, pieces) for r in part]


def _times(args: argparse.Namespace, s: Scenario) -> list[float]:
    if getattr(args, "t", None):
        return parse_floats(args.t)
    return list(s.times)


def _numerical(exc: Exception, s: Scenario) -> CLIError:
    return CLIError(f"numerical failure: {exc}", EXIT_OK if s.expect_blowup else EXIT_NUMERICAL)


# ---------------------------------------------------------------------------
# subcommands


def cmd_rays(args, s: Scenario) -> int:
    if s.dim != 1:
        raise CLIError("the rays table is written for d = 1 scenarios")
    lo, hi = s.region.lo[0], s.region.hi[0]
    x0 = np.linspace(lo, hi, args.nx)
    t0 = args.t0
    t1 = s.horizon if args.t1 is None else args.t1
    ts = np.linspace(t0, t1, args.nt) if args.nt > 1 else np.array([t1])
    tol = s.tolerances
    rows = []
    blown = False
    for t in ts:
        rb = rays(s.hamiltonian, s.initial, x0[:, None], float(t), rtol=tol.ode_rtol, atol=tol.ode_atol)
        for i in range(len(x0)):
            ok = rb.status[i] == OK
            blown |= bool(rb.status[i] == BLOWN_UP)
            rows.append([x0[i], t, rb.x[i, 0], rb.xi[i, 0], rb.S[i], rb.J[i] if ok else float("nan"), rb.status_text(i)])
    emit(write_csv(["x0", "t", "x_hat", "xi_hat", "S", "J", "status"], rows), args.out)
    if blown and not s.expect_blowup:
        print("caustica: flow blew up in a scenario that does not expect it", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_branches(args, s: Scenario) -> int:
    x = parse_floats(args.x)
    if len(x) != s.dim:
        raise CLIError(f"--x needs {s.dim} comma-separated values")
    try:
        bs = br.find_branches(s.hamiltonian, s.initial, np.array(x), args.t, s.xi_box, s.tolerances)
    except (FlowBlowupError, br.UnreachableBranchError) as exc:
        raise _numerical(exc, s) from exc
    emit(write_json(bs.to_dict()), args.out)
    return EXIT_OK


def _x_axis(args, s: Scenario) -> np.ndarray:
    if s.dim != 1:
        raise CLIError("grid sweeps are written for d = 1 scenarios")
    if args.grid:
        lo, hi, n = parse_range(args.grid, "--grid")
    else:
        lo, hi, n = s.region.lo[0], s.region.hi[0], args.nx
    return np.linspace(lo, hi, n)


def cmd_density(args, s: Scenario) -> int:
    xs = _x_axis(args, s)
    rows = []
    for t in _times(args, s):
        def work(chunk, t=t):
            db = br.density_batch(s.hamiltonian, s.initial, chunk[:, None], t, s.xi_box, s.tolerances)
            return list(zip(chunk, db.n, db.N))

        for x, n, N in chunked(work, xs, args.threads):
            rows.append([x, t, n, N])
    emit(write_csv(["x", "t", "n", "N"], rows), args.out)
    return EXIT_OK


def cmd_caustics(args, s: Scenario) -> int:
    region = s.region
    nz = args.nz
    if args.grid:
        lo, hi, nz = parse_range(args.grid, "--grid")
        region = Box((lo,), (hi,))
    t_span = s.t_range
    if args.t_range:
        t_lo, t_hi, _ = parse_range(args.t_range + ":1", "--t-range")
        t_span = (t_lo, t_hi)
    scan = br.caustic_scan(s.hamiltonian, s.initial, region, t_span, x0_box=s.footpoint_box, nz=nz, nt=args.nt, tol=s.tolerances)
    rows = [p.to_row() for p in scan.points]
    emit(write_csv(["x", "t", "z", "v", "kind", "multiplicity"], rows), args.out)
    if scan.blowups and not s.expect_blowup:
        print("caustica: rays blew up during the caustic scan", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_focus(args, s: Scenario) -> int:
    y = parse_floats(args.y)
    if len(y) != s.dim:
        raise CLIError(f"--y needs {s.dim} comma-separated values")
    try:
        rep = br.concentration(s.hamiltonian, s.initial, np.array(y), args.t, s.footpoint_box, s.tolerances)
    except FlowBlowupError as exc:
        raise _numerical(exc, s) from exc
    emit(write_json(rep.to_dict()), args.out)
    return EXIT_OK


def cmd_fluid(args, s: Scenario) -> int:
    xs = _x_axis(args, s)
    t_lo, t_hi, nt = parse_range(args.t_grid, "--t-grid")
    ts = np.linspace(t_lo, t_hi, nt)
    if len(xs) < fl.MIN_NODES or nt < fl.MIN_NODES:
        raise CLIError(f"fluid residuals need at least {fl.MIN_NODES} nodes per axis")
    X = np.repeat(xs[None, :], nt, axis=0).ravel()
    T = np.repeat(ts, len(xs))
    sets = br.find_branches_batch(s.hamiltonian, s.initial, X[:, None], T, s.xi_box, s.tolerances)
    n = np.empty(len(X))
    v = np.empty(len(X))
    for i, bs in enumerate(sets):
        if bs.N != 1 or bs.at_caustic:
            raise CLIError(f"fluid residuals need a single smooth branch; found {bs.N} at x={X[i]:.6g}, t={T[i]:.6g}")
        n[i] = bs.branches[0].n
        v[i] = bs.branches[0].v[0]
    field_ = fl.FluidField((xs,), ts, n.reshape(nt, -1), v.reshape(nt, -1))
    res = fl.euler_residual(s.hamiltonian, field_)
    try:
        w = fl.WeightFunction.from_expression(args.sigma, 1)
    except ValueError as exc:
        raise CLIError(f"invalid --sigma: {exc}") from exc
    gen = fl.generalized_moment_residual(s.hamiltonian, field_, w)
    cons = fl.to_conservative(s.hamiltonian, field_)
    ti, (xi_,) = field_.interior_axes()
    rows = []
    for a, t in enumerate(ti):
        for b, x in enumerate(xi_):
            rows.append([x, t, res.mass[a, b], res.momentum[a, b, 0], gen[a, b], cons.momentum[a, b, 0]])
    emit(write_csv(["x", "t", "mass", "momentum", "sigma", "conservative_momentum"], rows), args.out)
    return EXIT_OK


def cmd_wigner(args, s: Scenario) -> int:
    if s.dim != 1:
        raise CLIError("the wave oracle is one-dimensional")
    eps = wg.parse_eps(args.eps)
    lo, hi = s.region.lo[0], s.region.hi[0]
    try:
        g = wg.grid_for(s.initial, eps, lo, hi, min_n=args.min_n)
        psi = wg.evolve(wg.wkb_initial(s.initial, eps, g), s.hamiltonian, args.t)
    except (ValueError, wg.BoundaryMassError) as exc:
        raise CLIError(str(exc), EXIT_NUMERICAL if isinstance(exc, wg.BoundaryMassError) else EXIT_VALIDATION) from exc
    rows_idx = np.unique(np.linspace(0, g.n - 1, args.rows).round().astype(np.int64))
    ps = wg.wigner_transform(psi, rows_idx)
    if args.husimi:
        ps = wg.husimi(wg.wigner_transform(psi), check=True)
        ps = wg.PhaseSpaceGrid(ps.x[rows_idx], ps.xi, ps.values[rows_idx], ps.eps, ps.kind)
    xi_lo, xi_hi = (s.xi_box.lo[0], s.xi_box.hi[0]) if args.xi_window is None else parse_range(args.xi_window + ":1", "--xi-window")[:2]
    keep = (ps.xi >= xi_lo) & (ps.xi <= xi_hi)
    rows = [[x, xi, ps.values[i, j]] for i, x in enumerate(ps.x) for j, xi in enumerate(ps.xi) if keep[j]]
    emit(write_csv(["x", "xi", "w"], rows), args.out)
    return EXIT_OK


def cmd_compare(args, s: Scenario) -> int:
    eps = parse_floats(args.eps_list)
    if len(eps) < 1:
        raise CLIError("--eps-list needs at least one value")
    try:
        rep = wg.compare(s, eps, args.t)
    except wg.BoundaryMassError as exc:
        raise CLIError(str(exc), EXIT_NUMERICAL) from exc
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    emit(write_json(rep.to_dict()), args.out)
    return EXIT_OK if rep.passed else EXIT_VALIDATION


def cmd_validate(args, s: Scenario) -> int:
    rep = validate_scenario(s, n_samples=args.samples)
    d = rep.to_dict()
    d["expect_blowup"] = s.expect_blowup
    emit(write_json(d), args.out)
    failed = set(rep.failed())
    if failed - {"global_flow"}:
        return EXIT_VALIDATION
    if "global_flow" in failed and not s.expect_blowup:
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[..., int], str]] = {
    "rays": (cmd_rays, "trace rays from a footpoint grid (CSV)"),
    "branches": (cmd_branches, "branch set at one point (JSON)"),
    "density": (cmd_density, "multivalued density on an x-grid (CSV)"),
    "caustics": (cmd_caustics, "caustic points in the region (CSV)"),
    "focus": (cmd_focus, "concentrated mass at one point (JSON)"),
    "fluid": (cmd_fluid, "fluid-system residuals of the reconstructed single-branch solution (CSV)"),
    "wigner": (cmd_wigner, "discrete Wigner (or Husimi) transform of the finite-eps solution (CSV)"),
    "compare": (cmd_compare, "eps-ladder comparison against the limiting objects (JSON)"),
    "validate": (cmd_validate, "derivative, positivity and global-flow checks (JSON)"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario JSON file")
    src.add_argument("--preset", choices=PRESET_NAMES, help="shipped scenario")
    common.add_argument("--out", default=None, help="output file (default: stdout)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for grid sweeps")
    common.add_argument("--tol-ode", type=float, default=None, help="ODE relative tolerance (absolute = 1e-2 x this)")
    common.add_argument("--tol-root", type=float, default=None, help="root tolerance for the branch search")

    p = argparse.ArgumentParser(prog="caustica", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=h, description=h) for name, (_, h) in COMMANDS.items()}

    a = parsers["rays"]
    a.add_argument("--t0", type=float, default=0.0)
    a.add_argument("--t1", type=float, default=None, help="final time (default: end of the scenario time range)")
    a.add_argument("--nx", type=int, default=33, help="footpoints across the region")
    a.add_argument("--nt", type=int, default=2, help="output times from t0 to t1")

    a = parsers["branches"]
    a.add_argument("--x", required=True, help="point, comma-separated for d > 1")
    a.add_argument("--t", type=float, required=True)

    for name in ("density", "fluid"):
        a = parsers[name]
        a.add_argument("--grid", default=None, help="x-grid lo:hi:n (default: scenario region)")
        a.add_argument("--nx", type=int, default=257, help="x nodes when --grid is not given")
    parsers["density"].add_argument("--t", default=None, help="comma-separated times (default: scenario times)")
    parsers["fluid"].add_argument("--t-grid", required=True, help="time grid lo:hi:n")
    parsers["fluid"].add_argument("--sigma", default="v**2/2", help="weight sigma(v) for the moment residual")

    a = parsers["caustics"]
    a.add_argument("--grid", default=None, help="x-range and footpoint count lo:hi:n")
    a.add_argument("--t-range", default=None, help="time interval lo:hi (default: scenario t_range)")
    a.add_argument("--nz", type=int, default=257)
    a.add_argument("--nt", type=int, default=64)

    a = parsers["focus"]
    a.add_argument("--y", required=True)
    a.add_argument("--t", type=float, required=True)

    a = parsers["wigner"]
    a.add_argument("--eps", required=True, help="scale, e.g. 1/128")
    a.add_argument("--t", type=float, required=True)
    a.add_argument("--rows", type=int, default=129, help="x-rows written")
    a.add_argument("--xi-window", default=None, help="xi range lo:hi written (default: scenario xi_box)")
    a.add_argument("--min-n", type=int, default=256, help="smallest wave grid")
    a.add_argument("--husimi", action="store_true", help="write the Husimi function instead")

    a = parsers["compare"]
    a.add_argument("--eps-list", required=True, help="comma-separated scales, e.g. 1/64,1/128,1/256")
    a.add_argument("--t", type=float, required=True)

    parsers["validate"].add_argument("--samples", type=int, default=200)
    return p


_VALUE_FLAGS = {"--grid", "--t-grid", "--t-range", "--xi-window", "--x", "--y", "--t", "--eps-list"}
_NEGATIVE = re.compile(r"^-[0-9.]")


def _join_negative_values(argv: Sequence[str]) -> list[str]:
    """Turn ``--grid -2:2:9`` into ``--grid=-2:2:9`` so argparse does not read the value as a flag."""
    out: list[str] = []
    it = iter(argv)
    for tok in it:
        if tok in _VALUE_FLAGS:
            nxt = next(it, None)
            if nxt is not None and _NEGATIVE.match(nxt):
                out.append(f"{tok}={nxt}")
                continue
            out.append(tok)
            if nxt is not None:
                out.append(nxt)
            continue
        out.append(tok)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_negative_values(sys.argv[1:] if argv is None else argv))
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    fn, _ = COMMANDS[args.command]
    try:
        s = load(args)
        return fn(args, s)
    except CLIError as exc:
        print(f"caustica: {exc}", file=sys.stderr)
        return exc.code
    except (FlowBlowupError, br.UnreachableBranchError) as exc:
        print(f"caustica: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Multivalued solution reconstruction.

At a point (x, t) the admissible momenta are the zeros of the defect

    f_{x,t}(xi) = xi~(-t, x, xi) - grad S_I(x~(-t, x, xi)),

i.e. momenta whose backward bicharacteristic lands on the initial Lagrangian
graph.  Each zero is one branch; its density is n_I at the footpoint divided
by |det Df|.  Caustics are the points where some |det Df| (equivalently the
ray Jacobian) vanishes; mass concentrating there is measured through the
preimage of the ray map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import integrate as sint
from scipy.ndimage import minimum_filter

from ._kernels import sign_change_mask
from .flow import BlowupEvent, FlowBlowupError, PhasePoint, flow_batch, rays
from .integrate import OK
from .symbols import Box, HamiltonianSymbol, InitialData, Scenario, Tolerances

Array = np.ndarray

GRID_CELLS = 64
SUBCELLS = 16
NEWTON_ITERS = 100
STAGNATION_FACTOR = 1e3
SINGULAR_BALL = 1e-8
EPS = np.finfo(float).eps


class UnreachableBranchError(RuntimeError):
    """The backward flow from (x, xi) blew up before reaching t = 0."""


class CausticError(ValueError):
    """A quantity that divides by |Df| was requested at a caustic."""

    def __init__(self, message: str, branch: "BranchPoint | None" = None):
        super().__init__(message)
        self.branch = branch


# ---------------------------------------------------------------------------
# the defect map
# ---------------------------------------------------------------------------


@dataclass
class Defect:
    """Batched defect evaluation; row r corresponds to (x[r], t[r], xi[r])."""

    f: Array        # (B, d)
    jac: Array      # (B, d, d) derivative with respect to xi
    det: Array      # (B,) signed det of jac
    z: Array        # (B, d) backward footpoint
    reachable: Array  # (B,) backward flow finished

    @property
    def norm(self) -> Array:
        return np.linalg.norm(self.f, axis=-1)


def defect_batch(
    H: HamiltonianSymbol, initial: InitialData, x: Array, t: Array, xi: Array, tol: Tolerances = Tolerances()
) -> Defect:
    d = H.dim
    x = np.asarray(x, dtype=float).reshape(-1, d)
    xi = np.asarray(xi, dtype=float).reshape(-1, d)
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
    b = flow_batch(H, x, xi, -t, rtol=tol.ode_rtol, atol=tol.ode_atol)
    z, xit, phi = b.x, b.xi, b.jac
    hs = initial.hessian(z)
    f = xit - np.asarray(initial.grad_S_I(z)).reshape(-1, d)
    jac = phi[:, d:, d:] - hs @ phi[:, :d, d:]
    ok = b.ok
    f[~ok] = np.nan
    jac[~ok] = np.nan
    return Defect(f, jac, np.linalg.det(jac), z, ok)


@dataclass(frozen=True)
class DefectValue:
    f: Array
    jac: Array
    det: float
    z: Array


def f_xt(
    H: HamiltonianSymbol, initial: InitialData, x: Array, t: float, xi: Array, tol: Tolerances = Tolerances()
) -> DefectValue:
    """Defect vector, its xi-Jacobian and the backward footpoint at one momentum."""
    dv = defect_batch(H, initial, np.atleast_1d(x)[None, :], float(t), np.atleast_1d(xi)[None, :], tol)
    if not dv.reachable[0]:
        raise UnreachableBranchError(f"backward flow from x={x}, xi={xi} over time {t} did not reach t=0")
    return DefectValue(dv.f[0], dv.jac[0], float(dv.det[0]), dv.z[0])


# ---------------------------------------------------------------------------
# branch containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchPoint:
    v: Array
    S: float
    n: float            # nan when at_caustic
    Df: float
    z: Array
    residual: float
    at_caustic: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": self.v.tolist(),
            "S": self.S,
            "n": None if not np.isfinite(self.n) else self.n,
            "Df": self.Df,
            "z": self.z.tolist(),
            "residual": self.residual,
            "at_caustic": self.at_caustic,
        }


@dataclass
class BranchSet:
    x: Array
    t: float
    branches: list[BranchPoint]
    complete: bool
    diagnostics: list[str] = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.branches)

    @property
    def velocities(self) -> Array:
        d = len(self.x)
        return np.array([b.v for b in self.branches]).reshape(-1, d)

    @property
    def at_caustic(self) -> bool:
        return any(b.at_caustic for b in self.branches)

    def to_dict(self) -> dict[str, Any]:
        return {
            "x": self.x.tolist(),
            "t": self.t,
            "N": self.N,
            "complete": self.complete,
            "branches": [b.to_dict() for b in self.branches],
            "diagnostics": list(self.diagnostics),
        }


# ---------------------------------------------------------------------------
# root search
# ---------------------------------------------------------------------------


def _scale_tol(tol: Tolerances, xi: Array) -> Array:
    return tol.root * (1.0 + np.abs(xi))


def _grid_1d(box: Box, cells: int, singular: bool) -> Array:
    g = np.linspace(box.lo[0], box.hi[0], cells + 1)
    if singular:
        near = np.abs(g) < SINGULAR_BALL
        g[near] = np.nan
    return g


def _eval_1d(H, initial, xs, ts, qid, xi, tol):
    good = np.isfinite(xi)
    f = np.full(len(xi), np.nan)
    df = np.full(len(xi), np.nan)
    if np.any(good):
        dv = defect_batch(H, initial, xs[qid[good]], ts[qid[good]], xi[good, None], tol)
        f[good] = dv.f[:, 0]
        df[good] = dv.jac[:, 0, 0]
    return f, df


def _safeguarded_newton(H, initial, xs, ts, qid, lo, hi, flo, fhi, tol):
    """Bracketed Newton with bisection fallback (rtsafe); returns (root, |f|, converged, stagnated)."""
    k = len(qid)
    lo = lo.copy()
    hi = hi.copy()
    flo = flo.copy()
    root = np.where((flo == 0.0) & (lo == hi), lo, np.nan)
    exact = np.isfinite(root)
    denom = fhi - flo
    with np.errstate(all="ignore"):
        x = np.where(exact, root, lo - flo * (hi - lo) / denom)
    surrogate = (np.abs(flo) < 1e-250) | (np.abs(fhi) < 1e-250)
    x = np.where((x > lo) & (x < hi) & ~surrogate, x, 0.5 * (lo + hi))
    x[exact] = root[exact]
    resid = np.full(k, np.inf)
    resid[exact] = 0.0
    converged = exact.copy()
    stagnated = np.zeros(k, dtype=bool)
    dx_old = hi - lo
    act = np.flatnonzero(~converged)
    for _ in range(NEWTON_ITERS):
        if act.size == 0:
            break
        fx, dfx = _eval_1d(H, initial, xs, ts, qid[act], x[act], tol)
        resid[act] = np.abs(fx)
        small = np.abs(fx) <= _scale_tol(tol, x[act])
        with np.errstate(all="ignore"):
            tiny_step = np.abs(fx / dfx) <= 1e-11 * (1.0 + np.abs(x[act]))
        # a small residual alone is not enough: f can be flat (fold, cusp)
        done = (fx == 0.0) | (small & tiny_step)
        same = np.sign(fx) == np.sign(flo[act])
        lo[act] = np.where(same, x[act], lo[act])
        flo[act] = np.where(same, fx, flo[act])
        hi[act] = np.where(same, hi[act], x[act])
        width = hi[act] - lo[act]
        collapsed = width <= 4.0 * EPS * (1.0 + np.abs(x[act]))
        with np.errstate(all="ignore"):
            xn = x[act] - fx / dfx
        bad = ~np.isfinite(xn) | (xn <= lo[act]) | (xn >= hi[act]) | (np.abs(2.0 * fx) > np.abs(dx_old[act] * dfx))
        mid = 0.5 * (lo[act] + hi[act])
        step_new = np.where(bad, mid, xn)
        dx_old[act] = np.abs(step_new - x[act])
        converged[act[done]] = True
        done = done | (collapsed & small)
        stag = collapsed & ~done
        stagnated[act[stag]] = True
        fin = done | stag | ~np.isfinite(fx)
        x[act[~fin]] = step_new[~fin]
        act = act[~fin]
    stagnated[act] = True
    return x, resid, converged, stagnated


def _cell_brackets(X: Array, F: Array, D: Array):
    """Sign-change cells along axis 1 plus exact zeros at nodes.

    An exact zero at a node is recorded as a root of its own; for the sign
    test of the two adjacent cells it is replaced by the one-sided sign
    implied by the slope there, so a second root inside a neighbouring cell
    is still bracketed.
    """
    fin = np.isfinite(F)
    zero = fin & (F == 0.0)
    sd = np.sign(np.where(np.isfinite(D), D, 0.0))
    as_left = np.where(zero, sd, np.sign(F))    # sign just right of each node
    as_right = np.where(zero, -sd, np.sign(F))  # sign just left of each node
    pair = fin[:, :-1] & fin[:, 1:]
    strict = pair & (as_left[:, :-1] * as_right[:, 1:] < 0.0)
    rr, cc = np.nonzero(strict)
    zr, zc = np.nonzero(zero)
    rows = np.concatenate([rr, zr])
    lo = np.concatenate([X[rr, cc], X[zr, zc]])
    hi = np.concatenate([X[rr, cc + 1], X[zr, zc]])
    flo = np.concatenate([np.where(zero[rr, cc], as_left[rr, cc] * 1e-300, F[rr, cc]), np.zeros(zr.size)])
    fhi = np.concatenate([np.where(zero[rr, cc + 1], as_right[rr, cc + 1] * 1e-300, F[rr, cc + 1]), np.zeros(zr.size)])
    return rows, lo, hi, flo, fhi, strict


def _extremum_1d(H, initial, xs, ts, qid, a, b, da, tol, iters=60):
    """Bisect on the sign of Df between a and b; returns the extremum of f and f there."""
    a = a.copy()
    b = b.copy()
    for _ in range(iters):
        m = 0.5 * (a + b)
        _, dm = _eval_1d(H, initial, xs, ts, qid, m, tol)
        same = np.sign(dm) == np.sign(da)
        a = np.where(same, m, a)
        b = np.where(same, b, m)
        if np.all(b - a <= 4.0 * EPS * (1.0 + np.abs(a))):
            break
    xm = 0.5 * (a + b)
    fm, _ = _eval_1d(H, initial, xs, ts, qid, xm, tol)
    return xm, fm


def _roots_1d(H, initial, xs, ts, xi_box, tol, cells):
    Q = len(xs)
    grid = _grid_1d(xi_box, cells, H.singular_at_zero)
    G = len(grid)
    qid = np.repeat(np.arange(Q), G)
    F, D = _eval_1d(H, initial, xs, ts, qid, np.tile(grid, Q), tol)
    F = F.reshape(Q, G)
    D = D.reshape(Q, G)
    diags: list[list[str]] = [[] for _ in range(Q)]
    unreachable = ~np.isfinite(F) & np.isfinite(grid)[None, :]
    for q in np.flatnonzero(np.any(unreachable, axis=1)):
        diags[q].append(f"{int(unreachable[q].sum())} grid momenta unreachable (backward flow failed)")

    bq, lo, hi, flo, fhi, strict = _cell_brackets(np.broadcast_to(grid, F.shape), F, D)

    # Local minima of |f| that do not sit next to a strict sign change may hide
    # a pair of close roots (or a root next to an exact zero): refine them.
    A = np.abs(np.where(np.isfinite(F), F, np.inf))
    left = np.concatenate([np.full((Q, 1), np.inf), A[:, :-1]], axis=1)
    right = np.concatenate([A[:, 1:], np.full((Q, 1), np.inf)], axis=1)
    cell_flag = np.zeros((Q, G + 1), dtype=bool)
    cell_flag[:, 1:-1] = strict
    near_bracket = cell_flag[:, :-1] | cell_flag[:, 1:]
    is_min = (A <= left) & (A <= right) & np.isfinite(A) & ~near_bracket
    mq, mi = np.nonzero(is_min)
    if mq.size:
        a = grid[np.maximum(mi - 1, 0)]
        b = grid[np.minimum(mi + 1, G - 1)]
        a = np.where(np.isfinite(a), a, grid[mi])
        b = np.where(np.isfinite(b), b, grid[mi])
        sub = a[:, None] + (b - a)[:, None] * np.linspace(0.0, 1.0, 2 * SUBCELLS + 1)[None, :]
        if H.singular_at_zero:
            sub[np.abs(sub) < SINGULAR_BALL] = np.nan
        S = sub.shape[1]
        sq = np.repeat(mq, S)
        Fs, Ds = _eval_1d(H, initial, xs, ts, sq, sub.ravel(), tol)
        Fs = Fs.reshape(-1, S)
        Ds = Ds.reshape(-1, S)
        rr, slo, shi, sflo, sfhi, smask = _cell_brackets(sub, Fs, Ds)
        bq = np.concatenate([bq, mq[rr]])
        lo = np.concatenate([lo, slo])
        hi = np.concatenate([hi, shi])
        flo = np.concatenate([flo, sflo])
        fhi = np.concatenate([fhi, sfhi])
        smask = smask | (Fs[:, :-1] == 0.0) | (Fs[:, 1:] == 0.0)
        # no sign change on the fine grid: a root pair can still hide around the extremum of f
        nob = np.flatnonzero(~np.any(smask, axis=1))
        if nob.size:
            As = np.abs(np.where(np.isfinite(Fs[nob]), Fs[nob], np.inf))
            j = np.argmin(As, axis=1)
            rows, js, das, dbs, fa_, ea, eb = [], [], [], [], [], [], []
            for r, jj in zip(nob, j):
                for k0 in (jj - 1, jj):
                    if 0 <= k0 < S - 1 and np.isfinite(Ds[r, k0]) and np.isfinite(Ds[r, k0 + 1]) and Ds[r, k0] * Ds[r, k0 + 1] < 0:
                        rows.append(r)
                        ea.append(sub[r, k0])
                        eb.append(sub[r, k0 + 1])
                        das.append(Ds[r, k0])
                        fa_.append(Fs[r, k0])
                        break
            if rows:
                rows = np.asarray(rows)
                ea, eb, das, fa_ = map(np.asarray, (ea, eb, das, fa_))
                xm, fm = _extremum_1d(H, initial, xs, ts, mq[rows], ea, eb, das, tol)
                split = np.isfinite(fm) & (np.sign(fm) != np.sign(fa_)) & (fm != 0.0)
                touch = np.isfinite(fm) & ~split & (np.abs(fm) <= _scale_tol(tol, xm))
                for r, x_, f_, a_, b_, fa0, sp, to in zip(rows, xm, fm, ea, eb, fa_, split, touch):
                    q = int(mq[r])
                    if sp:
                        # f(a_) and f(b_) share a sign (no change on the fine grid), f(x_) differs
                        fb0 = float(_eval_1d(H, initial, xs, ts, np.array([q]), np.array([b_]), tol)[0][0])
                        bq = np.concatenate([bq, [q, q]])
                        lo = np.concatenate([lo, [a_, x_]])
                        hi = np.concatenate([hi, [x_, b_]])
                        flo = np.concatenate([flo, [fa0, f_]])
                        fhi = np.concatenate([fhi, [f_, fb0]])
                    elif to:
                        bq = np.concatenate([bq, [q]])
                        lo = np.concatenate([lo, [x_]])
                        hi = np.concatenate([hi, [x_]])
                        flo = np.concatenate([flo, [0.0]])
                        fhi = np.concatenate([fhi, [0.0]])
                        diags[q].append(f"tangential root at xi={x_:.12g} (|f|={abs(f_):.2e})")

    roots_q: list[list[tuple[float, float]]] = [[] for _ in range(Q)]
    if len(bq):
        r, res, conv, stag = _safeguarded_newton(H, initial, xs, ts, bq, lo, hi, flo, fhi, tol)
        for q, rv, rs, c, s in zip(bq, r, res, conv, stag):
            if c:
                roots_q[q].append((rv, rs))
            elif s and rs <= STAGNATION_FACTOR * tol.root * (1.0 + abs(rv)):
                roots_q[q].append((rv, rs))
                diags[q].append(f"root near xi={rv:.12g} accepted at stagnation, |f|={rs:.3e}")
            else:
                diags[q].append(f"bracket near xi={rv:.6g} did not converge (|f|={rs:.3e}); discarded")

    edge_tol = 10.0 * tol.root
    complete = np.ones(Q, dtype=bool)
    for q in range(Q):
        for col in (0, G - 1):
            if np.isfinite(F[q, col]) and abs(F[q, col]) < edge_tol * (1.0 + abs(grid[col])):
                complete[q] = False
        if np.any(unreachable[q]):
            complete[q] = False
    return [np.array([r for r, _ in rq]).reshape(-1, 1) for rq in roots_q], complete, diags


def _roots_nd(H, initial, xs, ts, xi_box, tol, cells):
    d = H.dim
    Q = len(xs)
    axes = [np.linspace(a, b, cells + 1) for a, b in zip(xi_box.lo, xi_box.hi)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    G = len(mesh)
    qid = np.repeat(np.arange(Q), G)
    pts = np.tile(mesh, (Q, 1))
    dv = defect_batch(H, initial, xs[qid], ts[qid], pts, tol)
    nrm = dv.norm.reshape((Q,) + (cells + 1,) * d)
    A = np.where(np.isfinite(nrm), nrm, np.inf)
    diags: list[list[str]] = [[] for _ in range(Q)]
    roots: list[Array] = []
    complete = np.ones(Q, dtype=bool)
    shape = (cells + 1,) * d
    boundary = np.zeros(shape, dtype=bool)
    for ax in range(d):
        idx = [slice(None)] * d
        idx[ax] = 0
        boundary[tuple(idx)] = True
        idx[ax] = -1
        boundary[tuple(idx)] = True
    seeds_q, seeds_x = [], []
    for q in range(Q):
        a = A[q]
        m = (a == minimum_filter(a, size=3, mode="nearest")) & np.isfinite(a)
        cand = np.flatnonzero(m.ravel())
        cand = cand[np.argsort(a.ravel()[cand])][:64]
        seeds_q.extend([q] * len(cand))
        seeds_x.append(mesh[cand])
        bvals = a[boundary]
        bpts = mesh[boundary.ravel()]
        if np.any(bvals < 10.0 * tol.root * (1.0 + np.linalg.norm(bpts, axis=-1))):
            complete[q] = False
    sq = np.asarray(seeds_q, dtype=int)
    X = np.concatenate(seeds_x) if seeds_x else np.zeros((0, d))
    lo, hi = xi_box.lo_arr, xi_box.hi_arr
    lam = np.ones(len(X))
    cur = defect_batch(H, initial, xs[sq], ts[sq], X, tol) if len(X) else None
    conv = np.zeros(len(X), dtype=bool)
    if cur is not None:
        fn = cur.norm
        f, J = cur.f, cur.jac
        act = np.flatnonzero(np.isfinite(fn))
        for _ in range(80):
            done = fn[act] <= tol.root * (1.0 + np.linalg.norm(X[act], axis=-1))
            conv[act[done]] = True
            act = act[~done & (lam[act] > 1e-6)]
            if act.size == 0:
                break
            try:
                step = np.linalg.solve(J[act], -f[act][..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([np.linalg.lstsq(Ji, -fi, rcond=None)[0] for Ji, fi in zip(J[act], f[act])])
            trial = np.clip(X[act] + lam[act, None] * step, lo, hi)
            nv = defect_batch(H, initial, xs[sq[act]], ts[sq[act]], trial, tol)
            better = np.isfinite(nv.norm) & (nv.norm < fn[act])
            idx = act[better]
            X[idx] = trial[better]
            fn[idx] = nv.norm[better]
            f[idx] = nv.f[better]
            J[idx] = nv.jac[better]
            lam[idx] = np.minimum(1.0, 2.0 * lam[idx])
            lam[act[~better]] *= 0.5
    for q in range(Q):
        sel = (sq == q) & conv
        roots.append(X[sel])
        nfail = int(np.sum((sq == q) & ~conv))
        if nfail:
            diags[q].append(f"{nfail} Newton seeds did not converge; discarded")
    return roots, complete, diags


def _dedupe(roots: Array, resid: Array, tol: Tolerances) -> tuple[Array, Array]:
    if len(roots) <= 1:
        return roots, resid
    order = np.argsort(resid, kind="stable")
    keep: list[int] = []
    for i in order:
        r = roots[i]
        if all(np.linalg.norm(r - roots[j]) > tol.dedupe * (1.0 + np.linalg.norm(r)) for j in keep):
            keep.append(i)
    keep.sort(key=lambda i: tuple(roots[i]))
    return roots[keep], resid[keep]


def find_branches_batch(
    H: HamiltonianSymbol,
    initial: InitialData,
    xs: Array,
    ts: Array | float,
    xi_box: Box,
    tol: Tolerances = Tolerances(),
    cells: int | None = None,
) -> list[BranchSet]:
    """Enumerate all zeros of f_{x,t} in ``xi_box`` for every query (x_q, t_q)."""
    d = H.dim
    xs = np.asarray(xs, dtype=float).reshape(-1, d)
    Q = len(xs)
    ts = np.broadcast_to(np.asarray(ts, dtype=float), (Q,)).copy()
    if xi_box.dim != d:
        raise ValueError("xi_box dimension differs from the symbol")
    if Q == 0:
        return []
    if cells is None:
        cells = GRID_CELLS if d <= 2 else 16
    if d == 1:
        raw, complete, diags = _roots_1d(H, initial, xs, ts, xi_box, tol, cells)
    else:
        raw, complete, diags = _roots_nd(H, initial, xs, ts, xi_box, tol, cells)

    counts = [len(r) for r in raw]
    allq = np.repeat(np.arange(Q), counts)
    allv = np.concatenate(raw).reshape(-1, d) if sum(counts) else np.zeros((0, d))
    out: list[BranchSet] = []
    if len(allv):
        dv = defect_batch(H, initial, xs[allq], ts[allq], allv, tol)
        fwd = rays(H, initial, dv.z, ts[allq], rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
        nI = np.asarray(initial.n_I(dv.z))
    start = 0
    for q in range(Q):
        c = counts[q]
        sl = slice(start, start + c)
        start += c
        if c == 0:
            out.append(BranchSet(xs[q].copy(), float(ts[q]), [], bool(complete[q]), diags[q]))
            continue
        v = allv[sl]
        res = dv.norm[sl]
        okmask = dv.reachable[sl] & np.isfinite(res)
        v, res = v[okmask], res[okmask]
        idx = np.flatnonzero(okmask) + sl.start
        vv, rr = _dedupe(v, res, tol)
        pick = [idx[np.flatnonzero(np.all(v == row, axis=1))[0]] for row in vv]
        pts = []
        for i in pick:
            det = float(dv.det[i])
            caustic = abs(det) < tol.caustic
            n = float(nI[i] / abs(det)) if not caustic else float("nan")
            if fwd.status[i] != OK:
                diags[q].append(f"forward ray from footpoint {dv.z[i]} failed; phase unavailable")
                S = float("nan")
            else:
                S = float(fwd.S[i])
            pts.append(BranchPoint(allv[i].copy(), S, n, det, dv.z[i].copy(), float(dv.norm[i]), caustic))
        pts.sort(key=lambda b: tuple(b.v))
        out.append(BranchSet(xs[q].copy(), float(ts[q]), pts, bool(complete[q]), diags[q]))
    return out


def find_branches(
    H: HamiltonianSymbol,
    initial: InitialData,
    x: Array | float,
    t: float,
    xi_box: Box,
    tol: Tolerances = Tolerances(),
) -> BranchSet:
    return find_branches_batch(H, initial, np.atleast_1d(np.asarray(x, dtype=float))[None, :], float(t), xi_box, tol)[0]


# ---------------------------------------------------------------------------
# densities and phases
# ---------------------------------------------------------------------------


@dataclass
class DensityResult:
    n: float
    terms: list[float]
    branches: BranchSet


def density(
    H: HamiltonianSymbol, initial: InitialData, x: Array | float, t: float, xi_box: Box, tol: Tolerances = Tolerances()
) -> DensityResult:
    """Sum of n_I(z_i)/|Df_i| over branches; raises CausticError at caustics."""
    bs = find_branches(H, initial, x, t, xi_box, tol)
    for b in bs.branches:
        if b.at_caustic:
            raise CausticError(f"|Df| = {abs(b.Df):.3e} below the caustic threshold at x={bs.x}, t={t}", b)
    terms = [b.n for b in bs.branches]
    return DensityResult(float(sum(terms)), terms, bs)


@dataclass
class DensityBatch:
    x: Array
    t: Array
    n: Array          # nan where some branch is at a caustic
    n_raw: Array      # sum n_I/|Df| without the caustic guard
    n_regular: Array  # sum over the branches that are not at a caustic
    N: Array
    at_caustic: Array
    complete: Array


def density_batch(
    H: HamiltonianSymbol, initial: InitialData, xs: Array, ts: Array | float, xi_box: Box, tol: Tolerances = Tolerances()
) -> DensityBatch:
    d = H.dim
    xs = np.asarray(xs, dtype=float).reshape(-1, d)
    ts = np.broadcast_to(np.asarray(ts, dtype=float), (len(xs),)).copy()
    sets = find_branches_batch(H, initial, xs, ts, xi_box, tol)
    nI = initial.n_I
    n = np.zeros(len(xs))
    raw = np.zeros(len(xs))
    reg = np.zeros(len(xs))
    N = np.zeros(len(xs), dtype=int)
    cz = np.zeros(len(xs), dtype=bool)
    comp = np.zeros(len(xs), dtype=bool)
    for i, bs in enumerate(sets):
        N[i] = bs.N
        comp[i] = bs.complete
        cz[i] = bs.at_caustic
        if bs.N:
            zs = np.array([b.z for b in bs.branches])
            dets = np.abs([b.Df for b in bs.branches])
            with np.errstate(divide="ignore"):
                terms = np.asarray(nI(zs)) / dets
            raw[i] = float(np.sum(terms))
            reg[i] = float(np.sum(terms[dets >= tol.caustic]))
        n[i] = np.nan if cz[i] else raw[i]
    return DensityBatch(xs, ts, n, raw, reg, N, cz, comp)


@dataclass(frozen=True)
class WKBValue:
    value: complex
    branches: BranchSet
    maslov_shifts_omitted: bool = True


def wkb_superposition(
    H: HamiltonianSymbol,
    initial: InitialData,
    x: Array | float,
    t: float,
    eps: float,
    xi_box: Box,
    tol: Tolerances = Tolerances(),
) -> WKBValue:
    """Sum of sqrt(n_i) exp(i S_i / eps); Maslov phase shifts are not included."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    bs = find_branches(H, initial, x, t, xi_box, tol)
    for b in bs.branches:
        if b.at_caustic:
            raise CausticError("WKB superposition is undefined at a caustic", b)
    val = sum(np.sqrt(b.n) * np.exp(1j * b.S / eps) for b in bs.branches)
    return WKBValue(complex(val), bs)


def wkb_superposition_batch(
    H: HamiltonianSymbol,
    initial: InitialData,
    xs: Array,
    t: float,
    eps: float,
    xi_box: Box,
    tol: Tolerances = Tolerances(),
) -> tuple[Array, Array]:
    """Vector version; returns (values, at_caustic mask).  Caustic nodes get nan."""
    d = H.dim
    xs = np.asarray(xs, dtype=float).reshape(-1, d)
    sets = find_branches_batch(H, initial, xs, t, xi_box, tol)
    out = np.zeros(len(xs), dtype=complex)
    cz = np.zeros(len(xs), dtype=bool)
    for i, bs in enumerate(sets):
        if bs.at_caustic:
            cz[i] = True
            out[i] = np.nan
            continue
        for b in bs.branches:
            out[i] += np.sqrt(b.n) * np.exp(1j * b.S / eps)
    return out, cz


# ---------------------------------------------------------------------------
# caustic detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CausticPoint:
    x: Array
    t: float
    z: Array            # footpoint of the vanishing branch
    v: Array            # momentum of the vanishing branch
    kind: str           # "jacobian_zero" or "kink_edge"
    multiplicity: int = 1

    def to_row(self) -> list[Any]:
        return [*self.x.tolist(), self.t, *self.z.tolist(), *self.v.tolist(), self.kind, self.multiplicity]


@dataclass
class CausticScan:
    points: list[CausticPoint]
    blowups: list[tuple[Array, float]]


def _footpoint_grid(box: Box, n: int) -> Array:
    if box.dim == 1:
        return np.linspace(box.lo[0], box.hi[0], n)[:, None]
    m = max(3, int(round(n ** (1.0 / box.dim))))
    axes = [np.linspace(a, b, m) for a, b in zip(box.lo, box.hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.dim)


def _ray_J(H, initial, z, t, tol):
    rb = rays(H, initial, z, t, rtol=tol.ode_rtol, atol=tol.ode_atol)
    J = np.where(rb.ok, rb.J, np.nan)
    return J, rb


def _cluster(points: list[CausticPoint], radius: float) -> list[CausticPoint]:
    pts = sorted(points, key=lambda p: (p.t, *p.x.tolist()))
    out: list[CausticPoint] = []
    for p in pts:
        for i, q in enumerate(out):
            if q.kind == p.kind and abs(q.t - p.t) <= radius and np.linalg.norm(q.x - p.x) <= radius:
                out[i] = CausticPoint(q.x, q.t, q.z, q.v, q.kind, q.multiplicity + 1)
                break
        else:
            out.append(p)
    return out


def caustic_scan(
    H: HamiltonianSymbol,
    initial: InitialData,
    region: Box,
    t_span: tuple[float, float],
    *,
    x0_box: Box | None = None,
    nz: int = 257,
    nt: int = 64,
    tol: Tolerances = Tolerances(),
    refine_tol: float = 1e-12,
) -> CausticScan:
    """Locate points where the ray Jacobian vanishes, refined in t by bisection.

    The sweep runs over footpoints and times; a vanishing ray Jacobian at
    (z, t) marks the caustic point (x_hat(t, z), t).  Rays issuing from kinks
    of the initial phase bound fans whose one-sided Jacobians have opposite
    signs; those are reported as ``kink_edge`` points on the time grid.
    """
    box = x0_box or region
    z = _footpoint_grid(box, nz)
    if initial.kinks and H.dim == 1:
        z = z[np.min(np.abs(z[:, :1] - np.asarray(initial.kinks)), axis=1) > 1e-9]
    t0, t1 = float(t_span[0]), float(t_span[1])
    tg = np.linspace(t0, t1, nt + 1)
    Z = np.repeat(z, len(tg), axis=0)
    T = np.tile(tg, len(z))
    J, rb = _ray_J(H, initial, Z, T, tol)
    J = J.reshape(len(z), len(tg))
    blowups = [(rb.x0[i].copy(), float(rb.t_event[i])) for i in np.flatnonzero(~rb.ok & np.isfinite(rb.t_event))]

    found: list[tuple[int, float]] = []
    # sign changes along t
    mask = sign_change_mask(np.ascontiguousarray(np.nan_to_num(J, nan=np.inf)))
    mask &= np.isfinite(J[:, :-1]) & np.isfinite(J[:, 1:])
    zi, ki = np.nonzero(mask)
    if zi.size:
        lo, hi = tg[ki].copy(), tg[ki + 1].copy()
        jlo = J[zi, ki].copy()
        exact = jlo == 0.0
        for _ in range(200):
            if np.all((hi - lo) <= refine_tol * (1.0 + np.abs(hi))):
                break
            mid = 0.5 * (lo + hi)
            jm, _ = _ray_J(H, initial, z[zi], mid, tol)
            same = np.sign(jm) == np.sign(jlo)
            lo = np.where(same & ~exact, mid, lo)
            hi = np.where(same | exact, hi, mid)
            hi = np.where(exact, lo, hi)
        found.extend(zip(zi.tolist(), (0.5 * (lo + hi)).tolist()))
    # touching zeros: interior local minima of |J| below threshold without a sign change
    A = np.abs(J)
    interior = np.zeros_like(A, dtype=bool)
    interior[:, 1:-1] = (A[:, 1:-1] <= A[:, :-2]) & (A[:, 1:-1] <= A[:, 2:]) & np.isfinite(A[:, 1:-1])
    flank = np.zeros_like(interior)
    flank[:, :-1] |= mask
    flank[:, 1:] |= mask
    cand = interior & ~flank & (A < 0.25)
    ci, ck = np.nonzero(cand)
    if ci.size:
        a, b = tg[ck - 1].copy(), tg[ck + 1].copy()
        gr = (np.sqrt(5.0) - 1.0) / 2.0
        for _ in range(120):
            c = b - gr * (b - a)
            e = a + gr * (b - a)
            jc, _ = _ray_J(H, initial, z[ci], c, tol)
            je, _ = _ray_J(H, initial, z[ci], e, tol)
            left = np.abs(jc) < np.abs(je)
            b = np.where(left, e, b)
            a = np.where(left, a, c)
            if np.all(b - a <= refine_tol * (1.0 + np.abs(b))):
                break
        tm = 0.5 * (a + b)
        jm, _ = _ray_J(H, initial, z[ci], tm, tol)
        hit = np.abs(jm) < tol.caustic
        found.extend(zip(ci[hit].tolist(), tm[hit].tolist()))

    points: list[CausticPoint] = []
    if found:
        idx = np.array([f[0] for f in found])
        tc = np.array([f[1] for f in found])
        rb2 = rays(H, initial, z[idx], tc, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
        for j in range(len(idx)):
            if rb2.status[j] != OK:
                continue
            points.append(CausticPoint(rb2.x[j].copy(), float(tc[j]), z[idx[j]].copy(), rb2.xi[j].copy(), "jacobian_zero"))

    if initial.kinks and H.dim == 1:
        eta = 1e-9
        for zk in initial.kinks:
            if not (box.lo[0] <= zk <= box.hi[0]):
                continue
            zz = np.array([[zk - eta], [zk + eta]])
            Zk = np.repeat(zz, len(tg), axis=0)
            Tk = np.tile(tg, 2)
            Jk, rk = _ray_J(H, initial, Zk, Tk, tol)
            Jk = Jk.reshape(2, len(tg))
            xk = rk.x.reshape(2, len(tg), 1)
            vk = rk.xi.reshape(2, len(tg), 1)
            opp = (Jk[0] * Jk[1] < 0.0) & np.isfinite(Jk[0]) & np.isfinite(Jk[1])
            for k in np.flatnonzero(opp):
                xm = 0.5 * (xk[0, k] + xk[1, k])
                points.append(CausticPoint(xm, float(tg[k]), np.array([zk]), 0.5 * (vk[0, k] + vk[1, k]), "kink_edge"))

    inside = [
        p for p in points
        if np.all(p.x >= region.lo_arr - 1e-9) and np.all(p.x <= region.hi_arr + 1e-9) and t0 - 1e-12 <= p.t <= t1 + 1e-12
    ]
    return CausticScan(_cluster(inside, tol.caustic), blowups)


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------


@dataclass
class ConcentrationReport:
    y: Array
    t: float
    mu: float
    classification: str
    preimage: list[tuple[float, float]]
    isolated: list[float]
    method: str = "interval"

    def to_dict(self) -> dict[str, Any]:
        return {
            "y": self.y.tolist(),
            "t": self.t,
            "mu": self.mu,
            "classification": self.classification,
            "preimage": [list(iv) for iv in self.preimage],
            "isolated": list(self.isolated),
            "method": self.method,
        }


DELTA_WIDE = 1e-6
# |Df| below this at a quadrature node means a numerically merged fold pair or
# a kink footpoint (round-off level); a genuine value that small needs
# |x - x_fold| < 1e-26, or |x - x_cusp| < 1e-20 for a cubic cusp
DF_NOISE = 1e-13
DELTA_NARROW = 1e-8


def _xhat_1d(H, initial, z, t, tol):
    rb = rays(H, initial, np.asarray(z).reshape(-1, 1), t, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
    if not np.all(rb.ok):
        bad = np.flatnonzero(~rb.ok)[0]
        raise _ray_blowup(rb, bad)
    return rb.x[:, 0]


def _ray_blowup(rb, i) -> FlowBlowupError:
    return FlowBlowupError(BlowupEvent(float(rb.t_event[i]), PhasePoint(rb.x[i], rb.xi[i]), f"ray from x0={rb.x0[i]} blew up"))


def _refine_edges(H, initial, y, t, tol, inside_pts, outside_pts, delta, iters=60):
    """Bisect between inside and outside footpoints for the |g| < delta edge."""
    a = np.asarray(inside_pts, dtype=float)
    b = np.asarray(outside_pts, dtype=float)
    thr = delta * (1.0 + abs(y))
    for _ in range(iters):
        if np.all(np.abs(a - b) <= 1e-14 * (1.0 + np.abs(a))):
            break
        m = 0.5 * (a + b)
        g = np.abs(_xhat_1d(H, initial, m, t, tol) - y)
        ins = g < thr
        a = np.where(ins, m, a)
        b = np.where(ins, b, m)
    return a


def concentration(
    H: HamiltonianSymbol,
    initial: InitialData,
    y: Array | float,
    t: float,
    x0_box: Box,
    tol: Tolerances = Tolerances(),
    n_grid: int = 2049,
) -> ConcentrationReport:
    """Mass carried into the single point y at time t, with hot/cool classification.

    In d = 1 the preimage of y under the ray map is resolved into intervals;
    an interval counts as genuine when it keeps (almost) its width as the
    detection threshold shrinks by a factor 100, which separates flat pieces
    of the ray map from ordinary transversal or tangential zeros.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if H.dim != 1:
        return _concentration_nd(H, initial, y, t, x0_box, tol)
    yv = float(y[0])
    lo, hi = x0_box.lo[0], x0_box.hi[0]
    z = np.linspace(lo, hi, n_grid)
    gs = _xhat_1d(H, initial, z, t, tol) - yv
    g = np.abs(gs)
    thr = DELTA_WIDE * (1.0 + abs(yv))
    ins = g < thr
    intervals: list[tuple[float, float]] = []
    isolated: list[float] = []
    # run-length decomposition of the inside mask
    edges = np.flatnonzero(np.diff(np.concatenate([[0], ins.astype(np.int8), [0]])))
    runs = list(zip(edges[::2], edges[1::2] - 1))
    mu = 0.0
    for i0, i1 in runs:
        if i1 == i0:
            isolated.append(float(z[i0]))
            continue

        def edge_pair(delta, i0=i0, i1=i1):
            left = z[i0] if i0 == 0 else float(_refine_edges(H, initial, yv, t, tol, [z[i0]], [z[i0 - 1]], delta)[0])
            right = z[i1] if i1 == n_grid - 1 else float(_refine_edges(H, initial, yv, t, tol, [z[i1]], [z[i1 + 1]], delta)[0])
            return float(left), float(right)

        l1, r1 = edge_pair(DELTA_WIDE)
        g_narrow = np.abs(_xhat_1d(H, initial, z[i0 : i1 + 1], t, tol) - yv) < DELTA_NARROW * (1.0 + abs(yv))
        if not np.any(g_narrow):
            isolated.append(float(0.5 * (l1 + r1)))
            continue
        j = np.flatnonzero(g_narrow)
        j0, j1 = i0 + j[0], i0 + j[-1]
        left2 = z[j0] if j0 == 0 else float(_refine_edges(H, initial, yv, t, tol, [z[j0]], [z[j0 - 1]], DELTA_NARROW)[0])
        right2 = z[j1] if j1 == n_grid - 1 else float(_refine_edges(H, initial, yv, t, tol, [z[j1]], [z[j1 + 1]], DELTA_NARROW)[0])
        w1, w2 = r1 - l1, right2 - left2
        if w1 <= 0 or w2 < 0.9 * w1:
            isolated.append(float(0.5 * (l1 + r1)))
            continue
        # linear extrapolation of each edge to a vanishing threshold
        k = DELTA_NARROW / (DELTA_WIDE - DELTA_NARROW)
        a = left2 if j0 == 0 else left2 + (left2 - l1) * k
        b = right2 if j1 == n_grid - 1 else right2 + (right2 - r1) * k
        a, b = max(a, lo), min(b, hi)
        pts = [p for p in initial.kinks if a < p < b]
        m, _ = sint.quad(lambda s: float(initial.n_I(np.array([[s]]))[0]), a, b, points=pts or None, limit=400, epsabs=1e-14, epsrel=1e-12)
        mu += float(m)
        intervals.append((a, b))
    # transversal crossings that fall between grid nodes
    cross = np.flatnonzero((np.sign(gs[:-1]) * np.sign(gs[1:]) < 0) & ~ins[:-1] & ~ins[1:])
    if len(cross):
        a, b = z[cross].copy(), z[cross + 1].copy()
        ga = gs[cross]
        for _ in range(60):
            m = 0.5 * (a + b)
            gm = _xhat_1d(H, initial, m, t, tol) - yv
            left = np.sign(gm) == np.sign(ga)
            a = np.where(left, m, a)
            ga = np.where(left, gm, ga)
            b = np.where(left, b, m)
        isolated.extend(float(v) for v in 0.5 * (a + b))
    isolated.sort()
    mu = max(mu, 0.0)
    cls = "hot" if mu > tol.mass else "cool"
    return ConcentrationReport(y, float(t), mu, cls, intervals, isolated)


def _concentration_nd(H, initial, y, t, box: Box, tol: Tolerances) -> ConcentrationReport:
    """Heuristic for d >= 2: count footpoint cells mapping into shrinking balls around y."""
    z = _footpoint_grid(box, 129 ** box.dim)
    rb = rays(H, initial, z, t, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=True)
    if not np.all(rb.ok):
        raise _ray_blowup(rb, int(np.flatnonzero(~rb.ok)[0]))
    dist = np.linalg.norm(rb.x - y, axis=-1)
    m = max(3, int(round(len(z) ** (1.0 / box.dim))))
    cell = np.prod((box.hi_arr - box.lo_arr) / (m - 1))
    scale = 1.0 + np.linalg.norm(y)
    w = dist < DELTA_WIDE * scale
    n2 = dist < DELTA_NARROW * scale
    flat = np.abs(rb.J) < tol.caustic
    mu = 0.0
    if n2.sum() >= 2 and n2.sum() >= 0.9 * w.sum():
        sel = n2 & flat
        mu = float(np.sum(initial.n_I(z[sel])) * cell)
    cls = "hot" if mu > tol.mass else "cool"
    return ConcentrationReport(y, float(t), mu, cls, [], [], method="jacobian_average")


# ---------------------------------------------------------------------------
# mass balance
# ---------------------------------------------------------------------------


@dataclass
class MassBalance:
    t: float
    regular: float
    concentrated: list[ConcentrationReport]
    initial_mass: float
    n_nodes: int

    @property
    def total(self) -> float:
        return self.regular + sum(c.mu for c in self.concentrated)

    @property
    def defect(self) -> float:
        return self.total - self.initial_mass


def _caustic_positions_1d(H, initial, box: Box, t: float, tol: Tolerances, n: int = 513) -> tuple[list[float], list[float]]:
    """x-positions at time t of footpoints where J(., t) changes sign, and of near-flat ray-map pieces."""
    z = np.linspace(box.lo[0], box.hi[0], n)
    if initial.kinks:
        z = z[np.min(np.abs(z[:, None] - np.asarray(initial.kinks)), axis=1) > 1e-9]
    J, rb = _ray_J(H, initial, z[:, None], t, tol)
    folds: list[float] = []
    flats: list[float] = []
    if not np.all(np.isfinite(J)):
        return folds, flats
    s = np.sign(J)
    for i in np.flatnonzero(s[:-1] * s[1:] < 0):
        a, b = z[i], z[i + 1]
        ja = J[i]
        for _ in range(80):
            m = 0.5 * (a + b)
            jm, _ = _ray_J(H, initial, np.array([[m]]), t, tol)
            if np.sign(jm[0]) == np.sign(ja):
                a, ja = m, jm[0]
            else:
                b = m
            if b - a < 1e-14 * (1 + abs(a)):
                break
        xr = rays(H, initial, np.array([[0.5 * (a + b)]]), t, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
        folds.append(float(xr.x[0, 0]))
    flat = np.abs(J) < tol.caustic
    if np.any(flat):
        xs = np.sort(rb.x[flat, 0])
        groups = np.split(xs, np.flatnonzero(np.diff(xs) > 1e-6) + 1)
        flats = [float(np.median(g)) for g in groups if len(g)]
    return folds, flats


def _nodes(n: int) -> tuple[Array, Array]:
    """Gauss-Legendre on (0, 1) pushed through a map whose derivative vanishes to fifth order at both ends.

    Integrable endpoint singularities such as |x - x_c|^(-1/2) (fold) or
    |x - x_c|^(-2/3) (cusp) become smooth enough for Gauss-Legendre.
    """
    s, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (s + 1.0)
    w = 0.5 * w
    dphi = 2772.0 * s**5 * (1.0 - s) ** 5
    # phi(s) = int_0^s 2772 u^5 (1-u)^5 du, expanded
    c = np.array([0, 0, 0, 0, 0, 0, 462, -1980, 3465, -3080, 1386, -252], dtype=float)
    phi = np.polynomial.polynomial.polyval(s, c)
    return phi, w * dphi


def integrate_density(
    scenario: Scenario,
    t: float,
    *,
    nodes_per_cell: int = 24,
    image_points: int = 48,
    tol: Tolerances | None = None,
) -> MassBalance:
    """Integrate the reconstructed density over the region (d = 1) and add concentrated masses."""
    if scenario.dim != 1:
        raise NotImplementedError("mass balance quadrature is implemented for d = 1")
    H, I = scenario.hamiltonian, scenario.initial
    tol = tol or scenario.tolerances
    box = scenario.footpoint_box
    lo, hi = scenario.region.lo[0], scenario.region.hi[0]
    zgrid = np.linspace(box.lo[0], box.hi[0], image_points)[:, None]
    rb = rays(H, I, zgrid, t, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
    bps = set(rb.x[rb.ok, 0].tolist())
    if I.kinks:
        kz = np.asarray(I.kinks)[:, None]
        kr = rays(H, I, kz, t, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
        bps |= set(kr.x[kr.ok, 0].tolist())
    folds, flats = _caustic_positions_1d(H, I, box, t, tol)
    bps |= set(folds) | set(flats)
    bps = np.array(sorted(p for p in bps if lo < p < hi))
    cuts = np.concatenate([[lo], bps, [hi]])
    cuts = cuts[np.concatenate([[True], np.diff(cuts) > 1e-12])]
    phi, wphi = _nodes(nodes_per_cell)
    a, b = cuts[:-1], cuts[1:]
    X = (a[:, None] + (b - a)[:, None] * phi[None, :]).ravel()
    W = ((b - a)[:, None] * wphi[None, :]).ravel()
    conc = [concentration(H, I, y, t, box, tol) for y in flats]
    conc = [c for c in conc if c.classification == "hot"]
    # branches whose footpoint feeds a point mass are already counted in mu
    hot = [iv for c in conc for iv in c.preimage]
    sets = find_branches_batch(H, I, X[:, None], np.full(len(X), float(t)), scenario.xi_box, tol)
    vals = np.zeros(len(X))
    for i, bs in enumerate(sets):
        for br in bs.branches:
            z = float(br.z[0])
            if any(lo_ - 1e-9 <= z <= hi_ + 1e-9 for lo_, hi_ in hot) or abs(br.Df) < DF_NOISE:
                continue
            vals[i] += float(I.n_I(np.array([[z]]))[0]) / abs(br.Df)
    regular = float(np.sum(vals * W))
    return MassBalance(float(t), regular, conc, I.mass, len(X))

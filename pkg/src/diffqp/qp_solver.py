"""ADMM solver for ``min 1/2 x'Px + q'x  s.t.  l <= Ax <= u``.

The iteration follows the OSQP operator-splitting scheme (Ruiz equilibration,
over-relaxation, adaptive rho, infeasibility certificates). Whenever the
guessed active set changes, a polish step solves the equality-constrained
KKT system on that set and accepts the point if it satisfies the full
optimality conditions at the requested tolerance. Polished duals are exactly
zero on inactive rows, which keeps the active set crisp for differentiation.

Dual sign convention: ``y_i > 0`` on an active upper bound, ``y_i < 0`` on an
active lower bound, stationarity ``Px + q + A'y = 0``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import lsq_linear

from .csc import SparseCSC, sym_from_upper
from .errors import DimensionMismatch, ZeroPivot
from .ldl import ldl_factorize

INF = 1e30


class Status(enum.Enum):
    SOLVED = "Solved"
    MAX_ITER = "MaxIter"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"


def _bound_to_json(v: float):
    if v == np.inf:
        return "inf"
    if v == -np.inf:
        return "-inf"
    return float(v)


def _bound_from_json(v) -> float:
    if isinstance(v, str):
        return float(v)  # float("inf") / float("-inf")
    return float(v)


@dataclass(eq=False)
class QPData:
    """Canonical QP; ``P`` holds the upper triangle only."""

    P: SparseCSC
    q: np.ndarray
    A: SparseCSC
    l: np.ndarray
    u: np.ndarray
    check_psd: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.l = np.asarray(self.l, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        n, m = self.n, self.m
        if self.P.shape != (n, n):
            raise DimensionMismatch(f"P is {self.P.shape}, q has length {n}")
        if self.A.ncols != n:
            raise DimensionMismatch(f"A has {self.A.ncols} columns, expected {n}")
        if self.l.shape != (m,) or self.u.shape != (m,):
            raise DimensionMismatch("l and u must have one entry per row of A")
        if np.any(self.P.row_idx > self.P.col_indices()):
            raise ValueError("P must store the upper triangle only")
        # sentinel magnitudes mean "no bound"
        self.l = np.where(self.l <= -INF, -np.inf, self.l)
        self.u = np.where(self.u >= INF, np.inf, self.u)
        if np.any(self.l > self.u):
            raise ValueError("l <= u violated")
        if np.any(np.isnan(self.q)) or np.any(np.isnan(self.l)) or np.any(np.isnan(self.u)):
            raise ValueError("NaN in QP data")
        if self.check_psd and n:
            self._check_psd()

    def _check_psd(self):
        scale = max(1.0, float(np.abs(self.P.values).max(initial=0.0)))
        try:
            F = ldl_factorize(sym_from_upper(self.P), np.ones(self.n), 1e-8 * scale)
        except ZeroPivot:
            raise ValueError("P is not positive semidefinite") from None
        if np.any(F.D <= 0):
            raise ValueError("P is not positive semidefinite")

    @property
    def n(self) -> int:
        return int(self.q.shape[0])

    @property
    def m(self) -> int:
        return int(self.A.nrows)

    def P_full(self) -> sp.csc_matrix:
        U = self.P.to_scipy()
        return (U + sp.triu(U, 1).T).tocsc()

    def objective(self, x) -> float:
        return 0.5 * float(x @ (self.P_full() @ x)) + float(self.q @ x)

    def to_json(self) -> dict:
        return {
            "P": self.P.to_json(),
            "q": [float(v) for v in self.q],
            "A": self.A.to_json(),
            "l": [_bound_to_json(v) for v in self.l],
            "u": [_bound_to_json(v) for v in self.u],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QPData":
        return cls(
            SparseCSC.from_json(obj["P"]),
            np.asarray(obj["q"], dtype=np.float64),
            SparseCSC.from_json(obj["A"]),
            np.array([_bound_from_json(v) for v in obj["l"]]),
            np.array([_bound_from_json(v) for v in obj["u"]]),
        )


@dataclass
class QPSolution:
    x: np.ndarray
    y: np.ndarray
    status: Status
    prim_res: float
    dual_res: float
    iterations: int = 0
    polished: bool = False

    @property
    def solved(self) -> bool:
        return self.status is Status.SOLVED


@dataclass
class Settings:
    rho: float = 0.1
    sigma: float = 1e-6
    relax: float = 1.6
    eps_abs: float = 1e-9
    eps_rel: float = 1e-9
    max_iter: int = 50000
    eps_pinf: float = 1e-5
    eps_dinf: float = 1e-5
    scaling_iter: int = 10
    adaptive_rho: bool = True
    polish: bool = True
    polish_delta: float = 1e-7
    polish_refine: int = 10
    polish_passes: int = 12
    check_interval: int = 25


def _ruiz(P, A, q, iters):
    """Modified Ruiz equilibration; returns (D, E, c) with P~ = c D P D, A~ = E A D."""
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col_p = np.abs(Ps).max(axis=0).toarray().ravel() if n else np.zeros(0)
        col_a = np.abs(As).max(axis=0).toarray().ravel() if m else np.zeros(n)
        dn = np.maximum(col_p, col_a)
        en = np.abs(As).max(axis=1).toarray().ravel() if m else np.zeros(0)
        dn = np.where(dn < 1e-4, 1.0, 1.0 / np.sqrt(np.clip(dn, 1e-4, 1e4)))
        en = np.where(en < 1e-4, 1.0, 1.0 / np.sqrt(np.clip(en, 1e-4, 1e4)))
        Dm = sp.diags(dn)
        Em = sp.diags(en)
        Ps = (Dm @ Ps @ Dm).tocsc()
        As = (Em @ As @ Dm).tocsc()
        qs = dn * qs
        D *= dn
        E *= en
        mean_col = np.abs(Ps).max(axis=0).toarray().ravel().mean() if n else 0.0
        gamma = max(mean_col, np.abs(qs).max(initial=0.0))
        gamma = 1.0 if gamma < 1e-4 else 1.0 / np.clip(gamma, 1e-4, 1e4)
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    return D, E, c, Ps.tocsc(), As.tocsc()


class _Prepared:
    """Everything about (P, A) that does not depend on q, l, u."""

    def __init__(self, data: "QPData", st: "Settings"):
        self.Pf = data.P_full()
        self.A = data.A.to_scipy()
        self.At = self.A.T.tocsc()
        self.D, self.E, self.c, self.Ps, self.As = _ruiz(self.Pf, self.A, data.q, st.scaling_iter)
        self.admm_lu: dict = {}
        self.polish_lu: dict = {}


class SolverCache:
    """Reuses scaling and factorizations across solves with identical P and A.

    Only q, l and u may differ between cache hits, as in a parametrized
    family where P and A are fixed over many instances.
    """

    def __init__(self, maxsize: int = 4, polish_maxsize: int = 256):
        self.maxsize = maxsize
        self.polish_maxsize = polish_maxsize
        self._entries: dict = {}

    @staticmethod
    def _key(data: "QPData", st: "Settings"):
        return (
            data.P.col_ptr.tobytes(), data.P.row_idx.tobytes(), data.P.values.tobytes(),
            data.A.col_ptr.tobytes(), data.A.row_idx.tobytes(), data.A.values.tobytes(),
            data.A.nrows, st.scaling_iter,
        )

    def get(self, data: "QPData", st: "Settings") -> _Prepared:
        key = self._key(data, st)
        prep = self._entries.pop(key, None)
        if prep is None:
            prep = _Prepared(data, st)
            while len(self._entries) >= self.maxsize:
                self._entries.pop(next(iter(self._entries)))
        self._entries[key] = prep
        return prep


def _kkt_lu(P, A_act, delta):
    n = P.shape[0]
    k = A_act.shape[0]
    K = sp.bmat([[P, A_act.T], [A_act, None]], format="csc") if k else P.tocsc()
    reg = sp.diags(np.r_[np.full(n, delta), np.full(k, -delta)])
    try:
        return K, spla.splu((K + reg).tocsc())
    except RuntimeError:
        return K, None


def _solve_kkt(K, lu, rhs_x, rhs_y, refine):
    """Solve [[P, A'], [A, 0]] z = rhs through the regularized LU plus iterative refinement."""
    if lu is None:
        return None
    n = len(rhs_x)
    rhs = np.r_[rhs_x, rhs_y]
    z = lu.solve(rhs)
    for _ in range(refine):
        res = rhs - K @ z
        if np.abs(res).max(initial=0.0) <= 1e-15 * (1 + np.abs(rhs).max(initial=0.0)):
            break
        z = z + lu.solve(res)
    if not np.all(np.isfinite(z)):
        return None
    return z[:n], z[n:]


class _Residuals:
    def __init__(self, data: QPData, Pf, A, At=None):
        self.data = data
        self.Pf = Pf
        self.A = A
        self.At = A.T.tocsc() if At is None else At

    def evaluate(self, x, y, eps_abs, eps_rel):
        d = self.data
        Ax = self.A @ x if d.m else np.zeros(0)
        Px = self.Pf @ x
        Aty = self.At @ y if d.m else np.zeros(d.n)
        viol = np.maximum(np.maximum(d.l - Ax, Ax - d.u), 0.0) if d.m else np.zeros(0)
        prim = float(viol.max(initial=0.0))
        dual = float(np.abs(Px + d.q + Aty).max(initial=0.0))
        zproj = np.clip(Ax, d.l, d.u) if d.m else np.zeros(0)
        eps_p = eps_abs + eps_rel * max(np.abs(Ax).max(initial=0.0), np.abs(zproj).max(initial=0.0))
        eps_d = eps_abs + eps_rel * max(
            np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0), np.abs(d.q).max(initial=0.0)
        )
        return prim, dual, eps_p, eps_d


def _polish(data: QPData, prep: _Prepared, lower, upper, st: Settings, res: _Residuals):
    """Solve the KKT system on a guessed active set; return a solution if it is optimal.

    A few active-set passes repair a near miss: the row whose multiplier has
    the worst wrong sign is dropped (which also clears redundant rows in
    degenerate guesses), or else the most violated row is added.
    """
    eq = data.l == data.u
    lower = lower.copy()
    upper = upper.copy()
    seen = set()
    for _ in range(st.polish_passes):
        act = lower | upper | eq
        rows = np.flatnonzero(act)
        state = (lower.tobytes(), upper.tobytes())
        if state in seen:
            return None
        seen.add(state)
        b = np.where(upper[rows] & ~lower[rows], data.u[rows], data.l[rows])
        b = np.where(eq[rows], data.l[rows], b)
        if not np.all(np.isfinite(b)):
            return None
        key = rows.tobytes()
        cached = prep.polish_lu.get(key)
        if cached is None:
            A_act = prep.A[rows, :] if len(rows) else sp.csc_matrix((0, data.n))
            cached = _kkt_lu(prep.Pf, A_act, st.polish_delta)
            if len(prep.polish_lu) >= 256:
                prep.polish_lu.pop(next(iter(prep.polish_lu)))
            prep.polish_lu[key] = cached
        out = _solve_kkt(*cached, -data.q, b, st.polish_refine)
        if out is None:
            return None
        x, y_act = out
        y = np.zeros(data.m)
        y[rows] = y_act
        prim, dual, eps_p, eps_d = res.evaluate(x, y, st.eps_abs, st.eps_rel)
        # an inconsistent guess leaves some "active" rows off their bound
        gap = np.abs(prep.A[rows, :] @ x - b) if len(rows) else np.zeros(0)
        if len(rows) and gap.max() > eps_p:
            k = int(np.argmax(np.where(eq[rows], -np.inf, gap)))
            if eq[rows][k]:
                return None
            lower[rows[k]] = False
            upper[rows[k]] = False
            continue
        ineq = ~eq[rows]
        lo_only = lower[rows] & ~upper[rows] & ineq
        up_only = upper[rows] & ~lower[rows] & ineq
        excess = np.where(lo_only, y_act, 0.0) - np.where(up_only, y_act, 0.0)
        worst = int(np.argmax(excess)) if len(rows) else 0
        if len(rows) == 0 or excess[worst] <= eps_d:
            if prim <= eps_p and dual <= eps_d:
                return QPSolution(x, y, Status.SOLVED, prim, dual, polished=True)
            if prim <= eps_p:
                return None
            Ax = prep.A @ x
            below = np.where(act, 0.0, data.l - Ax)
            above = np.where(act, 0.0, Ax - data.u)
            i = int(np.argmax(np.maximum(below, above)))
            if below[i] >= above[i]:
                lower[i] = True
            else:
                upper[i] = True
            continue
        if prim <= eps_p:
            # x is fine but the multipliers are not unique; refit them with signs imposed
            refit = _sign_consistent_dual(data, prep, x, rows, lo_only, up_only)
            if refit is not None:
                y = np.zeros(data.m)
                y[rows] = refit
                prim, dual, eps_p, eps_d = res.evaluate(x, y, st.eps_abs, st.eps_rel)
                if prim <= eps_p and dual <= eps_d:
                    return QPSolution(x, y, Status.SOLVED, prim, dual, polished=True)
        # drop the worst offender only; several at once can strip needed rows
        lower[rows[worst]] = False
        upper[rows[worst]] = False
    return None


def _sign_consistent_dual(data: QPData, prep: _Prepared, x, rows, lo_only, up_only):
    """Multipliers on ``rows`` minimizing |A_C'y + Px + q| with the side signs enforced."""
    M = prep.A[rows, :].T.toarray()
    rhs = -(prep.Pf @ x + data.q)
    lb = np.where(up_only, 0.0, -np.inf)
    ub = np.where(lo_only, 0.0, np.inf)
    try:
        fit = lsq_linear(M, rhs, bounds=(lb, ub), method="bvls", tol=1e-14)
    except (ValueError, np.linalg.LinAlgError):
        return None
    y = fit.x
    # bvls leaves exact zeros at the bounds; clean round-off there
    y[np.abs(y) <= 1e-14 * max(1.0, np.abs(y).max(initial=0.0))] = 0.0
    return _basic_dual(M, y, lo_only | up_only)


def _basic_dual(M, y, signed):
    """Move y along null directions of its support until the support columns are independent.

    Every step keeps M y fixed and the sign of each ``signed`` entry, and
    zeroes at least one of them, so the differentiation system built on the
    support is nonsingular.
    """
    y = y.copy()
    for _ in range(len(y)):
        S = np.flatnonzero(y != 0.0)
        if len(S) == 0:
            break
        _, sv, Vt = np.linalg.svd(M[:, S])
        tol = max(M.shape) * np.finfo(float).eps * (sv[0] if len(sv) else 0.0)
        rank = int((sv > tol).sum())
        if rank == len(S):
            break
        v = Vt[-1]
        ys = y[S]
        sgn = signed[S]
        best = None
        for direction in (v, -v):
            ok = sgn & (ys * direction > 0)
            if ok.any():
                ratios = np.where(ok, ys / np.where(ok, direction, 1.0), np.inf)
                k = int(np.argmin(ratios))
                if best is None or ratios[k] < best[0]:
                    best = (ratios[k], direction, k)
        if best is None:
            break
        t, direction, k = best
        ys = ys - t * direction
        ys[k] = 0.0
        y[S] = ys
    return y


def _guess_by_slack(data: QPData, z, y, prim):
    """Rows whose splitting variable sits within a small slack of a bound.

    Catches degenerate rows whose multiplier is too small for the dual-based
    guess; redundant rows are then pruned inside the polish.
    """
    tol = max(10.0 * prim, 1e-9)
    fl, fu = np.isfinite(data.l), np.isfinite(data.u)
    lower = fl & (z - data.l <= tol * (1.0 + np.abs(np.where(fl, data.l, 0.0))))
    upper = fu & (data.u - z <= tol * (1.0 + np.abs(np.where(fu, data.u, 0.0))))
    both = lower & upper & (data.l < data.u)
    lower[both] = y[both] < 0
    upper[both] = ~lower[both]
    return lower, upper


def _guess_active(data: QPData, Ax, y, z=None):
    if z is None:
        z = np.clip(Ax, data.l, data.u)
    lower = (z - data.l < -y) & np.isfinite(data.l)
    upper = (data.u - z < y) & np.isfinite(data.u)
    both = lower & upper & (data.l < data.u)
    lower[both] = y[both] < 0
    upper[both] = ~lower[both]
    return lower, upper


def qp_solve(data: QPData, settings: Settings | None = None, x0=None, y0=None,
             cache: SolverCache | None = None) -> QPSolution:
    """Solve one QP; ``x0``/``y0`` warm-start, ``cache`` reuses work across calls with equal P and A."""
    st = settings or Settings()
    n, m = data.n, data.m
    prep = cache.get(data, st) if cache is not None else _Prepared(data, st)
    Pf, A = prep.Pf, prep.A
    res = _Residuals(data, Pf, A, prep.At)

    if x0 is not None and len(x0) != n or y0 is not None and len(y0) != m:
        raise DimensionMismatch("warm start has wrong length")
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=np.float64).copy()

    tried = set()
    if st.polish and y0 is not None:
        lower = (y < 0) & np.isfinite(data.l)
        upper = (y > 0) & np.isfinite(data.u)
        tried.add((lower.tobytes(), upper.tobytes()))
        sol = _polish(data, prep, lower, upper, st, res)
        if sol is not None:
            return sol

    D, E, c, Ps, As = prep.D, prep.E, prep.c, prep.Ps, prep.As
    qs = c * D * data.q
    ls = np.where(np.isfinite(data.l), E * np.nan_to_num(data.l, neginf=0.0), -np.inf)
    us = np.where(np.isfinite(data.u), E * np.nan_to_num(data.u, posinf=0.0), np.inf)

    eq = data.l == data.u
    free = np.isinf(data.l) & np.isinf(data.u)
    rho = st.rho

    def rho_vec(r):
        v = np.full(m, r)
        v[eq] = 1e3 * r
        v[free] = 1e-6
        return v

    pattern = eq.tobytes() + free.tobytes()

    def factor(r):
        key = (r, pattern)
        if key in prep.admm_lu:
            return prep.admm_lu[key]
        rv = rho_vec(r)
        K = sp.bmat(
            [[Ps + st.sigma * sp.eye(n), As.T], [As, sp.diags(-1.0 / rv) if m else None]],
            format="csc",
        ) if m else (Ps + st.sigma * sp.eye(n)).tocsc()
        if len(prep.admm_lu) >= 16:
            prep.admm_lu.pop(next(iter(prep.admm_lu)))
        prep.admm_lu[key] = (spla.splu(K), rv)
        return prep.admm_lu[key]

    lu, rv = factor(rho)
    xs = x / D
    zs = np.clip(As @ xs, ls, us) if m else np.zeros(0)
    ys = c * y / E if m else np.zeros(0)
    alpha = st.relax

    x_prev = xs.copy()
    y_prev = ys.copy()
    prim = dual = np.inf
    for it in range(1, st.max_iter + 1):
        x_prev[:] = xs
        y_prev[:] = ys
        rhs = np.r_[st.sigma * xs - qs, zs - ys / rv] if m else st.sigma * xs - qs
        sol = lu.solve(rhs)
        xt = sol[:n]
        if m:
            nu = sol[n:]
            zt = zs + (nu - ys) / rv
            xs = alpha * xt + (1 - alpha) * xs
            zr = alpha * zt + (1 - alpha) * zs
            z_new = np.clip(zr + ys / rv, ls, us)
            ys = ys + rv * (zr - z_new)
            zs = z_new
        else:
            xs = alpha * xt + (1 - alpha) * xs

        if it % st.check_interval and it != st.max_iter:
            continue

        x = D * xs
        y = E * ys / c if m else np.zeros(0)
        z = zs / E if m else np.zeros(0)
        Ax = A @ x if m else np.zeros(0)
        # ADMM residuals use the splitting variable z
        prim = float(np.abs(Ax - z).max(initial=0.0))
        Px = Pf @ x
        Aty = prep.At @ y if m else np.zeros(n)
        dual = float(np.abs(Px + data.q + Aty).max(initial=0.0))
        eps_p = st.eps_abs + st.eps_rel * max(np.abs(Ax).max(initial=0.0), np.abs(z).max(initial=0.0))
        eps_d = st.eps_abs + st.eps_rel * max(
            np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0), np.abs(data.q).max(initial=0.0)
        )

        if st.polish:
            for lower, upper in (_guess_active(data, Ax, y, z), _guess_by_slack(data, z, y, prim)):
                guess = (lower.tobytes(), upper.tobytes())
                if guess in tried:
                    continue
                tried.add(guess)
                polished = _polish(data, prep, lower, upper, st, res)
                if polished is not None:
                    polished.iterations = it
                    return polished

        if prim <= eps_p and dual <= eps_d:
            return QPSolution(x, y, Status.SOLVED, prim, dual, iterations=it)

        infeasible = _certificate(data, Pf, A, x - D * x_prev, E * (ys - y_prev) / c if m else None, st)
        if infeasible is not None:
            return QPSolution(x, y, infeasible, prim, dual, iterations=it)

        if st.adaptive_rho and m:
            sx = Ps @ xs
            sa = As.T @ ys
            prim_s = np.abs(As @ xs - zs).max(initial=0.0) / max(
                np.abs(As @ xs).max(initial=0.0), np.abs(zs).max(initial=0.0), 1e-30
            )
            dual_s = np.abs(sx + qs + sa).max(initial=0.0) / max(
                np.abs(sx).max(initial=0.0), np.abs(sa).max(initial=0.0), np.abs(qs).max(initial=0.0), 1e-30
            )
            if prim_s > 0 and dual_s > 0:
                new_rho = float(np.clip(rho * math.sqrt(prim_s / dual_s), 1e-6, 1e6))
                if new_rho > 5 * rho or new_rho < rho / 5:
                    rho = new_rho
                    lu, rv = factor(rho)

    return QPSolution(D * xs, E * ys / c if m else np.zeros(0), Status.MAX_ITER, prim, dual, iterations=st.max_iter)


def _certificate(data: QPData, Pf, A, dx, dy, st: Settings):
    if dy is not None:
        ny = np.abs(dy).max(initial=0.0)
        if ny > 1e-12:
            ok_inf = not (np.any((dy > 0) & np.isinf(data.u)) or np.any((dy < 0) & np.isinf(data.l)))
            if ok_inf and np.abs(A.T @ dy).max(initial=0.0) <= st.eps_pinf * ny:
                support = np.sum(np.where(dy > 0, np.nan_to_num(data.u, posinf=0.0) * dy, 0.0)) + np.sum(
                    np.where(dy < 0, np.nan_to_num(data.l, neginf=0.0) * dy, 0.0)
                )
                if support < -st.eps_pinf * ny:
                    return Status.PRIMAL_INFEASIBLE
    nx = np.abs(dx).max(initial=0.0)
    if nx > 1e-12:
        if np.abs(Pf @ dx).max(initial=0.0) <= st.eps_dinf * nx and data.q @ dx < -st.eps_dinf * nx:
            Adx = A @ dx
            tol = st.eps_dinf * nx
            fin_u = np.isfinite(data.u)
            fin_l = np.isfinite(data.l)
            if np.all(Adx[fin_u] <= tol) and np.all(Adx[fin_l] >= -tol):
                return Status.DUAL_INFEASIBLE
    return None

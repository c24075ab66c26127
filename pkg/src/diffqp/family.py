"""Parametrized QP families given by affine maps.

A family is described by

    theta_tilde = C theta + c        (canonical data, scattered into P, q, A, l, u)
    x           = R x_tilde + r      (user variables from the canonical solution)

``theta_tilde`` has one coordinate per data slot, ordered P values (upper
triangle, CSC order), q, A values (CSC order), l, u. The ``layout`` records
the slot of every coordinate; it must cover every slot exactly once. Bounds
at or beyond 1e30 in magnitude mean "no bound".
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .csc import SparseCSC
from .errors import DimensionMismatch, SolverFailure
from .kkt_diff import DiffWorkspace, QPGradients, detect_active, qp_gradients
from .qp_solver import INF, QPData, QPSolution, Settings, SolverCache, Status, qp_solve

SLOTS = ("P", "q", "A", "l", "u")


@dataclass(eq=False)
class FamilyMaps:
    C: SparseCSC
    c: np.ndarray
    R: SparseCSC
    r: np.ndarray
    P_pattern: SparseCSC
    A_pattern: SparseCSC
    slot: np.ndarray  # index into SLOTS per canonical coordinate
    index: np.ndarray  # position inside that slot's value array
    theta_ref: np.ndarray | None = None
    _positions: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.slot = np.asarray(self.slot, dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.int64)
        if self.theta_ref is not None:
            self.theta_ref = np.asarray(self.theta_ref, dtype=np.float64)
        self._validate()

    @property
    def d(self) -> int:
        return self.C.ncols

    @property
    def d_tilde(self) -> int:
        return self.C.nrows

    @property
    def n(self) -> int:
        return self.R.nrows

    @property
    def n_tilde(self) -> int:
        return self.R.ncols

    @property
    def m(self) -> int:
        return self.A_pattern.nrows

    @property
    def dims(self) -> dict:
        return {"d": self.d, "d_tilde": self.d_tilde, "n": self.n, "n_tilde": self.n_tilde, "m": self.m}

    def _validate(self):
        nt, m = self.n_tilde, self.m
        if self.P_pattern.shape != (nt, nt) or self.A_pattern.ncols != nt:
            raise DimensionMismatch("P/A patterns do not match n_tilde")
        if np.any(self.P_pattern.row_idx > self.P_pattern.col_indices()):
            raise ValueError("P pattern must be upper triangular")
        if self.c.shape != (self.d_tilde,) or self.r.shape != (self.n,):
            raise DimensionMismatch("offset lengths do not match C/R")
        if self.slot.shape != (self.d_tilde,) or self.index.shape != (self.d_tilde,):
            raise DimensionMismatch("layout must have one entry per canonical coordinate")
        sizes = (self.P_pattern.nnz, nt, self.A_pattern.nnz, m, m)
        if self.d_tilde != sum(sizes):
            raise ValueError(f"layout covers {self.d_tilde} coordinates, data has {sum(sizes)} slots")
        positions = {}
        for k, (name, size) in enumerate(zip(SLOTS, sizes)):
            sel = np.flatnonzero(self.slot == k)
            idx = self.index[sel]
            if len(sel) != size or np.any(np.sort(idx) != np.arange(size)):
                raise ValueError(f"layout is not a bijection onto the {name} slots")
            pos = np.empty(size, dtype=np.int64)
            pos[idx] = sel
            positions[name] = pos
        if np.any((self.slot < 0) | (self.slot >= len(SLOTS))):
            raise ValueError("unknown slot kind")
        if self.theta_ref is not None and self.theta_ref.shape != (self.d,):
            raise DimensionMismatch("theta_ref has wrong length")
        self._positions = positions
        off = self.P_pattern.row_idx != self.P_pattern.col_indices()
        self._p_weight = np.where(off, 2.0, 1.0)

    def positions(self, name: str) -> np.ndarray:
        """Canonical coordinates feeding each value of slot ``name``, in slot order."""
        return self._positions[name]

    # serialization
    def to_json(self) -> dict:
        out = {
            "dims": self.dims,
            "C": self.C.to_json(),
            "c": [float(v) for v in self.c],
            "R": self.R.to_json(),
            "r": [float(v) for v in self.r],
            "P_pattern": self.P_pattern.to_json(),
            "A_pattern": self.A_pattern.to_json(),
            "layout": [{"slot": SLOTS[s], "index": int(i)} for s, i in zip(self.slot, self.index)],
        }
        if self.theta_ref is not None:
            out["theta_ref"] = [float(v) for v in self.theta_ref]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FamilyMaps":
        layout = obj["layout"]
        maps = cls(
            SparseCSC.from_json(obj["C"]),
            np.asarray(obj["c"], dtype=np.float64),
            SparseCSC.from_json(obj["R"]),
            np.asarray(obj["r"], dtype=np.float64),
            SparseCSC.from_json(obj["P_pattern"]),
            SparseCSC.from_json(obj["A_pattern"]),
            np.array([SLOTS.index(e["slot"]) for e in layout], dtype=np.int64),
            np.array([e["index"] for e in layout], dtype=np.int64),
            obj.get("theta_ref"),
        )
        if "dims" in obj and obj["dims"] != maps.dims:
            raise DimensionMismatch(f"declared dims {obj['dims']} do not match {maps.dims}")
        return maps

    def dumps(self) -> str:
        return dumps(self.to_json())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "FamilyMaps":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def dumps(obj: dict) -> str:
    """Canonical JSON text for family files."""
    return json.dumps(obj, separators=(",", ":")) + "\n"


def canonicalize(theta, maps: FamilyMaps, check_psd: bool = True) -> QPData:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (maps.d,):
        raise DimensionMismatch(f"theta has shape {theta.shape}, expected ({maps.d},)")
    tt = maps.C.matvec(theta) + maps.c
    P = maps.P_pattern.with_values(tt[maps.positions("P")])
    A = maps.A_pattern.with_values(tt[maps.positions("A")])
    q = tt[maps.positions("q")]
    l = tt[maps.positions("l")]
    u = tt[maps.positions("u")]
    return QPData(P, q, A, np.where(l <= -INF, -np.inf, l), np.where(u >= INF, np.inf, u), check_psd=check_psd)


def retrieve(x_tilde, maps: FamilyMaps) -> np.ndarray:
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    if x_tilde.shape != (maps.n_tilde,):
        raise DimensionMismatch(f"x_tilde has shape {x_tilde.shape}, expected ({maps.n_tilde},)")
    return maps.R.matvec(x_tilde) + maps.r


def gather(grads: QPGradients, maps: FamilyMaps) -> np.ndarray:
    """Collect QP-data adjoints into the canonical parameter vector.

    Each off-diagonal P slot stands for a symmetric pair of entries, so it
    receives both halves of the symmetric gradient.
    """
    g = np.zeros(maps.d_tilde)
    g[maps.positions("P")] = grads.dP.values * maps._p_weight
    g[maps.positions("q")] = grads.dq
    g[maps.positions("A")] = grads.dA.values
    g[maps.positions("l")] = grads.dl
    g[maps.positions("u")] = grads.du
    return g


def backward(dx, sol: QPSolution, data: QPData, maps: FamilyMaps, ws: DiffWorkspace) -> np.ndarray:
    dx = np.asarray(dx, dtype=np.float64)
    if dx.shape != (maps.n,):
        raise DimensionMismatch(f"dx has shape {dx.shape}, expected ({maps.n},)")
    grads = qp_gradients(maps.R.rmatvec(dx), sol, data, ws)
    return maps.C.rmatvec(gather(grads, maps))


class FamilyLayer:
    """Forward/backward pair over one family with a reusable factor workspace.

    Not thread-safe: each thread (or CV fold) should own its layer.
    """

    def __init__(self, maps: FamilyMaps, settings: Settings | None = None, eps: float = 1e-6,
                 n_refine: int = 3, tol_y: float = 1e-8):
        self.maps = maps
        self.settings = settings or Settings()
        self.eps = eps
        self.n_refine = n_refine
        self.tol_y = tol_y
        self.ws: DiffWorkspace | None = None
        self.cache = SolverCache()

    def forward(self, theta, x0=None, y0=None, check_psd: bool = True):
        data = canonicalize(theta, self.maps, check_psd=check_psd)
        sol = qp_solve(data, self.settings, x0=x0, y0=y0, cache=self.cache)
        if sol.status is not Status.SOLVED:
            raise SolverFailure(f"QP solve ended with status {sol.status.value}")
        return retrieve(sol.x, self.maps), sol, data

    def workspace(self, sol: QPSolution, data: QPData) -> DiffWorkspace:
        active = detect_active(sol, data, self.tol_y)
        if self.ws is None:
            self.ws = DiffWorkspace(data, active, self.eps, self.n_refine)
        else:
            self.ws.sync(data, active)
        return self.ws

    def backward(self, dx, sol: QPSolution, data: QPData) -> np.ndarray:
        return backward(dx, sol, data, self.maps, self.workspace(sol, data))


class FamilyBuilder:
    """Assemble FamilyMaps entry by entry.

    Each data entry is ``const + sum(coef * theta[k])``. Slots not mentioned
    default to zero (q), ``-inf`` (l) and ``+inf`` (u).
    """

    def __init__(self, n_tilde: int, m: int, d: int):
        self.n_tilde = n_tilde
        self.m = m
        self.d = d
        self._P: dict[tuple[int, int], tuple[float, list]] = {}
        self._A: dict[tuple[int, int], tuple[float, list]] = {}
        self._q = [(0.0, []) for _ in range(n_tilde)]
        self._l = [(-INF, []) for _ in range(m)]
        self._u = [(INF, []) for _ in range(m)]

    @staticmethod
    def _terms(terms):
        return [(int(k), float(v)) for k, v in (terms or [])]

    def P(self, i, j, const=0.0, terms=None):
        i, j = min(i, j), max(i, j)
        self._P[(i, j)] = (float(const), self._terms(terms))

    def A(self, i, j, const=0.0, terms=None):
        self._A[(i, j)] = (float(const), self._terms(terms))

    def q(self, i, const=0.0, terms=None):
        self._q[i] = (float(const), self._terms(terms))

    def l(self, i, const=None, terms=None):
        """Lower bound; ``const`` defaults to 0 with terms and to -inf without."""
        if const is None:
            const = 0.0 if terms else -INF
        self._l[i] = (float(const), self._terms(terms))

    def u(self, i, const=None, terms=None):
        """Upper bound; ``const`` defaults to 0 with terms and to +inf without."""
        if const is None:
            const = 0.0 if terms else INF
        self._u[i] = (float(const), self._terms(terms))

    def bounds(self, i, lo=None, hi=None, terms=None):
        """Set l_i and u_i; ``terms`` (if given) feed both, for equality rows."""
        self.l(i, lo, terms)
        self.u(i, hi, terms)

    @staticmethod
    def _pattern(entries, nrows, ncols):
        keys = sorted(entries, key=lambda rc: (rc[1], rc[0]))
        rows = [rc[0] for rc in keys]
        cols = [rc[1] for rc in keys]
        pat = SparseCSC.from_triplets(nrows, ncols, rows, cols, np.zeros(len(keys)))
        return pat, keys

    def build(self, R, r=None, theta_ref=None) -> FamilyMaps:
        P_pat, P_keys = self._pattern(self._P, self.n_tilde, self.n_tilde)
        A_pat, A_keys = self._pattern(self._A, self.m, self.n_tilde)
        entries = (
            [self._P[k] for k in P_keys]
            + self._q
            + [self._A[k] for k in A_keys]
            + self._l
            + self._u
        )
        sizes = (len(P_keys), self.n_tilde, len(A_keys), self.m, self.m)
        slot = np.repeat(np.arange(5), sizes)
        index = np.concatenate([np.arange(s) for s in sizes]).astype(np.int64)
        c = np.array([e[0] for e in entries])
        rows, cols, vals = [], [], []
        for t, (_, terms) in enumerate(entries):
            for k, v in terms:
                rows.append(t)
                cols.append(k)
                vals.append(v)
        C = SparseCSC.from_triplets(len(entries), self.d, rows, cols, vals)
        R = R if isinstance(R, SparseCSC) else SparseCSC.from_dense(R)
        r = np.zeros(R.nrows) if r is None else r
        return FamilyMaps(C, c, R, r, P_pat, A_pat, slot, index, theta_ref)


def selector(n: int, n_tilde: int, offset: int = 0) -> SparseCSC:
    """Retrieval matrix picking x_tilde[offset:offset+n]."""
    return SparseCSC.from_triplets(n, n_tilde, np.arange(n), np.arange(offset, offset + n), np.ones(n))

import itertools

import numpy as np
import pytest

from diffqp.csc import SparseCSC
from diffqp.kkt_diff import kkt_matrix
from diffqp.qp_solver import QPData


def random_qp(rng, n, m, density=0.6, pd=True, eq_frac=0.0):
    """Random QP with finite bounds around a random interior point.

    Rows carry at least two nonzeros (when n > 1) and there are fewer
    equality rows than variables, so active constraint rows are linearly
    independent with probability one.
    """
    G = rng.standard_normal((n, n))
    P = G @ G.T + (0.5 * np.eye(n) if pd else 0.0)
    A = rng.standard_normal((m, n)) * (rng.random((m, n)) < density)
    for i in range(m):
        need = min(2, n) - np.count_nonzero(A[i])
        if need > 0:
            cols = rng.choice(np.flatnonzero(A[i] == 0), need, replace=False)
            A[i, cols] = rng.standard_normal(need)
    x0 = rng.standard_normal(n)
    c = A @ x0
    l = c - rng.uniform(0.1, 1.0, m)
    u = c + rng.uniform(0.1, 1.0, m)
    eq = rng.random(m) < eq_frac
    eq[np.flatnonzero(eq)[max(n - 1, 0):]] = False
    l[eq] = u[eq] = c[eq]
    q = 3.0 * rng.standard_normal(n)
    return QPData(SparseCSC.from_dense(np.triu(P)), q, SparseCSC.from_dense(A), l, u)


def random_kkt(rng, n, m, density=0.5):
    """Random bordered matrix [[P, A'], [A, 0]] with P positive definite."""
    data = random_qp(rng, n, m, density)
    return kkt_matrix(data, 0.0), np.r_[np.ones(n), -np.ones(m)], data


def enumerate_qp(data: QPData):
    """Brute-force the KKT system over every lower/upper/inactive pattern (P positive definite)."""
    P = data.P_full().toarray()
    A = data.A.to_dense()
    n, m = data.n, data.m
    tol = 1e-9
    for pattern in itertools.product((0, 1, 2), repeat=m):
        pattern = np.array(pattern)
        rows = np.flatnonzero(pattern)
        b = np.where(pattern[rows] == 1, data.l[rows], data.u[rows])
        Ac = A[rows]
        if len(rows) > n or (len(rows) and np.linalg.matrix_rank(Ac) < len(rows)):
            continue
        K = np.block([[P, Ac.T], [Ac, np.zeros((len(rows), len(rows)))]])
        try:
            z = np.linalg.solve(K, np.r_[-data.q, b])
        except np.linalg.LinAlgError:
            continue
        x = z[:n]
        y = np.zeros(m)
        y[rows] = z[n:]
        Ax = A @ x
        if np.abs(P @ x + data.q + A.T @ y).max(initial=0.0) > 1e-8:
            continue
        if np.any(Ax < data.l - tol) or np.any(Ax > data.u + tol):
            continue
        lo = pattern == 1
        up = pattern == 2
        if np.any(y[lo] > tol) or np.any(y[up] < -tol):
            continue
        return x, y
    raise AssertionError("no KKT-consistent pattern found")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def perturb(data: QPData, v: dict, t: float) -> QPData:
    return QPData(
        data.P.with_values(data.P.values + t * v["P"]),
        data.q + t * v["q"],
        data.A.with_values(data.A.values + t * v["A"]),
        data.l + t * v["l"],
        data.u + t * v["u"],
        check_psd=False,
    )


def random_direction(rng, data: QPData) -> dict:
    """Direction in data space; equality rows move l and u together."""
    eq = data.l == data.u
    vl = np.where(np.isfinite(data.l), rng.standard_normal(data.m), 0.0)
    vu = np.where(np.isfinite(data.u), rng.standard_normal(data.m), 0.0)
    vu[eq] = vl[eq]
    return {
        "P": 0.1 * rng.standard_normal(data.P.nnz),
        "q": rng.standard_normal(data.n),
        "A": rng.standard_normal(data.A.nnz),
        "l": vl,
        "u": vu,
    }


def pair(grads, v: dict) -> float:
    """<gradient, direction>, counting each off-diagonal P slot for both symmetric entries."""
    P = grads.dP
    w = np.where(P.row_idx != P.col_indices(), 2.0, 1.0)
    return float(w * P.values @ v["P"] + grads.dq @ v["q"] + grads.dA.values @ v["A"]
                 + grads.dl @ v["l"] + grads.du @ v["u"])


def fd_gradient_check(rng, data: QPData, h: float = 1e-5):
    """Return (analytic, finite difference, crossed) for one random triple."""
    from diffqp.kkt_diff import DiffWorkspace, detect_active, qp_gradients
    from diffqp.qp_solver import qp_solve

    sol = qp_solve(data)
    active = detect_active(sol, data)
    ws = DiffWorkspace(data, active)
    dx = rng.standard_normal(data.n)
    v = random_direction(rng, data)
    an = pair(qp_gradients(dx, sol, data, ws), v)
    sp_, sm = qp_solve(perturb(data, v, h)), qp_solve(perturb(data, v, -h))
    crossed = not (detect_active(sp_, data) == active and detect_active(sm, data) == active)
    fd = float(dx @ (sp_.x - sm.x)) / (2 * h)
    return an, fd, crossed

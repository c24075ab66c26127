"""Approximate dynamic programming controller with a tunable value function.

The policy is

    u_t = argmin_{|u|_inf <= u_max} ||g + H u||^2 + u' R u,   g = L' A x_t,  H = L' B,

with L L' = P_lqr + Z. Canonical variables are x_tilde = (u, s) with the
equality rows s - H u = g. The design is the lower triangle of L (row-major).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import NoConvergence
from ..family import FamilyBuilder, FamilyLayer, FamilyMaps, selector
from ..qp_solver import INF, Settings
from ..tuner import DesignSpace, TuneConfig


@dataclass
class AdpConfig:
    n: int = 6
    m: int = 3
    T: int = 1000
    noise_std: float = 0.1
    a_lo: float = 0.99
    a_hi: float = 1.0
    b_scale: float = 0.01
    u_max: float = 1.0
    seed: int = 0

    def tune_config(self, p_hat: float, **kw) -> TuneConfig:
        opts = dict(p_hat=p_hat, eps_rel=0.005, eps_abs=0.005)
        opts.update(kw)
        return TuneConfig(**opts)


def gen_adp_system(cfg: AdpConfig) -> dict:
    """System matrices and a frozen noise trajectory."""
    rng = np.random.default_rng(cfg.seed)
    A = np.diag(rng.uniform(cfg.a_lo, cfg.a_hi, cfg.n))
    B = rng.uniform(-cfg.b_scale, cfg.b_scale, (cfg.n, cfg.m))
    noise = cfg.noise_std * rng.standard_normal((cfg.T, cfg.n))
    return {"A": A, "B": B, "Q": np.eye(cfg.n), "R": np.eye(cfg.m), "noise": noise, "x0": np.zeros(cfg.n)}


def dare_solve(A, B, Q, R, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Discrete-time algebraic Riccati equation by value iteration from P = Q."""
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=np.float64)) for M in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        P_new = A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            raise NoConvergence("Riccati iteration diverged")
        if np.abs(P_new - P).max() <= tol:
            return P_new
        P = P_new
    raise NoConvergence(f"Riccati iteration did not settle in {max_iter} steps")


def lqr_gain(A, B, R, P) -> np.ndarray:
    """K with u = -K x for the value matrix P."""
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def tril_to_vec(L) -> np.ndarray:
    return np.asarray(L)[np.tril_indices(np.asarray(L).shape[0])]


def vec_to_tril(v, n: int) -> np.ndarray:
    L = np.zeros((n, n))
    L[np.tril_indices(n)] = v
    return L


def adp_family(n: int, m: int, R, u_max: float = 1.0) -> FamilyMaps:
    """Policy family with parameters theta = (g[n], vec(H) row-major)."""
    R = np.asarray(R, dtype=np.float64)
    nt = m + n
    b = FamilyBuilder(nt, n + m, n + n * m)
    for i in range(m):
        for k in range(i, m):
            if R[i, k] != 0.0:
                b.P(i, k, const=2.0 * R[i, k])
    for i in range(n):
        b.P(m + i, m + i, const=2.0)
        b.A(i, m + i, 1.0)
        for k in range(m):
            b.A(i, k, terms=[(n + i * m + k, -1.0)])
        b.bounds(i, 0.0, 0.0, terms=[(i, 1.0)])
    hi = INF if np.isinf(u_max) else u_max
    for k in range(m):
        b.A(n + k, k, 1.0)
        b.bounds(n + k, -hi, hi)
    return b.build(selector(m, nt))


@dataclass
class Rollout:
    x: np.ndarray  # (T+1, n)
    u: np.ndarray  # (T, m)
    p: float


class AdpProblem:
    """Closed-loop cost (per-step average over T steps) and its gradient in vec(tril(L))."""

    def __init__(self, cfg: AdpConfig, system: dict | None = None, maps: FamilyMaps | None = None,
                 settings: Settings | None = None):
        self.cfg = cfg
        self.sys = gen_adp_system(cfg) if system is None else system
        A, B, Q, R = (self.sys[k] for k in "ABQR")
        self.P_lqr = dare_solve(A, B, Q, R)
        self.maps = maps or adp_family(cfg.n, cfg.m, R, cfg.u_max)
        self.layer = FamilyLayer(self.maps, settings)

    def omega0(self) -> np.ndarray:
        return tril_to_vec(np.linalg.cholesky(self.P_lqr))

    def design_space(self) -> DesignSpace:
        k = self.cfg.n * (self.cfg.n + 1) // 2
        return DesignSpace(np.full(k, -np.inf), np.full(k, np.inf))

    def Z(self, omega) -> np.ndarray:
        L = vec_to_tril(omega, self.cfg.n)
        return L @ L.T - self.P_lqr

    def _theta(self, L, x):
        A, B = self.sys["A"], self.sys["B"]
        return np.r_[L.T @ (A @ x), (L.T @ B).ravel()]

    def reference_maps(self) -> FamilyMaps:
        """The family with theta_ref at Z = 0 and a state where the input box binds."""
        L = vec_to_tril(self.omega0(), self.cfg.n)
        x = np.linspace(-3.0, 3.0, self.cfg.n)
        return replace(self.maps, theta_ref=self._theta(L, x))

    def policy(self, omega, x) -> np.ndarray:
        L = vec_to_tril(omega, self.cfg.n)
        u, _, _ = self.layer.forward(self._theta(L, x), check_psd=False)
        return u

    def simulate(self, omega, keep: bool = False):
        A, B, Q, R = (self.sys[k] for k in "ABQR")
        noise = self.sys["noise"]
        T = noise.shape[0]
        L = vec_to_tril(omega, self.cfg.n)
        xs = np.zeros((T + 1, self.cfg.n))
        us = np.zeros((T, self.cfg.m))
        xs[0] = self.sys["x0"]
        tape = []
        warm = (None, None)
        cost = 0.0
        for t in range(T):
            u, sol, qp = self.layer.forward(self._theta(L, xs[t]), *warm, check_psd=False)
            warm = (sol.x, sol.y)
            if keep:
                tape.append((sol, qp))
            us[t] = u
            cost += xs[t] @ Q @ xs[t] + u @ R @ u
            xs[t + 1] = A @ xs[t] + B @ u + noise[t]
        return Rollout(xs, us, cost / T), tape

    def __call__(self, omega) -> tuple[float, np.ndarray]:
        omega = np.asarray(omega, dtype=np.float64)
        A, B, Q, R = (self.sys[k] for k in "ABQR")
        n, m = self.cfg.n, self.cfg.m
        roll, tape = self.simulate(omega, keep=True)
        T = roll.u.shape[0]
        L = vec_to_tril(omega, n)
        Lbar = np.zeros((n, n))
        lam = np.zeros(n)  # adjoint of x_{t+1}
        for t in range(T - 1, -1, -1):
            x, u = roll.x[t], roll.u[t]
            ubar = (2.0 / T) * (R @ u) + B.T @ lam
            sol, qp = tape[t]
            dtheta = self.layer.backward(ubar, sol, qp)
            gbar, Hbar = dtheta[:n], dtheta[n:].reshape(n, m)
            Ax = A @ x
            Lbar += np.outer(Ax, gbar) + B @ Hbar.T
            lam = (2.0 / T) * (Q @ x) + A.T @ lam + A.T @ (L @ gbar)
        return roll.p, tril_to_vec(Lbar)

    def unconstrained_cost(self) -> float:
        """Closed-loop cost of the LQR controller on the same noise trajectory (the p_hat estimate)."""
        A, B, Q, R = (self.sys[k] for k in "ABQR")
        K = lqr_gain(A, B, R, self.P_lqr)
        noise = self.sys["noise"]
        x = self.sys["x0"].copy()
        cost = 0.0
        for w in noise:
            u = -K @ x
            cost += x @ Q @ x + u @ R @ u
            x = A @ x + B @ u + w
        return cost / len(noise)

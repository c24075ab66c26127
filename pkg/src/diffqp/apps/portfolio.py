"""Markowitz trading policy with holding and transaction costs, tuned by back-test.

Per period the policy solves (as a minimization)

    minimize   -mu'w + g_risk (w'Dw + |f|^2) + g_hold k_hold 1's + g_tc k_tc 1'tau
    subject to 1'w = 1,  dw - w = -w_pre,  f - F'w = 0,
               s >= -w,  s >= 0,  1's <= (L - 1)/2,  -tau <= dw <= tau

over x_tilde = (w, dw, f, s, tau). With 1'w = 1 the leverage bound
|w|_1 <= L is exactly 1's <= (L - 1)/2 when s is the short part w_-, which
holds at the optimum whenever the holding cost weight is positive.
Parameters are theta = (mu, w_pre, g_risk, g_hold, g_tc, L).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import Bankruptcy
from ..family import FamilyBuilder, FamilyLayer, FamilyMaps, selector
from ..qp_solver import Settings
from ..tuner import DesignSpace, TuneConfig

LN10 = math.log(10.0)


@dataclass
class PortfolioConfig:
    N: int = 25
    K: int = 5
    h_burnin: int = 260
    h_tune: int = 520
    h_test: int = 260
    h_ann: int = 260
    kappa_hold: float = 0.001
    kappa_tc: float = 0.001
    factor_vol: float = 0.01
    loading_scale: float = 0.3
    idio_vol_lo: float = 0.005
    idio_vol_hi: float = 0.015
    drift_mean: float = 2e-4
    drift_std: float = 2e-4
    seed: int = 0

    def __post_init__(self):
        if self.N <= 0 or min(self.h_burnin, self.h_tune, self.h_test, self.h_ann) <= 0:
            raise ValueError("sizes and horizons must be positive")

    def design_space(self) -> DesignSpace:
        return DesignSpace([1.0, -3.0, -3.0, -3.0], [2.0, 3.0, 3.0, 3.0])

    def omega0(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0, 0.0])

    def tune_config(self, **kw) -> TuneConfig:
        # Sharpe ratio is maximized, so the tuner sees -SR and the estimate flips sign
        opts = dict(p_hat=-1.0, eps_rel=0.03, eps_abs=0.03)
        opts.update(kw)
        return TuneConfig(**opts)


def fit_factor_model(Sigma, K: int, tol: float = 1e-12, max_iter: int = 10000):
    """Fit Sigma ~ F F' + diag(D) by iterated principal factors.

    The first pass is the truncated eigendecomposition of Sigma; later passes
    re-extract the top K eigenpairs of Sigma - diag(D).
    """
    Sigma = np.asarray(Sigma, dtype=np.float64)
    N = Sigma.shape[0]
    if K == 0:
        return np.zeros((N, 0)), np.diag(Sigma).copy()
    floor = 1e-12 * np.trace(Sigma) / N
    D = np.zeros(N)
    for _ in range(max_iter):
        vals, vecs = np.linalg.eigh(Sigma - np.diag(D))
        top = np.argsort(vals)[::-1][:K]
        F = vecs[:, top] * np.sqrt(np.maximum(vals[top], 0.0))
        D_new = np.maximum(np.diag(Sigma) - (F * F).sum(axis=1), floor)
        if np.abs(D_new - D).max() <= tol:
            return F, D_new
        D = D_new
    return F, D


def gen_market(cfg: PortfolioConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    N, K = cfg.N, cfg.K
    h = cfg.h_burnin + cfg.h_tune + cfg.h_test
    F_true = rng.normal(0.0, cfg.loading_scale / K**0.25, (N, K)) * cfg.factor_vol
    D_true = rng.uniform(cfg.idio_vol_lo, cfg.idio_vol_hi, N) ** 2
    drift = rng.normal(cfg.drift_mean, cfg.drift_std, N)
    factors = rng.standard_normal((h, K))
    idio = rng.standard_normal((h, N)) * np.sqrt(D_true)
    returns = drift + factors @ F_true.T + idio
    Sigma_hat = np.cov(returns[: cfg.h_burnin], rowvar=False)
    F, D = fit_factor_model(Sigma_hat, K)
    return {
        "returns": returns,
        "F": F,
        "D": D,
        "Sigma": Sigma_hat,
        "F_true": F_true,
        "D_true": D_true,
        "drift": drift,
    }


def portfolio_family(F, D, kappa_hold: float, kappa_tc: float) -> FamilyMaps:
    F = np.asarray(F, dtype=np.float64)
    N, K = F.shape
    iw, idw, i_f, i_s, itau = 0, N, 2 * N, 2 * N + K, 3 * N + K
    nt = 4 * N + K
    g_risk, g_hold, g_tc, lev = 2 * N, 2 * N + 1, 2 * N + 2, 2 * N + 3
    m = 5 * N + K + 2
    b = FamilyBuilder(nt, m, 2 * N + 4)
    for i in range(N):
        b.P(iw + i, iw + i, terms=[(g_risk, 2.0 * D[i])])
        b.q(iw + i, terms=[(i, -1.0)])
        b.q(i_s + i, terms=[(g_hold, kappa_hold)])
        b.q(itau + i, terms=[(g_tc, kappa_tc)])
    for k in range(K):
        b.P(i_f + k, i_f + k, terms=[(g_risk, 2.0)])
    r = 0
    for i in range(N):
        b.A(r, iw + i, 1.0)
    b.bounds(r, 1.0, 1.0)
    r += 1
    for i in range(N):
        b.A(r, idw + i, 1.0)
        b.A(r, iw + i, -1.0)
        b.bounds(r, 0.0, 0.0, terms=[(N + i, -1.0)])
        r += 1
    for k in range(K):
        b.A(r, i_f + k, 1.0)
        for i in range(N):
            if F[i, k] != 0.0:
                b.A(r, iw + i, -F[i, k])
        b.bounds(r, 0.0, 0.0)
        r += 1
    for i in range(N):
        b.A(r, i_s + i, 1.0)
        b.A(r, iw + i, 1.0)
        b.l(r, 0.0)
        r += 1
    for i in range(N):
        b.A(r, i_s + i, 1.0)
        b.l(r, 0.0)
        r += 1
    for i in range(N):
        b.A(r, i_s + i, 1.0)
    b.u(r, -0.5, terms=[(lev, 0.5)])
    r += 1
    for i in range(N):
        b.A(r, itau + i, 1.0)
        b.A(r, idw + i, -1.0)
        b.l(r, 0.0)
        r += 1
    for i in range(N):
        b.A(r, itau + i, 1.0)
        b.A(r, idw + i, 1.0)
        b.l(r, 0.0)
        r += 1
    return b.build(selector(N, nt))


def trailing_mean(returns, t: int, window: int) -> np.ndarray:
    """Mean of the ``window`` returns strictly before period t."""
    return returns[t - window : t].mean(axis=0)


def wealth_step(V, w, w_pre, r, kappa_hold, kappa_tc):
    """One period of the wealth recursion; returns (V_next, next pre-trade weights)."""
    cost = kappa_hold * np.maximum(-w, 0.0).sum() + kappa_tc * np.abs(w - w_pre).sum()
    V_next = V * (1.0 + r @ w) - cost
    return V_next, w * (1.0 + r) * V / V_next


def sharpe(R, h_ann: int) -> float:
    second = (R * R).mean()
    # a flat series has no excess return to reward
    if second == 0.0:
        return 0.0
    return math.sqrt(h_ann) * R.mean() / math.sqrt(second)


@dataclass
class Backtest:
    V: np.ndarray  # (h+1,)
    R: np.ndarray  # (h,)
    weights: np.ndarray  # (h, N) post-trade
    w_pre: np.ndarray  # (h, N) pre-trade
    sr: float


class PortfolioProblem:
    """Back-test Sharpe ratio over an interval and its gradient in omega = (L, nu_risk, nu_hold, nu_tc)."""

    def __init__(self, cfg: PortfolioConfig, market: dict | None = None, maps: FamilyMaps | None = None,
                 settings: Settings | None = None):
        self.cfg = cfg
        self.market = gen_market(cfg) if market is None else market
        self.maps = maps or portfolio_family(self.market["F"], self.market["D"], cfg.kappa_hold, cfg.kappa_tc)
        self.layer = FamilyLayer(self.maps, settings)

    def interval(self, name: str) -> range:
        c = self.cfg
        start = {"tune": c.h_burnin, "test": c.h_burnin + c.h_tune}[name]
        length = {"tune": c.h_tune, "test": c.h_test}[name]
        return range(start, start + length)

    def reference_maps(self) -> FamilyMaps:
        """The family with theta_ref at the first tune period, leverage 1.5 and unit aversions."""
        t = self.interval("tune")[0]
        mu = trailing_mean(self.market["returns"], t, self.cfg.h_burnin)
        theta = self._theta(np.array([1.5, 0.0, 0.0, 0.0]), mu, np.full(self.cfg.N, 1.0 / self.cfg.N))
        return replace(self.maps, theta_ref=theta)

    def _theta(self, omega, mu, w_pre):
        L, nr, nh, nt = omega
        return np.r_[mu, w_pre, 10.0**nr, 10.0**nh, 10.0**nt, L]

    def run(self, omega, interval: str = "tune", keep: bool = False):
        omega = np.asarray(omega, dtype=np.float64)
        cfg = self.cfg
        rets = self.market["returns"]
        periods = self.interval(interval)
        h, N = len(periods), cfg.N
        V = np.ones(h + 1)
        Ws = np.zeros((h, N))
        Wp = np.zeros((h, N))
        w_pre = np.full(N, 1.0 / N)
        tape = []
        warm = (None, None)
        for k, t in enumerate(periods):
            mu = trailing_mean(rets, t, cfg.h_burnin)
            w, sol, qp = self.layer.forward(self._theta(omega, mu, w_pre), *warm, check_psd=False)
            warm = (sol.x, sol.y)
            if keep:
                tape.append((sol, qp))
            Wp[k], Ws[k] = w_pre, w
            V[k + 1], w_pre = wealth_step(V[k], w, w_pre, rets[t], cfg.kappa_hold, cfg.kappa_tc)
            if V[k + 1] <= 0:
                raise Bankruptcy(f"portfolio value hit {V[k + 1]:.3g} at period {t}")
        R = V[1:] / V[:-1] - 1.0
        return Backtest(V, R, Ws, Wp, sharpe(R, cfg.h_ann)), tape

    def sharpe_and_grad(self, omega, interval: str = "tune") -> tuple[float, np.ndarray]:
        omega = np.asarray(omega, dtype=np.float64)
        cfg = self.cfg
        kh, ktc = cfg.kappa_hold, cfg.kappa_tc
        bt, tape = self.run(omega, interval, keep=True)
        rets = self.market["returns"]
        periods = self.interval(interval)
        h, N = len(periods), cfg.N
        V, R = bt.V, bt.R
        Rbar = R.mean()
        sig = math.sqrt((R * R).mean())
        dR = math.sqrt(cfg.h_ann) * (1.0 / (h * sig) - Rbar * R / (h * sig**3))

        Vbar = np.zeros(h + 1)
        wp_bar = np.zeros(N)  # adjoint of w_pre at period k+1
        theta_bar = np.zeros(self.maps.d)
        for k in range(h - 1, -1, -1):
            r = rets[periods[k]]
            w, wp = bt.weights[k], bt.w_pre[k]
            # R_k = V_{k+1}/V_k - 1
            Vbar[k + 1] += dR[k] / V[k]
            Vbar[k] -= dR[k] * V[k + 1] / V[k] ** 2
            # w_pre_{k+1} = w (1+r) V_k / V_{k+1}
            wbar = wp_bar * (1.0 + r) * V[k] / V[k + 1]
            s = float(wp_bar @ (w * (1.0 + r)))
            Vbar[k] += s / V[k + 1]
            Vbar[k + 1] -= s * V[k] / V[k + 1] ** 2
            # V_{k+1} = V_k (1 + r'w) - cost(w, w_pre)
            vb = Vbar[k + 1]
            sgn = np.sign(w - wp)
            Vbar[k] += vb * (1.0 + r @ w)
            wbar += vb * (V[k] * r + kh * (w < 0) - ktc * sgn)
            wp_bar = vb * ktc * sgn
            sol, qp = tape[k]
            dtheta = self.layer.backward(wbar, sol, qp)
            wp_bar = wp_bar + dtheta[N : 2 * N]
            theta_bar += dtheta
        g = theta_bar[2 * N :]
        grad = np.array([g[3], g[0] * LN10 * 10.0 ** omega[1], g[1] * LN10 * 10.0 ** omega[2],
                         g[2] * LN10 * 10.0 ** omega[3]])
        return bt.sr, grad

    def __call__(self, omega) -> tuple[float, np.ndarray]:
        """Tuner objective: negated Sharpe ratio on the tune interval."""
        sr, grad = self.sharpe_and_grad(omega, "tune")
        return -sr, -grad

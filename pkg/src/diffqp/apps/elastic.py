"""Elastic net with winsorized features, tuned by cross validation.

Per fold the training problem is

    minimize  ||X beta - y||^2 + lam ||beta||^2 + gam ||beta||_1

canonicalized over x_tilde = (beta, t, s) with residuals s = X beta - y as
equality rows and epigraph rows -t <= beta <= t. The parameter vector is
(vec(X) row-major, y, lam, gam), so every fold shares one family.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import NonpositiveLevel
from ..family import FamilyBuilder, FamilyLayer, FamilyMaps, selector
from ..qp_solver import Settings
from ..tuner import DesignSpace, TuneConfig

LN10 = math.log(10.0)


@dataclass
class ElasticConfig:
    m: int = 100
    n: int = 20
    J: int = 10
    noise_std: float = 0.1
    outliers_per_feature: int = 10
    outlier_lo: float = 2.0
    outlier_hi: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.m % self.J:
            raise ValueError("J must divide m")

    @property
    def n_train(self) -> int:
        return self.m - self.m // self.J

    def design_space(self) -> DesignSpace:
        return DesignSpace(np.r_[np.ones(self.n), -3.0, -3.0], np.r_[np.full(self.n, 3.0), 3.0, 3.0])

    def omega0(self) -> np.ndarray:
        return np.r_[np.full(self.n, 3.0), 0.0, 0.0]

    def tune_config(self, **kw) -> TuneConfig:
        opts = dict(p_hat=0.1, eps_rel=1e-3, eps_abs=1e-3)
        opts.update(kw)
        return TuneConfig(**opts)


def winsorize(z, w, with_derivative: bool = False):
    """Clip column j of ``z`` to [-w_j, w_j].

    With ``with_derivative`` also returns dx/dw_j per entry: sign(z) where
    the entry was clipped, else 0.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise NonpositiveLevel("winsorization levels must be positive")
    x = np.clip(z, -w, w)
    if not with_derivative:
        return x
    return x, np.where(np.abs(z) > w, np.sign(z), 0.0)


def gen_elastic_data(cfg: ElasticConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    z_bar = rng.standard_normal((cfg.m, cfg.n))
    beta_bar = rng.standard_normal(cfg.n)
    y = z_bar @ beta_bar + cfg.noise_std * rng.standard_normal(cfg.m)
    z = z_bar.copy()
    for j in range(cfg.n):
        rows = rng.choice(cfg.m, cfg.outliers_per_feature, replace=False)
        mag = rng.uniform(cfg.outlier_lo, cfg.outlier_hi, cfg.outliers_per_feature)
        # sign preserved; a zero entry (probability zero) would become positive
        z[rows, j] = np.where(z_bar[rows, j] < 0, -mag, mag)
    return {"z": z, "y": y, "z_bar": z_bar, "beta_bar": beta_bar}


def folds(m: int, J: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Contiguous (train, validation) index splits."""
    size = m // J
    idx = np.arange(m)
    return [(np.r_[idx[: j * size], idx[(j + 1) * size :]], idx[j * size : (j + 1) * size]) for j in range(J)]


def elastic_family(n_train: int, n: int) -> FamilyMaps:
    N = n_train
    nt = 2 * n + N
    m = N + 2 * n
    d = N * n + N + 2
    lam, gam = N * n + N, N * n + N + 1
    b = FamilyBuilder(nt, m, d)
    for j in range(n):
        b.P(j, j, terms=[(lam, 2.0)])
        b.q(n + j, terms=[(gam, 1.0)])
    for i in range(N):
        s = 2 * n + i
        b.P(s, s, const=2.0)
        b.A(i, s, const=1.0)
        for j in range(n):
            b.A(i, j, terms=[(i * n + j, -1.0)])
        b.bounds(i, 0.0, 0.0, terms=[(N * n + i, -1.0)])
    for j in range(n):
        # beta_j - t_j <= 0 and beta_j + t_j >= 0
        b.A(N + j, j, 1.0)
        b.A(N + j, n + j, -1.0)
        b.u(N + j, 0.0)
        b.A(N + n + j, j, 1.0)
        b.A(N + n + j, n + j, 1.0)
        b.l(N + n + j, 0.0)
    return b.build(selector(n, nt))


def elastic_theta(X, y, lam, gam) -> np.ndarray:
    return np.r_[np.asarray(X, dtype=np.float64).ravel(), y, lam, gam]


class ElasticProblem:
    """Cross-validated RMSE and its gradient in omega = (w, mu, nu)."""

    def __init__(self, cfg: ElasticConfig, data: dict | None = None, maps: FamilyMaps | None = None,
                 settings: Settings | None = None):
        self.cfg = cfg
        self.data = gen_elastic_data(cfg) if data is None else data
        self.maps = maps or elastic_family(cfg.n_train, cfg.n)
        self.splits = folds(cfg.m, cfg.J)
        self.layers = [FamilyLayer(self.maps, settings) for _ in self.splits]
        self._warm = [None] * len(self.splits)

    def reference_maps(self) -> FamilyMaps:
        """The family with theta_ref set to fold 0 at the initial design."""
        n = self.cfg.n
        omega = self.cfg.omega0()
        tr, _ = self.splits[0]
        X = winsorize(self.data["z"][tr], omega[:n])
        theta = elastic_theta(X, self.data["y"][tr], 10.0 ** omega[n], 10.0 ** omega[n + 1])
        return replace(self.maps, theta_ref=theta)

    def fold_solution(self, omega, j: int):
        """Training solution beta of fold j at design omega."""
        n = self.cfg.n
        w, lam, gam = omega[:n], 10.0 ** omega[n], 10.0 ** omega[n + 1]
        tr, _ = self.splits[j]
        X = winsorize(self.data["z"][tr], w)
        beta, _, _ = self.layers[j].forward(elastic_theta(X, self.data["y"][tr], lam, gam), check_psd=False)
        return beta

    def __call__(self, omega) -> tuple[float, np.ndarray]:
        omega = np.asarray(omega, dtype=np.float64)
        cfg = self.cfg
        n, N = cfg.n, cfg.n_train
        w, mu, nu = omega[:n], omega[n], omega[n + 1]
        lam, gam = 10.0**mu, 10.0**nu
        z, y = self.data["z"], self.data["y"]
        total = 0.0
        grad = np.zeros_like(omega)
        for j, (tr, va) in enumerate(self.splits):
            layer = self.layers[j]
            Xt, dXt = winsorize(z[tr], w, with_derivative=True)
            Xv, dXv = winsorize(z[va], w, with_derivative=True)
            warm = self._warm[j] or (None, None)
            beta, sol, qp = layer.forward(elastic_theta(Xt, y[tr], lam, gam), *warm, check_psd=False)
            self._warm[j] = (sol.x, sol.y)
            res = Xv @ beta - y[va]
            p = math.sqrt(float(res @ res) / len(va))
            total += p
            if p == 0.0:
                continue
            scale = 1.0 / (len(va) * p)
            # direct dependence through validation features
            grad[:n] += (np.outer(res, beta) * scale * dXv).sum(axis=0)
            dtheta = layer.backward(scale * (Xv.T @ res), sol, qp)
            dX = dtheta[: N * n].reshape(N, n)
            grad[:n] += (dX * dXt).sum(axis=0)
            grad[n] += dtheta[N * n + N] * LN10 * lam
            grad[n + 1] += dtheta[N * n + N + 1] * LN10 * gam
        J = len(self.splits)
        return total / J, grad / J

import numpy as np
import pytest

from diffqp.apps.adp import (
    AdpConfig,
    AdpProblem,
    adp_family,
    dare_solve,
    gen_adp_system,
    lqr_gain,
    tril_to_vec,
    vec_to_tril,
)
from diffqp.errors import NoConvergence


def are_residual(A, B, Q, R, P):
    BtPA = B.T @ P @ A
    return np.abs(A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q - P).max()


class TestDare:
    def test_zero_dynamics(self, rng):
        Q = np.diag(rng.uniform(1, 2, 3))
        P = dare_solve(np.zeros((3, 3)), rng.standard_normal((3, 2)), Q, np.eye(2))
        np.testing.assert_allclose(P, Q, atol=1e-14)

    def test_scalar_fixed_point(self):
        a, b, q, r = 0.5, 1.0, 1.0, 1.0
        p = q
        for _ in range(200):
            p = a * a * p - (a * b * p) ** 2 / (r + b * b * p) + q
        P = dare_solve(a, b, q, r)
        assert P[0, 0] == pytest.approx(p, abs=1e-10)

    def test_random_stable_residual(self, rng):
        A = np.diag(rng.uniform(-0.99, 0.99, 5))
        B = rng.standard_normal((5, 2))
        Q, R = np.eye(5), np.eye(2)
        assert are_residual(A, B, Q, R, dare_solve(A, B, Q, R)) <= 1e-8

    def test_experiment_system(self):
        sys_ = gen_adp_system(AdpConfig(seed=0, T=10))
        P = dare_solve(sys_["A"], sys_["B"], sys_["Q"], sys_["R"])
        assert are_residual(sys_["A"], sys_["B"], sys_["Q"], sys_["R"], P) <= 1e-8
        assert np.all(np.linalg.eigvalsh(P) > 0)

    def test_unstabilizable(self):
        with pytest.raises(NoConvergence):
            dare_solve(np.array([[2.0]]), np.array([[0.0]]), np.array([[1.0]]), np.array([[1.0]]), max_iter=500)


class TestFactor:
    def test_tril_round_trip(self, rng):
        L = np.tril(rng.standard_normal((4, 4)))
        np.testing.assert_array_equal(vec_to_tril(tril_to_vec(L), 4), L)


class TestPolicy:
    def test_unconstrained_policy_is_lqr(self):
        cfg = AdpConfig(seed=0, T=5, u_max=np.inf)
        prob = AdpProblem(cfg)
        sys_ = prob.sys
        K = lqr_gain(sys_["A"], sys_["B"], sys_["R"], prob.P_lqr)
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.standard_normal(cfg.n) * 10
            np.testing.assert_allclose(prob.policy(prob.omega0(), x), -K @ x, atol=1e-6)

    def test_input_box(self):
        prob = AdpProblem(AdpConfig(seed=0, T=5))
        u = prob.policy(prob.omega0(), np.full(6, 500.0))
        assert np.abs(u).max() <= 1.0 + 1e-9
        assert np.isclose(np.abs(u).max(), 1.0)

    def test_family_dims(self):
        maps = adp_family(6, 3, np.eye(3))
        assert maps.dims == {"d": 6 + 18, "d_tilde": maps.d_tilde, "n": 3, "n_tilde": 9, "m": 9}


class TestRollout:
    def test_zero_noise(self):
        cfg = AdpConfig(seed=0, T=20)
        sys_ = gen_adp_system(cfg)
        sys_["noise"] = np.zeros_like(sys_["noise"])
        prob = AdpProblem(cfg, system=sys_)
        roll, _ = prob.simulate(prob.omega0())
        assert roll.p == 0.0
        assert np.all(roll.x == 0.0) and np.all(roll.u == 0.0)

    def test_cost_matches_hand_recursion(self):
        cfg = AdpConfig(seed=2, T=30)
        prob = AdpProblem(cfg)
        roll, _ = prob.simulate(prob.omega0())
        s = prob.sys
        x = s["x0"].copy()
        cost = 0.0
        for t in range(cfg.T):
            u = roll.u[t]
            cost += x @ s["Q"] @ x + u @ s["R"] @ u
            x = s["A"] @ x + s["B"] @ u + s["noise"][t]
        assert roll.p == pytest.approx(cost / cfg.T, rel=1e-12)

    def test_gradient_finite_differences(self):
        cfg = AdpConfig(seed=4, T=50)
        prob = AdpProblem(cfg)
        omega = prob.omega0()
        p, g = prob(omega)
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(10):
            v = rng.standard_normal(omega.size)
            fd = (prob(omega + h * v)[0] - prob(omega - h * v)[0]) / (2 * h)
            assert g @ v == pytest.approx(fd, rel=1e-3)

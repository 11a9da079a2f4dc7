"""Hamiltonian, HJB residual and residual loss."""
import dataclasses
import math

import numpy as np
import pytest

from mfcglobal import autodiff as ad
from mfcglobal import bench
from mfcglobal import dynamics as dy
from mfcglobal import measure as ms
from mfcglobal import metrics as mt
from mfcglobal import network as nw
from mfcglobal import rng
from mfcglobal.dynamics import ProblemSpec
from mfcglobal.errors import DimensionError


def _null_spec(d=1):
    zero = lambda *args: 0.0 * args[1][..., 0] if len(args) == 4 else 0.0 * args[0][..., 0]
    return ProblemSpec(d=d, m=1, d_A=1, T=1.0,
                       drift=lambda t, x, a, e: 0.0 * x, diffusion=lambda t, x, a, e: 0.0,
                       running_cost=zero, terminal_cost=zero)


def _unit_noise_spec():
    return ProblemSpec(d=1, m=1, d_A=1, T=1.0,
                       drift=lambda t, x, a, e: 0.0 * x, diffusion=lambda t, x, a, e: 1.0,
                       running_cost=lambda t, x, a, e: 0.0 * x[..., 0],
                       terminal_cost=lambda x, e: 0.0 * x[..., 0])


def _zero_policy(t, x):
    return np.zeros_like(ad.value_of(x))


class TestHamiltonian:
    def test_null_coefficients(self):
        gen = np.random.default_rng(0)
        for _ in range(5):
            p, M = gen.normal(size=3), gen.normal(size=(3, 3))
            assert mt.hamiltonian(0.2, gen.normal(size=3), p, M, _null_spec(), _zero_policy, 3) == 0.0

    @pytest.mark.parametrize("p,M", [(0.7, 0.3), (-1.5, 2.0), (0.0, -0.4)])
    def test_example3_at_optimal_control(self, p, M):
        spec = bench.example3_spec()
        H = mt.hamiltonian(0.0, np.array([0.4]), np.array([p]), np.array([[M]]), spec, None, 1,
                           controls=np.array([[-p]]))
        # b = a, sigma = sqrt 2, f = a^2/2 at a = -p: -p^2 + M + p^2/2
        assert H == pytest.approx(M - p * p / 2, abs=1e-15)

    def test_two_players_identity_trace(self):
        H = mt.hamiltonian(0.0, np.zeros(2), np.zeros(2), np.eye(2), _unit_noise_spec(), _zero_policy, 2)
        assert H == pytest.approx(1.0, abs=1e-15)

    def test_off_diagonal_blocks_need_common_noise(self):
        M = np.array([[0.0, 1.0], [1.0, 0.0]])
        spec = _unit_noise_spec()
        assert mt.hamiltonian(0.0, np.zeros(2), np.zeros(2), M, spec, _zero_policy, 2) == 0.0
        assert mt.hamiltonian(0.0, np.zeros(2), np.zeros(2), M, spec, _zero_policy, 2,
                              common_noise=True) == pytest.approx(1.0)

    def test_generator_matches_simulated_step(self):
        # phi = x1 * x2 has gradient (x2, x1) and Hessian [[0, 1], [1, 0]]; one Euler
        # step of the simulator with independent noises gives E[d phi] / dt = 0
        spec = _unit_noise_spec()
        x = np.array([0.3, -0.8])
        M, dt = 400_000, 0.01
        z = rng.normals(5, np.arange(M), 0, 2, 1)
        nxt = dy.euler_step(0.0, np.broadcast_to(x[:, None], (M, 2, 1)), np.zeros((M, 2, 1)),
                            z * math.sqrt(dt), None, dt, spec)[..., 0]
        dphi = (nxt[:, 0] * nxt[:, 1] - x[0] * x[1]) / dt
        H = mt.hamiltonian(0.0, x, x[::-1], np.array([[0.0, 1.0], [1.0, 0.0]]), spec, _zero_policy, 2)
        assert abs(dphi.mean() - H) <= 4 * dphi.std() / math.sqrt(M)

    def test_regularising_noise_term(self):
        spec = dataclasses.replace(_null_spec(), epsilon=0.5)
        M = np.array([[2.0, 7.0], [7.0, -1.0]])
        H = mt.hamiltonian(0.0, np.zeros(2), np.zeros(2), M, spec, _zero_policy, 2)
        # eps^2 / 2 * (2 - 1)
        assert H == pytest.approx(0.125, abs=1e-15)

    def test_player_permutation_invariance(self):
        spec = bench.example2_spec()
        N, d = 3, 2
        gen = np.random.default_rng(4)
        x, p = gen.normal(size=N * d), gen.normal(size=N * d)
        A = gen.normal(size=(N * d, N * d))
        M = A + A.T
        a = gen.normal(size=(1, N))
        perm = np.array([2, 0, 1])
        idx = (perm[:, None] * d + np.arange(d)).ravel()
        h1 = mt.hamiltonian(0.1, x, p, M, spec, None, N, controls=a)
        h2 = mt.hamiltonian(0.1, x[idx], p[idx], M[np.ix_(idx, idx)], spec, None, N, controls=a[:, perm])
        assert h1 == pytest.approx(h2, rel=1e-13)

    def test_batched_matches_single(self):
        spec = bench.example3_spec()
        gen = np.random.default_rng(1)
        x, p, M = gen.normal(size=(4, 2)), gen.normal(size=(4, 2)), gen.normal(size=(4, 2, 2))
        pol = bench.Example3OptimalPolicy(2)
        batch = mt.hamiltonian(0.3, x, p, M, spec, pol, 2)
        single = [mt.hamiltonian(0.3, x[i], p[i], M[i], spec, pol, 2) for i in range(4)]
        np.testing.assert_allclose(batch, single, rtol=1e-14)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            mt.hamiltonian(0.0, np.zeros(3), np.zeros(2), np.eye(3), _null_spec(), _zero_policy, 3)


class TestDerivatives:
    def test_gradients_of_closed_form(self):
        v = bench.Example3ExactValue(3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        t = np.linspace(0.0, 0.9, 5)
        val, dt, dx = mt.value_gradients(v, t, x)
        tau = 2.0 - t
        np.testing.assert_allclose(dt, -1 / tau + np.mean(x * x, axis=1) / (2 * tau ** 2), rtol=1e-13)
        np.testing.assert_allclose(dx, x / (3 * tau[:, None]), rtol=1e-13)

    def test_hessian_of_closed_form(self):
        v = bench.Example3ExactValue(3)
        x = np.random.default_rng(0).normal(size=(2, 3))
        H = mt.value_hessian(v, 0.5, x)
        np.testing.assert_allclose(H, np.broadcast_to(np.eye(3) / (3 * 1.5), H.shape), atol=1e-9)

    def test_network_value(self):
        cfg = nw.MLPConfig(state_dim=2)
        net = nw.Network(cfg, nw.init_params(cfg, 0))
        x = np.random.default_rng(0).normal(size=(3, 2))
        val, _, dx = mt.value_gradients(net, 0.2, x)
        v2, _, dx2 = nw.forward_with_input_grads(net.params, cfg, np.full(3, 0.2), x)
        np.testing.assert_allclose(val, np.ravel(v2), rtol=1e-14)
        np.testing.assert_allclose(dx, dx2, rtol=1e-12)


class TestHJBLoss:
    def test_grid_contains_endpoints(self):
        g = mt.HJBGrid.random((-1.0, 1.0), 5, 2, 1.0, 0.1, 0)
        assert g.times[0] == 0.0 and g.times[-1] == 1.0 and g.probes.shape == (5, 2)
        with pytest.raises(ValueError):
            mt.HJBGrid(np.array([0.5, 1.0]), np.zeros((1, 1)))

    def test_lattice_limited(self):
        g = mt.HJBGrid.lattice((-1.0, 1.0), 0.5, 2, 1.0, 0.5)
        assert g.probes.shape == (25, 2)
        with pytest.raises(ValueError):
            mt.HJBGrid.lattice((-1.0, 1.0), 0.5, 4, 1.0, 0.5)

    def test_zero_everything(self):
        zero_v = lambda t, x: 0.0 * ad.sum(x, axis=-1)
        grid = mt.HJBGrid.random((-1.0, 1.0), 8, 2, 1.0, 0.25, 0)
        assert mt.hjb_loss(zero_v, _null_spec(), _zero_policy, grid, 2) == 0.0

    @pytest.mark.parametrize("N", [1, 5, 10])
    def test_example3_nullity(self, N):
        grid = mt.HJBGrid.random((-2.0, 2.0), 128, N, 1.0, 0.05, 1)
        loss = mt.hjb_loss(bench.Example3ExactValue(N), bench.example3_spec(), None, grid, N,
                           policy_from_gradient=lambda t, x, dx: -N * dx)
        assert loss <= 1e-6

    def test_wrong_candidate_is_penalised(self):
        N = 2
        grid = mt.HJBGrid.random((-2.0, 2.0), 32, N, 1.0, 0.1, 1)
        wrong = lambda t, x: 1.1 * bench.Example3ExactValue(N)(t, x)
        loss = mt.hjb_loss(wrong, bench.example3_spec(), None, grid, N,
                           policy_from_gradient=lambda t, x, dx: -N * dx)
        assert loss > 1e-3


class TestResidualLoss:
    def test_exact_plug_in(self):
        N = 2
        loss = mt.residual_loss(bench.example3_exact_value, bench.Example3ExactValue(N), 0.0,
                                P=10, L=4, box=(-2.0, 2.0), N=N, seed=0)
        assert loss <= 1e-8

    def test_constant_bias(self):
        N, c = 2, 0.3
        shifted = lambda t, x: bench.Example3ExactValue(N)(t, x) + c
        loss = mt.residual_loss(bench.example3_exact_value, shifted, 0.0, P=6, L=3, box=(-2.0, 2.0), N=N, seed=3)
        assert loss == pytest.approx(c * c, rel=1e-10)

    def test_non_negative_and_seeded(self):
        f = lambda t, x: ad.mean(x, axis=-1)
        a = mt.residual_loss(bench.example3_exact_value, f, 0.0, 5, 3, (-1.0, 1.0), 3, seed=2)
        b = mt.residual_loss(bench.example3_exact_value, f, 0.0, 5, 3, (-1.0, 1.0), 3, seed=2)
        assert a == b and a >= 0.0

    def test_report(self, tmp_path):
        N = 2
        rep = mt.metrics_report(bench.Example3ExactValue(N), bench.example3_spec(),
                                bench.Example3OptimalPolicy(N), N, v_exact=bench.example3_exact_value,
                                P=4, L=3, n_probes=16, dt=0.1)
        assert rep["residual_loss"] <= 1e-8
        assert rep["hjb_loss"] <= 1e-6
        path = mt.write_report(tmp_path / "r.json", rep)
        assert "hjb_loss" in path.read_text()

import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from subgoal_planner.core.checkpoint import Bundle
from subgoal_planner.core.config import DiffusionConfig, GuidanceConfig
from subgoal_planner.core.diffusion import (
    DiffusionModel,
    ManifoldIndex,
    cfg_epsilon,
    ddpm_loss,
    ebm_guidance_grad,
    ebm_loss,
    forward_diffuse,
    guided_step,
    make_schedule,
    manifold_project_step,
    reverse_moments,
    sample_subgoals,
    tweedie_denoise,
)
from subgoal_planner.core.linalg import RngStream
from subgoal_planner.core.neural import CallCounter, ConditionalMlp

W = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)


def zero_net(x, t=None, cond=None, null=None):
    return torch.zeros_like(torch.as_tensor(x, dtype=torch.float64))


def linear_energy(z, cond=None):
    return (torch.as_tensor(z) @ W)[..., None]


Z_STAR = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)


def quadratic_energy(z, cond=None):
    return 0.5 * ((torch.as_tensor(z) - Z_STAR) ** 2).sum(-1, keepdim=True)


class FixedNet:
    """Returns ``cond_value`` for conditional calls and ``null_value`` for null ones."""

    x_dim = 3

    def __init__(self, cond_value, null_value):
        self.cond_value = torch.as_tensor(cond_value, dtype=torch.float64)
        self.null_value = torch.as_tensor(null_value, dtype=torch.float64)

    def __call__(self, x, t=None, cond=None, null=None):
        flag = float(null) if null is not None else 0.0
        return self.null_value if flag == 1.0 else self.cond_value


class TwoModeNet:
    """Exact noise prediction for an equal mixture of N(+m, s^2 I) and N(-m, s^2 I)."""

    def __init__(self, sched, mode, spread):
        self.sched = sched
        self.centers = torch.stack([mode, -mode])
        self.spread = spread
        self.x_dim = len(mode)

    def __call__(self, x, t=None, cond=None, null=None):
        x = torch.as_tensor(x, dtype=torch.float64)
        ab = self.sched.ab(int(round(float(t) * self.sched.train_steps)))
        var = ab * self.spread**2 + 1.0 - ab
        diff = x[..., None, :] - math.sqrt(ab) * self.centers
        weights = torch.softmax(-(diff**2).sum(-1) / (2 * var), dim=-1)
        means = self.centers + math.sqrt(ab) * self.spread**2 / var * diff
        z0 = (weights[..., None] * means).sum(-2)
        return (x - math.sqrt(ab) * z0) / math.sqrt(1.0 - ab)


@pytest.fixture
def sched():
    return make_schedule(20)


@pytest.fixture
def model():
    return DiffusionModel.build(
        4,
        2,
        DiffusionConfig(steps=20, hidden=(8,), time_dim=4),
        GuidanceConfig(sample_steps=5, k_neighbors=3, w_ebm=0.5),
        RngStream(0),
        ebm_hidden=(8,),
    )


class TestSchedule:
    def test_linear_schedule(self, sched):
        assert sched.L == 20
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.posterior_var[0] == 0.0
        assert sched.ab(0) == 1.0

    def test_respace_keeps_endpoints_and_alpha_bar(self, sched):
        run = sched.respace(5)
        assert run.timesteps[0] == 1 and run.timesteps[-1] == 20
        assert_allclose(run.alpha_bar, sched.alpha_bar[run.timesteps - 1])
        assert_allclose(run.time_input(np.arange(1, run.L + 1)), run.timesteps / 20)
        assert sched.respace(50) is sched

    @pytest.mark.parametrize("L,lo,hi", [(0, 1e-4, 0.02), (10, 0.02, 0.01), (10, 0.0, 0.5)])
    def test_invalid(self, L, lo, hi):
        with pytest.raises(ValueError):
            make_schedule(L, lo, hi)

    def test_step_range(self, sched):
        with pytest.raises(ValueError, match="outside"):
            forward_diffuse(np.zeros(3), 21, np.zeros(3), sched)
        with pytest.raises(ValueError, match="shape"):
            forward_diffuse(np.zeros(3), 2, np.zeros(4), sched)

    @pytest.mark.parametrize("ell", [1, 5, 10, 20])
    def test_closed_form_matches_composed_steps(self, sched, ell):
        rng = RngStream(ell)
        x0 = np.array([1.0, -0.5, 2.0])
        n = 40_000
        x = np.broadcast_to(x0, (n, 3)).copy()
        for i in range(ell):
            x = math.sqrt(sched.alpha[i]) * x + math.sqrt(sched.beta[i]) * rng.normal(size=(n, 3))
        eps = rng.normal(size=(n, 3))
        closed = forward_diffuse(np.broadcast_to(x0, (n, 3)), ell, eps, sched).numpy()
        ab = sched.ab(ell)
        for sample in (x, closed):
            assert np.abs(sample.mean(axis=0) - math.sqrt(ab) * x0).max() < 0.02
            assert np.abs(sample.std(axis=0) - math.sqrt(1 - ab)).max() < 0.02


class TestDenoising:
    def test_reverse_mean_matches_posterior(self, sched):
        x0 = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        eps = torch.tensor([0.3, 0.1, -0.7], dtype=torch.float64)
        ell = 7
        xt = forward_diffuse(x0, ell, eps, sched)
        mu, var = reverse_moments(xt, eps, ell, sched)
        ab, ab_prev = sched.ab(ell), sched.ab(ell - 1)
        beta, alpha = float(sched.beta[ell - 1]), float(sched.alpha[ell - 1])
        expected = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (
            math.sqrt(alpha) * (1 - ab_prev) / (1 - ab)
        ) * xt
        assert torch.allclose(mu, expected)
        assert var == pytest.approx(beta * (1 - ab_prev) / (1 - ab))

    def test_tweedie_with_exact_noise(self, sched):
        x0 = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        eps = torch.tensor([0.3, 0.1, -0.7], dtype=torch.float64)
        xt = forward_diffuse(x0, 12, eps, sched)
        counter = CallCounter()
        est = tweedie_denoise(FixedNet(eps, eps * 0), xt, 12, torch.zeros(2), sched, counter)
        assert torch.allclose(est, x0)
        assert counter.calls == 1

    def test_ddpm_loss_backpropagates(self, model):
        loss = model.loss(np.ones((6, 4)), np.zeros((6, 2)), RngStream(3))
        loss.backward()
        assert torch.isfinite(loss)
        assert model.eps_net.params.values.grad is not None

    def test_ddpm_loss_mask(self, model):
        mask = np.zeros((6, 4))
        x, c = np.ones((6, 4)), np.zeros((6, 2))
        loss = ddpm_loss(model.eps_net, x, c, model.schedule, RngStream(3), mask=mask)
        assert float(loss) == 0.0


class TestGuidance:
    @pytest.mark.parametrize("w,calls", [(0.0, 1), (1.0, 1), (2.5, 2)])
    def test_cfg_call_count(self, sched, w, calls):
        counter = CallCounter()
        net = FixedNet([1.0, 0, 0], [0, 1.0, 0])
        cfg_epsilon(net, torch.zeros(3), 5, torch.zeros(2), w, sched, counter)
        assert counter.calls == calls

    @given(w=st.floats(0, 10, allow_nan=False))
    @settings(max_examples=40, deadline=None)
    def test_cfg_is_affine_in_w(self, w):
        sched = make_schedule(20)
        e_c = torch.tensor([1.0, 2.0, -1.0], dtype=torch.float64)
        e_n = torch.tensor([0.5, 0.0, 3.0], dtype=torch.float64)
        out = cfg_epsilon(FixedNet(e_c, e_n), torch.zeros(3), 5, torch.zeros(2), w, sched)
        assert torch.allclose(out, e_n + w * (e_c - e_n))

    def test_energy_loss_of_equal_pairs(self, model):
        z = np.ones((5, 4))
        loss = ebm_loss(model.ebm, z, z, np.zeros((5, 2)))
        assert float(loss) == pytest.approx(math.log(2.0))

    def test_energy_gradient(self):
        g = ebm_guidance_grad(linear_energy, torch.zeros(2, 3), torch.zeros(2))
        assert torch.allclose(g, W.expand(2, 3))

    @pytest.mark.parametrize("sign", ["descent", "ascent"])
    def test_mean_shift(self, sched, sign):
        cfg = GuidanceConfig(w_cfg=1.0, w_ebm=0.8, sign=sign, mode="mean_shift")
        plain = GuidanceConfig(w_cfg=1.0, w_ebm=0.0)
        x = torch.tensor([0.2, 0.1, -0.3], dtype=torch.float64)
        counter = CallCounter()
        a = guided_step(
            zero_net, linear_energy, x, 9, torch.zeros(2), cfg, sched, RngStream(4), counter
        )
        b = guided_step(zero_net, linear_energy, x, 9, torch.zeros(2), plain, sched, RngStream(4))
        s = 1.0 if sign == "descent" else -1.0
        assert torch.allclose(a - b, -s * 0.8 * float(sched.posterior_var[8]) * W)
        assert counter.calls == 2

    def test_epsilon_mode(self, sched):
        cfg = GuidanceConfig(w_cfg=1.0, w_ebm=0.8, mode="epsilon")
        plain = GuidanceConfig(w_cfg=1.0, w_ebm=0.0)
        x = torch.zeros(3, dtype=torch.float64)
        a = guided_step(zero_net, linear_energy, x, 9, torch.zeros(2), cfg, sched, RngStream(4))
        b = guided_step(zero_net, linear_energy, x, 9, torch.zeros(2), plain, sched, RngStream(4))
        beta, alpha = float(sched.beta[8]), float(sched.alpha[8])
        assert torch.allclose(a - b, -beta * 0.8 * W / math.sqrt(alpha))

    @pytest.mark.parametrize("mode", ["mean_shift", "epsilon"])
    @pytest.mark.parametrize("w_ebm", [0.1, 0.5])
    def test_guidance_moves_towards_energy_minimum(self, mode, w_ebm):
        sched = make_schedule(1000)
        x = torch.from_numpy(RngStream(0).normal(size=(100, 3)))
        c = torch.zeros(100, 2)
        cfg = GuidanceConfig(w_cfg=1.0, w_ebm=w_ebm, mode=mode)
        plain = GuidanceConfig(w_cfg=1.0, w_ebm=0.0)
        guided = guided_step(zero_net, quadratic_energy, x, 500, c, cfg, sched, RngStream(1))
        unguided = guided_step(zero_net, quadratic_energy, x, 500, c, plain, sched, RngStream(1))
        assert (guided - Z_STAR).norm(dim=-1).mean() < (unguided - Z_STAR).norm(dim=-1).mean()


class TestManifold:
    def line_index(self, n=6, noise_seed=0):
        t = np.linspace(1.0, 2.0, n)[:, None]
        return ManifoldIndex(np.hstack([t, 2 * t, -t]), noise_seed=noise_seed)

    def test_shared_noise_is_deterministic_and_cached(self, sched):
        index = self.line_index()
        assert_allclose(index.shared_noise(5), self.line_index().shared_noise(5))
        ids = np.array([0, 1, 2])
        first = index.diffused(ids, 5, sched)
        assert index.diffused(ids, 5, sched) is first

    def test_empty_index(self):
        with pytest.raises(ValueError):
            ManifoldIndex(np.zeros((0, 3)))

    def test_only_successes_indexed(self):
        index = ManifoldIndex.from_records(np.ones((4, 2, 3)), [True, False, True, False])
        assert len(index) == 2 and index.dim == 6

    def test_outside_window_is_identity(self, sched):
        cfg = GuidanceConfig(projection_window=(10, 12), k_neighbors=3)
        x = torch.tensor([5.0, 0.0, 1.0], dtype=torch.float64)
        out = manifold_project_step(self.line_index(), x, 3, torch.zeros(2), zero_net, cfg, sched)
        assert torch.equal(out, x)
        off = cfg.model_copy(update={"project": False})
        out = manifold_project_step(self.line_index(), x, 11, torch.zeros(2), zero_net, off, sched)
        assert torch.equal(out, x)

    def test_projection_lands_on_diffused_line(self, sched):
        cfg = GuidanceConfig(projection_window=(1, 20), k_neighbors=4)
        index = self.line_index()
        x = torch.tensor([[5.0, 0.0, 1.0], [1.0, 1.0, 1.0]], dtype=torch.float64)
        out = manifold_project_step(index, x, 8, torch.zeros(2, 2), zero_net, cfg, sched)
        again = manifold_project_step(index, out, 8, torch.zeros(2, 2), zero_net, cfg, sched)
        assert out.shape == x.shape
        assert torch.allclose(again, out, atol=1e-8)

    def test_degenerate_neighbours_warn(self, sched, caplog):
        index = ManifoldIndex(np.ones((3, 3)))
        cfg = GuidanceConfig(projection_window=(1, 20), k_neighbors=3)
        with caplog.at_level(logging.WARNING):
            out = manifold_project_step(
                index, torch.ones(3), 4, torch.zeros(2), zero_net, cfg, sched
            )
        assert "degenerate" in caplog.text
        neighbours = index.diffused(np.array([0, 1, 2]), 4, sched)
        assert torch.allclose(out, torch.from_numpy(neighbours[0]))


class TestSampling:
    def test_shapes_and_determinism(self, model):
        a = model.sample(torch.zeros(2), RngStream(1))
        b = model.sample(torch.zeros(2), RngStream(1))
        assert a.shape == (4,)
        assert torch.equal(a, b)
        batch = model.sample(torch.zeros(3, 2), RngStream(1))
        assert batch.shape == (3, 4)

    def test_subgoal_reshape(self, model):
        plain = GuidanceConfig(w_cfg=1.0, w_ebm=0.0, project=False, sample_steps=4)
        x = sample_subgoals(
            model.eps_net, None, None, torch.zeros(2), plain, model.schedule, RngStream(0), K=2
        )
        assert x.shape == (2, 2)

    def test_nfe_per_plan(self, model):
        counter = CallCounter()
        cfg = GuidanceConfig(w_cfg=2.0, w_ebm=0.0, project=False, sample_steps=5)
        model.sample(torch.zeros(2), RngStream(0), counter, guidance=cfg)
        assert counter.calls == 10

    def test_bundle_roundtrip(self, model):
        model.index = ManifoldIndex(np.random.default_rng(0).normal(size=(5, 4)), noise_seed=3)
        entries, meta = model.to_entries("hl")
        bundle = Bundle.from_bytes(Bundle(entries, {"hl": meta}).to_bytes())
        loaded = DiffusionModel.from_entries(bundle, "hl", meta)
        assert loaded.index.noise_seed == 3
        assert_allclose(loaded.index.sequences, model.index.sequences)
        expected = model.sample(torch.zeros(2), RngStream(5))
        assert torch.equal(loaded.sample(torch.zeros(2), RngStream(5)), expected)
        assert isinstance(loaded.ebm, ConditionalMlp)

    def test_energy_guidance_selects_the_successful_mode(self):
        sched = make_schedule(200)
        good = torch.tensor([1.5, 1.5], dtype=torch.float64)
        net = TwoModeNet(sched, good, spread=0.3)

        def energy(z, cond=None):
            return 0.5 * ((torch.as_tensor(z) - good) ** 2).sum(-1, keepdim=True)

        c = torch.zeros(200, 1)
        plain = GuidanceConfig(w_cfg=1.0, w_ebm=0.0, project=False, sample_steps=200)
        guided = plain.model_copy(update={"w_ebm": 3.0})
        unguided = sample_subgoals(net, energy, None, c, plain, sched, RngStream(6))
        steered = sample_subgoals(net, energy, None, c, guided, sched, RngStream(6))
        # the modes are +good and -good, so "nearer the good mode" is a positive projection
        assert 0.35 <= float((unguided @ good > 0).double().mean()) <= 0.65
        assert float((steered @ good > 0).double().mean()) >= 0.8

    def test_gated_sampler_is_plain_ancestral_sampling(self, model):
        model.index = ManifoldIndex(np.random.default_rng(1).normal(size=(6, 4)))
        gated = GuidanceConfig(w_cfg=1.0, w_ebm=0.0, projection_window=(500, 600), sample_steps=5)
        c = torch.tensor([0.3, -0.2], dtype=torch.float64)
        out = model.sample(c, RngStream(9), guidance=gated)

        rng = RngStream(9)
        run = model.schedule.respace(5)
        x = torch.from_numpy(rng.normal(size=(4,)))
        for ell in range(run.L, 0, -1):
            eps = cfg_epsilon(model.eps_net, x, ell, c, 1.0, run)
            mu, var = reverse_moments(x, eps, ell, run)
            x = mu + math.sqrt(var) * torch.from_numpy(rng.normal(size=(4,)))
        assert torch.equal(out, x)

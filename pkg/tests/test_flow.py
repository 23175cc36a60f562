import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from subgoal_planner.core.checkpoint import Bundle
from subgoal_planner.core.config import FlowConfig
from subgoal_planner.core.errors import IntegrationError
from subgoal_planner.core.flow import (
    FlowModel,
    anchor_segment,
    build_flow_pairs,
    flow_loss,
    generate_segment,
    integrate_ode,
    resample_window,
)
from subgoal_planner.core.linalg import RngStream
from subgoal_planner.core.neural import CallCounter
from subgoal_planner.core.world_model import LatentDataset, LatentRecord


def growth(x, u):
    return x


def record(T, d_z=2, success=True):
    z = np.stack([np.arange(T + 1, dtype=np.float64) + 10 * j for j in range(d_z)], axis=1)
    return LatentRecord(z=z, h=np.zeros((T + 1, 1)), actions=np.zeros((T, 2)), success=success)


def dataset(*records):
    return LatentDataset(records=list(records), d_z=2, d_h=1, wm_checksum="x")


class TestFlowLoss:
    def test_zero_for_exact_velocity(self):
        tau1 = torch.tensor([[1.0, 2.0], [-1.0, 0.5]], dtype=torch.float64)
        tau0 = torch.tensor([[0.3, -0.2], [0.0, 1.0]], dtype=torch.float64)
        u = torch.tensor([0.25, 0.6], dtype=torch.float64)

        def oracle(x, t=None, cond=None):
            return (tau1 - x) / (1.0 - t[:, None])

        loss = flow_loss(oracle, tau1, torch.zeros(2, 2), RngStream(0), tau0=tau0, u=u)
        assert float(loss) == pytest.approx(0.0, abs=1e-24)

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="non-empty"):
            flow_loss(None, np.zeros((0, 3)), np.zeros((0, 2)), RngStream(0))


class TestIntegrators:
    @pytest.mark.parametrize("integrator,nfe", [("euler", 20), ("rk4", 80)])
    def test_fixed_step_nfe(self, integrator, nfe):
        counter = CallCounter()
        cfg = FlowConfig(integrator=integrator, steps=20)
        _, stats = integrate_ode(growth, torch.ones(3), cfg, counter)
        assert stats.nfe == nfe
        assert counter.calls == nfe
        assert stats.accepted == 20

    @pytest.mark.parametrize("integrator", ["euler", "rk4", "dopri"])
    def test_constant_field_is_exact(self, integrator):
        c = torch.tensor([0.5, -2.0], dtype=torch.float64)
        cfg = FlowConfig(integrator=integrator, steps=3)
        x, _ = integrate_ode(lambda x, u: c.expand_as(x), torch.ones(2), cfg)
        assert torch.allclose(x, torch.ones(2) + c, atol=1e-12)

    def test_dopri_accuracy(self):
        cfg = FlowConfig(integrator="dopri", steps=10, rtol=1e-8, atol=1e-10)
        x, stats = integrate_ode(growth, torch.ones(1, dtype=torch.float64), cfg)
        assert float(x) == pytest.approx(math.e, abs=1e-6)
        assert stats.nfe == 1 + 6 * (stats.accepted + stats.rejected)

    def test_rk4_convergence_order(self):
        errors = []
        for steps in (4, 8):
            cfg = FlowConfig(integrator="rk4", steps=steps)
            x, _ = integrate_ode(growth, torch.ones(1, dtype=torch.float64), cfg)
            errors.append(abs(float(x) - math.e))
        assert math.log2(errors[0] / errors[1]) == pytest.approx(4.0, abs=0.3)

    def test_stiff_field_underflows(self):
        cfg = FlowConfig(integrator="dopri", steps=20)
        with pytest.raises(IntegrationError) as info:
            integrate_ode(lambda x, u: -1e8 * x, torch.ones(2, dtype=torch.float64), cfg)
        assert info.value.last_time == 0.0
        assert info.value.last_state is not None


class TestSegments:
    def test_anchor(self):
        seg = torch.zeros(3, 4, 2, dtype=torch.float64)
        out = anchor_segment(seg, torch.ones(2), torch.full((2,), 7.0))
        assert torch.all(out[:, 0] == 1.0)
        assert torch.all(out[:, -1] == 7.0)
        assert torch.all(out[:, 1:-1] == 0.0)
        assert torch.all(seg == 0.0)

    def test_generate_segment(self):
        cfg = FlowConfig(steps=2, hidden=(8,), time_dim=4)
        model = FlowModel.build(4 * 2, 4, cfg, RngStream(1))
        counter = CallCounter()
        z0, z1 = torch.tensor([0.1, 0.2]), torch.tensor([1.0, -1.0])
        seg = generate_segment(model.v_net, z0, z1, model.config, RngStream(2), 4, counter)
        assert seg.shape == (4, 2)
        assert torch.allclose(seg[0], z0.double()) and torch.allclose(seg[-1], z1.double())
        assert counter.calls == 8
        batch = generate_segment(
            model.v_net, z0.expand(3, 2), z1.expand(3, 2), model.config, RngStream(2), 4
        )
        assert batch.shape == (3, 4, 2)

    def test_context_shapes_must_match(self):
        model = FlowModel.build(4, 4, FlowConfig(steps=1, hidden=(4,), time_dim=4), RngStream(0))
        with pytest.raises(ValueError, match="context"):
            generate_segment(
                model.v_net, torch.zeros(2), torch.zeros(3), model.config, RngStream(0), 2
            )

    def test_resample_window_hits_endpoints(self):
        states = np.arange(5, dtype=np.float64)[:, None] * np.array([1.0, -1.0])
        out = resample_window(states, 4)
        assert_allclose(out[:, 0], [0.0, 4 / 3, 8 / 3, 4.0])
        assert_allclose(out[0], states[0])
        assert_allclose(out[-1], states[-1])

    def test_flow_pairs(self):
        H = 4
        latents = dataset(record(2 * H + 3), record(2), record(9, success=False))
        (tau1, ctx), skipped = build_flow_pairs(latents, H)
        assert skipped == 1
        assert tau1.shape == (2, H * 2)
        assert ctx.shape == (2, 4)
        segs = tau1.reshape(2, H, 2)
        assert_allclose(segs[0, 0], [0.0, 10.0])
        assert_allclose(segs[0, -1], [4.0, 14.0])
        assert_allclose(segs[1, 0], [4.0, 14.0])
        assert_allclose(ctx[1], [4.0, 14.0, 8.0, 18.0])

    def test_flow_pairs_need_h_two(self):
        with pytest.raises(ValueError):
            build_flow_pairs(dataset(record(5)), 1)


class TestFlowModel:
    def test_loss_backpropagates(self):
        model = FlowModel.build(4, 2, FlowConfig(steps=2, hidden=(8,), time_dim=4), RngStream(0))
        loss = model.loss(np.ones((5, 4)), np.zeros((5, 2)), RngStream(1))
        loss.backward()
        assert torch.isfinite(loss)
        assert model.v_net.params.values.grad is not None

    def test_bundle_roundtrip(self):
        cfg = FlowConfig(integrator="euler", steps=3, hidden=(8,), time_dim=4)
        model = FlowModel.build(4, 2, cfg, RngStream(0))
        entries, meta = model.to_entries("ll")
        assert set(entries) == {"ll.velocity.sgpm"}
        bundle = Bundle.from_bytes(Bundle(entries, {"ll": meta}).to_bytes())
        loaded = FlowModel.from_entries(bundle, "ll", meta)
        assert loaded.config == model.config
        c = torch.zeros(2)
        assert torch.equal(loaded.sample(c, RngStream(4)), model.sample(c, RngStream(4)))

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from subgoal_planner.core.checkpoint import Bundle
from subgoal_planner.core.errors import DataError, IncompatibleCheckpointError
from subgoal_planner.core.linalg import RngStream
from subgoal_planner.core.world_model import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    GaussianDiag,
    LossCurves,
    WorldModel,
    contrastive_loss,
    elbo_terms,
    export_latent_dataset,
    idm_loss,
    load_latent_dataset,
    load_world_model,
    rssm_rollout_posterior,
    save_latent_dataset,
    save_world_model,
    train_world_model,
)

from .conftest import tiny_config


@pytest.fixture
def fresh_wm():
    return WorldModel.build(tiny_config().world_model, RngStream(9))


class TestGaussian:
    def test_kl_unit_shift(self):
        p = GaussianDiag(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        q = GaussianDiag(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        assert float(p.kl(q)) == pytest.approx(0.5)

    def test_log_std_is_clamped(self):
        raw = torch.tensor([0.0, 0.0, -50.0, 50.0], dtype=torch.float64)
        g = GaussianDiag.from_raw(raw)
        assert g.log_std.tolist() == [LOG_STD_MIN, LOG_STD_MAX]

    @given(
        st.lists(st.floats(-3, 3), min_size=4, max_size=4),
        st.lists(st.floats(-2, 2), min_size=4, max_size=4),
    )
    @settings(max_examples=50, deadline=None)
    def test_kl_is_non_negative(self, means, log_stds):
        m = torch.tensor(means, dtype=torch.float64).reshape(2, 2)
        s = torch.tensor(log_stds, dtype=torch.float64).reshape(2, 2)
        p, q = GaussianDiag(m[0], s[0]), GaussianDiag(m[1], s[1])
        assert float(p.kl(q)) >= -1e-12
        assert float(p.kl(p)) == pytest.approx(0.0, abs=1e-12)


class TestRollout:
    def test_shapes(self, fresh_wm):
        obs = np.linspace([0.5, 0.5], [2.0, 0.5], 6)
        roll = rssm_rollout_posterior(fresh_wm, obs, rng=RngStream(0))
        assert roll.h.shape == (6, fresh_wm.d_h)
        assert roll.z.shape == (6, fresh_wm.d_z)

    def test_filter_matches_mean_rollout(self, fresh_wm):
        obs = np.linspace([0.5, 0.5], [2.0, 0.5], 5)
        roll = rssm_rollout_posterior(fresh_wm, obs)
        state = None
        for t, o in enumerate(obs):
            state = fresh_wm.filter_step(state, o)
            assert torch.allclose(state.z, roll.z[t])
        assert torch.allclose(fresh_wm.encode_goal(obs[0]), roll.z[0])

    def test_masked_steps_do_not_count(self, fresh_wm):
        obs = np.linspace([0.5, 0.5], [2.0, 0.5], 4)[None]
        roll = rssm_rollout_posterior(fresh_wm, obs, rng=RngStream(1))
        recon, kl = elbo_terms(fresh_wm, obs, roll, mask=np.zeros((1, 4)))
        assert float(recon) == 0.0
        assert float(kl) == 0.0

    def test_observation_width_checked(self, fresh_wm):
        with pytest.raises(ValueError, match="width"):
            fresh_wm.encode(np.zeros(3))

    def test_decode_position_in_world_units(self, fresh_wm):
        state = fresh_wm.filter_step(None, [1.0, 0.5])
        assert fresh_wm.decode_position(state.h, state.z).shape == (2,)


class TestLosses:
    def test_infonce_uniform_logits(self, fresh_wm):
        z = torch.full((1, fresh_wm.d_z), 0.3, dtype=torch.float64)
        negatives = z[:, None, :].repeat(1, 4, 1)
        loss = contrastive_loss(fresh_wm, z, z, negatives, temperature=0.1)
        assert float(loss) == pytest.approx(math.log(5))

    def test_infonce_needs_negatives(self, fresh_wm):
        z = torch.ones(2, fresh_wm.d_z, dtype=torch.float64)
        with pytest.raises(ValueError, match="negative"):
            contrastive_loss(fresh_wm, z, z, torch.zeros(2, 0, fresh_wm.d_z), 0.1)

    def test_idm_loss_mask(self, fresh_wm):
        z = torch.zeros(3, fresh_wm.d_z, dtype=torch.float64)
        pred = fresh_wm.idm_predict(z, z)
        actions = pred.detach().clone()
        actions[2] += 10.0
        masked = idm_loss(fresh_wm, z, z, actions, mask=torch.tensor([1.0, 1.0, 0.0]))
        assert float(masked) == pytest.approx(0.0, abs=1e-20)
        assert float(idm_loss(fresh_wm, z, z, actions)) > 1.0


class TestTraining:
    def test_curves(self, trained_wm):
        _, curves = trained_wm
        assert [r["epoch"] for r in curves.rows] == [1, 2]
        for name in ("recon", "kl", "idm", "total"):
            assert all(math.isfinite(v) for v in curves.column(name))
        assert len(curves.column("contrastive")) >= 1
        header = curves.to_csv().splitlines()[0].split(",")
        assert header[0] == "epoch"
        assert "total" in header

    def test_deterministic(self, demos, wm):
        run = tiny_config()
        again, _ = train_world_model(demos, run.world_model, run.training, RngStream(1))
        assert again.checksum() == wm.checksum()

    def test_contrastive_needs_failures(self, demos):
        run = tiny_config()
        with pytest.raises(DataError, match="failed"):
            train_world_model(
                [d for d in demos if d.success], run.world_model, run.training, RngStream(0)
            )

    def test_contrastive_off_trains_on_successes_only(self, demos):
        run = tiny_config(
            world_model={"loss": {"lambda_contrastive": 0.0}}, training={"wm_epochs": 1}
        )
        _, curves = train_world_model(
            [d for d in demos if d.success], run.world_model, run.training, RngStream(0)
        )
        assert curves.column("contrastive") == []

    def test_loss_curve_csv(self):
        curves = LossCurves()
        curves.append(1, {"a": 0.5, "b": 1.0})
        curves.append(2, {"a": 0.25})
        assert curves.to_csv() == "epoch,a,b\n1,0.5,1.0\n2,0.25,\n"


class TestPersistence:
    def test_world_model_roundtrip(self, wm, tmp_path):
        loaded = load_world_model(save_world_model(wm, tmp_path / "wm.zip"))
        assert loaded.checksum() == wm.checksum()
        assert_allclose(loaded.obs_shift, wm.obs_shift)

    def test_tampered_checksum(self, wm, tmp_path):
        path = save_world_model(wm, tmp_path / "wm.zip")
        bundle = Bundle.load(path)
        bundle.meta["wm_checksum"] = "0" * 64
        bundle.save(path)
        with pytest.raises(IncompatibleCheckpointError):
            load_world_model(path)

    def test_latent_export(self, wm, demos, latents):
        assert len(latents.records) == len(demos)
        for rec, demo in zip(latents.records, demos):
            assert rec.z.shape == (demo.T + 1, wm.d_z)
            assert rec.success == demo.success
        assert latents.wm_checksum == wm.checksum()
        again = export_latent_dataset(wm, demos[:1])
        assert_allclose(again.records[0].z, latents.records[0].z)

    def test_latent_file_roundtrip(self, latents, tmp_path):
        loaded = load_latent_dataset(save_latent_dataset(latents, tmp_path / "latents.jsonl"))
        assert loaded.wm_checksum == latents.wm_checksum
        assert_allclose(loaded.records[-1].z, latents.records[-1].z)
        assert [r.success for r in loaded.records] == [r.success for r in latents.records]

    def test_latent_file_wrong_format(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format": "maze-demos", "version": 1}\n')
        with pytest.raises(DataError):
            load_latent_dataset(path)

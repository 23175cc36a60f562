import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from subgoal_planner.core.checkpoint import Bundle, require_same_world_model
from subgoal_planner.core.errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ChecksumError,
    DivergenceError,
    IncompatibleCheckpointError,
)
from subgoal_planner.core.linalg import RngStream
from subgoal_planner.core.neural import (
    Adam,
    ConditionalMlp,
    MlpSpec,
    TimeEmbedding,
    init_params,
    load_params,
    mlp_forward,
    mlp_grad,
    params_from_bytes,
    params_to_bytes,
    save_params,
    time_embed,
    zero_params,
)


@pytest.fixture
def params():
    return init_params(MlpSpec((3, 8, 2), activation="tanh"), RngStream(0))


class TestMlp:
    def test_param_count(self):
        assert MlpSpec((3, 8, 2)).param_count == 3 * 8 + 8 + 8 * 2 + 2

    def test_too_few_layers(self):
        with pytest.raises(ValueError):
            MlpSpec((3,))

    def test_zero_params_output_zero(self):
        out = mlp_forward(zero_params(MlpSpec((3, 4, 2))), np.ones((5, 3)))
        assert out.shape == (5, 2)
        assert torch.all(out == 0)

    def test_init_is_seeded(self):
        spec = MlpSpec((3, 8, 2))
        a = init_params(spec, RngStream(4)).numpy()
        b = init_params(spec, RngStream(4)).numpy()
        assert_allclose(a, b)

    def test_width_mismatch(self, params):
        with pytest.raises(ValueError, match="width"):
            mlp_forward(params, np.ones(4))

    def test_gradient_matches_finite_differences(self, params):
        x = np.array([[0.3, -0.2, 0.5], [1.0, 0.1, -0.7]])
        cot = np.array([[1.0, -2.0], [0.5, 0.25]])
        grad_p, grad_x = mlp_grad(params, x, cot)

        def objective(values, inputs):
            p = params.copy()
            p.values.data = torch.as_tensor(values)
            return float((mlp_forward(p, inputs) * torch.as_tensor(cot)).sum())

        eps = 1e-6
        base = params.numpy()
        for i in (0, 5, len(base) - 1):
            bump = np.zeros_like(base)
            bump[i] = eps
            fd = (objective(base + bump, x) - objective(base - bump, x)) / (2 * eps)
            assert fd == pytest.approx(float(grad_p[i]), rel=1e-5, abs=1e-8)
        bump = np.zeros_like(x)
        bump[1, 2] = eps
        fd = (objective(base, x + bump) - objective(base, x - bump)) / (2 * eps)
        assert fd == pytest.approx(float(grad_x[1, 2]), rel=1e-5, abs=1e-8)


class TestTimeEmbedding:
    def test_shape_and_range(self):
        out = time_embed(torch.tensor([0.0, 0.5, 1.0]), TimeEmbedding(dim=8))
        assert out.shape == (3, 8)
        assert torch.all(out.abs() <= 1.0)

    def test_zero_time(self):
        out = time_embed(torch.tensor(0.0), TimeEmbedding(dim=4))
        assert_allclose(out.numpy(), [0.0, 1.0, 0.0, 1.0])

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            TimeEmbedding(dim=5)


class TestConditionalMlp:
    def test_null_token_masks_context(self):
        net = ConditionalMlp.build(2, 3, (8,), 2, RngStream(1), TimeEmbedding(4), null_token=True)
        x = torch.ones(2)
        a = net(x, t=0.3, cond=torch.tensor([1.0, 2.0, 3.0]), null=1.0)
        b = net(x, t=0.3, cond=torch.tensor([-5.0, 0.0, 9.0]), null=1.0)
        c = net(x, t=0.3, cond=torch.tensor([-5.0, 0.0, 9.0]), null=0.0)
        assert torch.allclose(a, b)
        assert not torch.allclose(b, c)

    def test_requires_time(self):
        net = ConditionalMlp.build(2, 0, (4,), 1, RngStream(1), TimeEmbedding(4))
        with pytest.raises(ValueError, match="time"):
            net(torch.ones(2))

    def test_meta_roundtrip(self):
        net = ConditionalMlp.build(2, 3, (8,), 2, RngStream(1), TimeEmbedding(4), kind="eps")
        again = ConditionalMlp.from_meta(net.params, net.meta())
        x, c = torch.ones(5, 2), torch.zeros(5, 3)
        assert torch.allclose(net(x, t=0.1, cond=c), again(x, t=0.1, cond=c))
        assert again.kind == "eps"


class TestAdam:
    def test_minimises_quadratic(self):
        p = zero_params(MlpSpec((1, 1)))
        opt = Adam([p], lr=0.05)
        target = torch.tensor([2.0, -1.0], dtype=torch.float64)
        for _ in range(400):
            opt.zero_grad()
            ((p.values - target) ** 2).sum().backward()
            opt.step()
        assert_allclose(p.numpy(), target.numpy(), atol=5e-2)
        assert opt.state[0].step == 400

    def test_explicit_gradients(self):
        p = zero_params(MlpSpec((1, 1)))
        opt = Adam([p], lr=0.1)
        opt.step([torch.tensor([1.0, -1.0])])
        assert_allclose(p.numpy(), [-0.1, 0.1], atol=1e-6)

    def test_non_finite_gradient(self):
        p = zero_params(MlpSpec((1, 1)))
        opt = Adam([p])
        with pytest.raises(DivergenceError) as info:
            opt.step([torch.tensor([float("nan"), 0.0])])
        assert info.value.diagnostics["param_set"] == 0


class TestParamCheckpoint:
    def test_bytes_roundtrip(self, params):
        again = params_from_bytes(params_to_bytes(params))
        assert again.spec == params.spec
        assert_allclose(again.numpy(), params.numpy())

    def test_file_roundtrip(self, params, tmp_path):
        path = save_params(params, tmp_path / "net.sgpm")
        assert load_params(path).checksum() == params.checksum()

    def test_flipped_byte(self, params):
        blob = bytearray(params_to_bytes(params))
        blob[-40] ^= 0xFF
        with pytest.raises(ChecksumError):
            params_from_bytes(bytes(blob))

    def test_truncated(self, params):
        with pytest.raises(CheckpointCorruptError):
            params_from_bytes(params_to_bytes(params)[:-5])

    def test_bad_magic(self):
        with pytest.raises(CheckpointCorruptError):
            params_from_bytes(b"NOPE" + bytes(40))

    def test_unknown_version(self, params):
        blob = bytearray(params_to_bytes(params))
        blob[4] = 9
        with pytest.raises(CheckpointVersionError):
            params_from_bytes(bytes(blob))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_params(tmp_path / "absent.sgpm")


class TestBundle:
    def test_roundtrip_is_byte_stable(self, tmp_path):
        bundle = Bundle({"a.bin": b"\x00\x01", "b.bin": b"xyz"}, {"wm_checksum": "abc"})
        assert bundle.to_bytes() == Bundle(dict(bundle.entries), dict(bundle.meta)).to_bytes()
        loaded = Bundle.load(bundle.save(tmp_path / "b.zip"))
        assert loaded.entries == bundle.entries
        assert loaded.wm_checksum == "abc"

    def test_garbage(self):
        with pytest.raises(CheckpointCorruptError):
            Bundle.from_bytes(b"not a zip")

    def test_world_model_check(self):
        assert require_same_world_model("x", "x", None) == "x"
        with pytest.raises(IncompatibleCheckpointError):
            require_same_world_model("x", "y")
        with pytest.raises(IncompatibleCheckpointError):
            require_same_world_model(None)

"""Small MLPs over a flat float64 parameter vector.

A network is an ``MlpSpec`` (layer widths + activation) and a ``ParamSet``
(one flat leaf tensor). Keeping parameters flat makes checkpoints, Adam state
and gradient checks one vector each; ``mlp_forward`` slices per-layer views
out of it so autograd flows back into the flat tensor.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional, Sequence

import numpy as np
import torch

from .checkpoint import atomic_write_bytes, sha256_hex
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ChecksumError,
    DivergenceError,
)
from .linalg import RngStream

DTYPE = torch.float64
MAGIC = b"SGPM"
FORMAT_VERSION = 1

Activation = Literal["tanh", "silu"]

_ACTIVATIONS = {
    "tanh": torch.tanh,
    "silu": torch.nn.functional.silu,
}


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: Activation = "silu"
    final_activation: Literal["identity"] = "identity"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be >= 1, got {self.layer_widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def param_count(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "final_activation": self.final_activation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpSpec":
        return cls(
            layer_widths=tuple(data["layer_widths"]),
            activation=data.get("activation", "silu"),
            final_activation=data.get("final_activation", "identity"),
        )


@dataclass
class ParamSet:
    spec: MlpSpec
    values: torch.Tensor
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if not isinstance(self.values, torch.Tensor):
            self.values = torch.as_tensor(np.asarray(self.values), dtype=DTYPE)
        self.values = self.values.detach().to(DTYPE).clone().requires_grad_(True)
        if self.values.ndim != 1 or self.values.numel() != self.spec.param_count:
            raise ValueError(
                f"parameter vector has {self.values.numel()} entries, "
                f"spec needs {self.spec.param_count}"
            )

    def numpy(self) -> np.ndarray:
        return self.values.detach().numpy().copy()

    def copy(self) -> "ParamSet":
        return ParamSet(spec=self.spec, values=self.values.detach().clone(), version=self.version)

    def checksum(self) -> str:
        return sha256_hex(params_to_bytes(self))


def init_params(spec: MlpSpec, rng: RngStream) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamSet(spec=spec, values=torch.from_numpy(np.concatenate(chunks)))


def zero_params(spec: MlpSpec) -> ParamSet:
    return ParamSet(spec=spec, values=torch.zeros(spec.param_count, dtype=DTYPE))


def _layers(spec: MlpSpec, values: torch.Tensor) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    offset = 0
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        weight = values[offset : offset + fan_in * fan_out].view(fan_out, fan_in)
        offset += fan_in * fan_out
        bias = values[offset : offset + fan_out]
        offset += fan_out
        yield weight, bias


def _forward(spec: MlpSpec, values: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    act = _ACTIVATIONS[spec.activation]
    layers = list(_layers(spec, values))
    h = x
    for i, (weight, bias) in enumerate(layers):
        h = h @ weight.T + bias
        if i < len(layers) - 1:
            h = act(h)
    return h


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def mlp_forward(params: ParamSet, x) -> torch.Tensor:
    """Evaluate the network on ``x`` of shape (..., input_dim)."""
    x = as_tensor(x)
    if x.shape[-1] != params.spec.input_dim:
        raise ValueError(f"input has width {x.shape[-1]}, network expects {params.spec.input_dim}")
    return _forward(params.spec, params.values, x)


def mlp_grad(params: ParamSet, x, cotangent) -> tuple[torch.Tensor, torch.Tensor]:
    """Reverse-mode gradients of <mlp(x), cotangent> w.r.t. parameters and input."""
    x = as_tensor(x).detach().clone().requires_grad_(True)
    cotangent = as_tensor(cotangent)
    values = params.values.detach().clone().requires_grad_(True)
    if x.shape[-1] != params.spec.input_dim:
        raise ValueError(f"input has width {x.shape[-1]}, network expects {params.spec.input_dim}")
    out = _forward(params.spec, values, x)
    if cotangent.shape != out.shape:
        raise ValueError(f"cotangent shape {tuple(cotangent.shape)} != output {tuple(out.shape)}")
    grad_params, grad_input = torch.autograd.grad((out * cotangent).sum(), (values, x))
    return grad_params, grad_input


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal features of a scalar time in [0, 1].

    Pair i (i = 0 .. dim/2 - 1) holds sin/cos of t * max_period**(1 - i/(dim/2)),
    a geometric ladder from ``max_period`` radians per unit time down to
    ``max_period**(2/dim)``.
    """

    dim: int = 16
    max_period: float = 100.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"time embedding dim must be even, got {self.dim}")


def time_embed(t, emb: TimeEmbedding) -> torch.Tensor:
    t = as_tensor(t)
    half = emb.dim // 2
    exponents = 1.0 - torch.arange(half, dtype=DTYPE) / half
    freqs = emb.max_period**exponents
    angles = t[..., None] * freqs
    out = torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1)
    return out.reshape(*t.shape, emb.dim)


@dataclass
class CallCounter:
    """Network function evaluations (NFE) made on behalf of one planner stage."""

    calls: int = 0

    def add(self, n: int = 1):
        self.calls += n


def count(counter: Optional[CallCounter], n: int = 1):
    if counter is not None:
        counter.add(n)


@dataclass
class AdamState:
    step: int
    m: torch.Tensor
    v: torch.Tensor
    lr: float
    beta1: float
    beta2: float
    eps: float


class Adam:
    """torch Adam over the flat vectors of one or more ParamSets.

    The optimizer owns the only writer of its ParamSets; gradients are either
    populated by ``loss.backward()`` or passed explicitly to ``step``.
    """

    def __init__(
        self,
        param_sets: Sequence[ParamSet],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.param_sets = list(param_sets)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self._opt = torch.optim.Adam(
            [p.values for p in self.param_sets], lr=lr, betas=betas, eps=eps
        )

    def zero_grad(self):
        self._opt.zero_grad(set_to_none=True)

    def step(self, grads: Optional[Sequence[torch.Tensor]] = None):
        if grads is not None:
            if len(grads) != len(self.param_sets):
                raise ValueError("one gradient vector per ParamSet expected")
            for p, g in zip(self.param_sets, grads):
                g = as_tensor(g)
                if g.shape != p.values.shape:
                    raise ValueError(
                        f"gradient has {g.numel()} entries, params have {p.values.numel()}"
                    )
                p.values.grad = g.detach().clone()
        for i, p in enumerate(self.param_sets):
            if p.values.grad is None:
                p.values.grad = torch.zeros_like(p.values)
            elif not torch.isfinite(p.values.grad).all():
                raise DivergenceError(
                    "non-finite gradient", {"param_set": i, "spec": p.spec.to_dict()}
                )
        self._opt.step()

    @property
    def state(self) -> list[AdamState]:
        states = []
        for p in self.param_sets:
            s = self._opt.state.get(p.values, {})
            step = s.get("step", 0)
            states.append(
                AdamState(
                    step=int(step.item() if isinstance(step, torch.Tensor) else step),
                    m=s.get("exp_avg", torch.zeros_like(p.values)).detach().clone(),
                    v=s.get("exp_avg_sq", torch.zeros_like(p.values)).detach().clone(),
                    lr=self.lr,
                    beta1=self.betas[0],
                    beta2=self.betas[1],
                    eps=self.eps,
                )
            )
        return states


def params_to_bytes(params: ParamSet) -> bytes:
    spec_blob = json.dumps(params.spec.to_dict(), sort_keys=True).encode("utf-8")
    values = params.values.detach().numpy().astype("<f8")
    body = b"".join(
        [
            struct.pack("<4sH", MAGIC, params.version),
            struct.pack("<I", len(spec_blob)),
            spec_blob,
            struct.pack("<Q", values.size),
            values.tobytes(),
        ]
    )
    return body + bytes.fromhex(sha256_hex(body))


def params_from_bytes(data: bytes) -> ParamSet:
    if len(data) < 6 or data[:4] != MAGIC:
        raise CheckpointCorruptError("not a parameter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format v{version}, expected v{FORMAT_VERSION}")
    try:
        (spec_len,) = struct.unpack_from("<I", data, 6)
        offset = 10 + spec_len
        spec_blob = data[10:offset]
        (count,) = struct.unpack_from("<Q", data, offset)
    except struct.error as e:
        raise CheckpointCorruptError(f"truncated checkpoint header: {e}") from e
    offset += 8
    expected = offset + 8 * count + 32
    if len(data) != expected:
        raise CheckpointCorruptError(f"checkpoint has {len(data)} bytes, expected {expected}")
    body, digest = data[:-32], data[-32:]
    if sha256_hex(body) != digest.hex():
        raise ChecksumError("checkpoint checksum mismatch")
    try:
        spec = MlpSpec.from_dict(json.loads(spec_blob))
    except (ValueError, KeyError) as e:
        raise CheckpointCorruptError(f"bad spec descriptor: {e}") from e
    values = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return ParamSet(spec=spec, values=torch.from_numpy(values.copy()), version=version)


def save_params(params: ParamSet, path: str | Path) -> Path:
    return atomic_write_bytes(path, params_to_bytes(params))


def load_params(path: str | Path) -> ParamSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Parameter file not found: {path}")
    return params_from_bytes(path.read_bytes())


@dataclass
class ConditionalMlp:
    """MLP over ``[x, time features, context, null flag]``.

    Used for the noise predictor, velocity field and energy model. With
    ``null_token`` the context can be masked out for classifier-free guidance:
    masked rows see a zero context and a null flag of 1.
    """

    params: ParamSet
    x_dim: int
    cond_dim: int
    time_embedding: Optional[TimeEmbedding] = None
    null_token: bool = False
    kind: str = field(default="mlp")

    @classmethod
    def build(
        cls,
        x_dim: int,
        cond_dim: int,
        hidden: Sequence[int],
        out_dim: int,
        rng: RngStream,
        time_embedding: Optional[TimeEmbedding] = None,
        null_token: bool = False,
        activation: Activation = "silu",
        kind: str = "mlp",
    ) -> "ConditionalMlp":
        in_dim = x_dim + cond_dim + (time_embedding.dim if time_embedding else 0) + int(null_token)
        spec = MlpSpec(layer_widths=(in_dim, *hidden, out_dim), activation=activation)
        return cls(
            params=init_params(spec, rng),
            x_dim=x_dim,
            cond_dim=cond_dim,
            time_embedding=time_embedding,
            null_token=null_token,
            kind=kind,
        )

    def __call__(self, x, t=None, cond=None, null=None) -> torch.Tensor:
        x = as_tensor(x)
        batch = x.shape[:-1]
        parts = [x]
        if self.time_embedding is not None:
            if t is None:
                raise ValueError(f"{self.kind} network needs a time input")
            parts.append(time_embed(torch.broadcast_to(as_tensor(t), batch), self.time_embedding))
        if self.cond_dim:
            c = torch.broadcast_to(as_tensor(cond), (*batch, self.cond_dim))
            if self.null_token:
                flag = torch.zeros(batch, dtype=DTYPE) if null is None else torch.broadcast_to(
                    as_tensor(null), batch
                )
                c = c * (1.0 - flag[..., None])
                parts.extend([c, flag[..., None]])
            else:
                parts.append(c)
        return mlp_forward(self.params, torch.cat(parts, dim=-1))

    def meta(self) -> dict:
        return {
            "x_dim": self.x_dim,
            "cond_dim": self.cond_dim,
            "null_token": self.null_token,
            "kind": self.kind,
            "time_embedding": (
                None
                if self.time_embedding is None
                else {"dim": self.time_embedding.dim, "max_period": self.time_embedding.max_period}
            ),
        }

    @classmethod
    def from_meta(cls, params: ParamSet, meta: dict) -> "ConditionalMlp":
        emb = meta.get("time_embedding")
        return cls(
            params=params,
            x_dim=meta["x_dim"],
            cond_dim=meta["cond_dim"],
            time_embedding=TimeEmbedding(**emb) if emb else None,
            null_token=meta.get("null_token", False),
            kind=meta.get("kind", "mlp"),
        )

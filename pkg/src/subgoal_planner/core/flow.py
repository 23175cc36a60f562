"""Conditional rectified flow over dense latent segments.

A segment is H consecutive latent states flattened to one H * d_z vector.
Sampling integrates the learned velocity field from u = 0 (standard normal
noise) to u = 1 with a fixed-step or adaptive Runge-Kutta solver.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import numpy.typing as npt
import torch

from .checkpoint import Bundle
from .config import FlowConfig
from .errors import DivergenceError, IntegrationError
from .linalg import RngStream
from .neural import (
    CallCounter,
    ConditionalMlp,
    TimeEmbedding,
    as_tensor,
    count,
    params_from_bytes,
    params_to_bytes,
)

logger = logging.getLogger(__name__)

Field = Callable[[torch.Tensor, float], torch.Tensor]

H_MIN = 1e-4
H_MAX = 0.25
SAFETY = 0.9
PI_ALPHA = 0.14
PI_BETA = 0.08
FACTOR_MIN = 0.2
FACTOR_MAX = 5.0

# Dormand-Prince 5(4): nodes, stage matrix (last row = 5th-order weights), b5 - b4
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


@dataclass
class OdeStats:
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0


def flow_loss(
    v_net,
    tau1,
    c,
    rng: RngStream,
    mask=None,
    tau0=None,
    u=None,
) -> torch.Tensor:
    """Flow-matching regression of v(x_u, u, c) onto tau1 - tau0.

    ``tau0`` and ``u`` default to standard-normal noise and uniform times.
    """
    tau1 = as_tensor(tau1)
    if tau1.ndim != 2 or tau1.shape[0] == 0:
        raise ValueError("flow_loss needs a non-empty (B, D) batch")
    B = tau1.shape[0]
    tau0 = torch.from_numpy(rng.normal(size=tuple(tau1.shape))) if tau0 is None else as_tensor(tau0)
    u = torch.from_numpy(rng.uniform(size=B)) if u is None else as_tensor(u)
    x = (1.0 - u[:, None]) * tau0 + u[:, None] * tau1
    err = (v_net(x, t=u, cond=as_tensor(c)) - (tau1 - tau0)) ** 2
    if mask is not None:
        err = err * as_tensor(mask)
    return err.sum(-1).mean()


def _euler(v: Field, x: torch.Tensor, steps: int, stats: OdeStats) -> torch.Tensor:
    h = 1.0 / steps
    for i in range(steps):
        x = x + h * v(x, i * h)
        stats.nfe += 1
        stats.accepted += 1
    return x


def _rk4(v: Field, x: torch.Tensor, steps: int, stats: OdeStats) -> torch.Tensor:
    h = 1.0 / steps
    for i in range(steps):
        u = i * h
        k1 = v(x, u)
        k2 = v(x + 0.5 * h * k1, u + 0.5 * h)
        k3 = v(x + 0.5 * h * k2, u + 0.5 * h)
        k4 = v(x + h * k3, u + h)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        stats.nfe += 4
        stats.accepted += 1
    return x


def _error_norm(
    err: torch.Tensor, x: torch.Tensor, x_new: torch.Tensor, rtol: float, atol: float
) -> float:
    scale = atol + rtol * torch.maximum(x.abs(), x_new.abs())
    return float(torch.sqrt(torch.mean((err / scale) ** 2)))


def _dopri(v: Field, x: torch.Tensor, config: FlowConfig, stats: OdeStats) -> torch.Tensor:
    u = 0.0
    h = min(max(1.0 / config.steps, H_MIN), H_MAX)
    k_first = v(x, u)
    stats.nfe += 1
    prev_err = 1.0
    while u < 1.0:
        h = min(h, 1.0 - u)
        ks = [k_first]
        for stage in range(1, 7):
            xs = x + h * sum(a * k for a, k in zip(_DP_A[stage], ks) if a)
            ks.append(v(xs, u + _DP_C[stage] * h))
        stats.nfe += 6
        # row 6 of A equals the weights, so the last stage is f at the new point
        x_new = xs
        delta = h * sum(e * k for e, k in zip(_DP_E, ks) if e)
        err = _error_norm(delta, x, x_new, config.rtol, config.atol)
        if not math.isfinite(err):
            raise IntegrationError("non-finite error estimate", last_state=x, last_time=u)
        if err <= 1.0:
            stats.accepted += 1
            u = 1.0 if 1.0 - (u + h) < 1e-12 else u + h
            x, k_first = x_new, ks[6]
            if err == 0.0:
                factor = FACTOR_MAX
            else:
                factor = SAFETY * err ** (-PI_ALPHA) * prev_err**PI_BETA
            prev_err = max(err, 1e-4)
            h = min(H_MAX, max(H_MIN, h * min(FACTOR_MAX, max(FACTOR_MIN, factor))))
        else:
            stats.rejected += 1
            logger.debug("dopri step rejected at u=%.6f h=%.3g err=%.3g", u, h, err)
            if h <= H_MIN:
                raise IntegrationError(
                    f"step size underflow at u={u:.6f} (h={h:.3g}, err={err:.3g})",
                    last_state=x,
                    last_time=u,
                )
            factor = max(FACTOR_MIN, SAFETY * err ** (-0.2))
            h = max(H_MIN, h * factor)
    return x


def integrate_ode(
    v: Field,
    x0,
    config: FlowConfig,
    counter: Optional[CallCounter] = None,
) -> tuple[torch.Tensor, OdeStats]:
    """Integrate dx/du = v(x, u) over u in [0, 1]."""
    stats = OdeStats()
    x = as_tensor(x0)
    if config.integrator == "euler":
        x = _euler(v, x, config.steps, stats)
    elif config.integrator == "rk4":
        x = _rk4(v, x, config.steps, stats)
    elif config.integrator == "dopri":
        x = _dopri(v, x, config, stats)
    else:
        raise ValueError(f"unknown integrator '{config.integrator}'")
    count(counter, stats.nfe)
    return x, stats


def anchor_segment(seg: torch.Tensor, z_prev, z_next) -> torch.Tensor:
    """Overwrite the first and last latent slot of (..., H, d_z) segments."""
    seg = seg.clone()
    seg[..., 0, :] = as_tensor(z_prev)
    seg[..., -1, :] = as_tensor(z_next)
    return seg


def generate_segment(
    v_net,
    z_prev,
    z_next,
    config: FlowConfig,
    rng: RngStream,
    H: int,
    counter: Optional[CallCounter] = None,
) -> torch.Tensor:
    """Sample an (..., H, d_z) segment from z_prev to z_next with anchored endpoints."""
    z_prev, z_next = as_tensor(z_prev), as_tensor(z_next)
    if z_prev.shape != z_next.shape:
        raise ValueError(f"context shapes differ: {tuple(z_prev.shape)} vs {tuple(z_next.shape)}")
    d_z = z_prev.shape[-1]
    cond = torch.cat([z_prev, z_next], dim=-1)
    tau0 = torch.from_numpy(rng.normal(size=(*z_prev.shape[:-1], H * d_z)))
    with torch.no_grad():
        tau1, _ = integrate_ode(lambda x, u: v_net(x, t=u, cond=cond), tau0, config, counter)
    if not torch.isfinite(tau1).all():
        raise DivergenceError("non-finite segment from the flow integrator", {"H": H})
    return anchor_segment(tau1.reshape(*z_prev.shape[:-1], H, d_z), z_prev, z_next)


def resample_window(states: npt.NDArray[np.float64], H: int) -> npt.NDArray[np.float64]:
    """H slots linearly interpolated from H + 1 states at s_i = i * H / (H - 1)."""
    if len(states) != H + 1:
        raise ValueError(f"need {H + 1} states, got {len(states)}")
    s = np.arange(H) * H / (H - 1)
    lo = np.minimum(np.floor(s).astype(np.int64), H - 1)
    frac = (s - lo)[:, None]
    return (1.0 - frac) * states[lo] + frac * states[lo + 1]


def build_flow_pairs(latents, H: int) -> tuple[tuple[npt.NDArray, npt.NDArray], int]:
    """Flattened segments and (z_prev, z_next) contexts from successful records.

    Returns ``((tau1 (N, H * d_z), context (N, 2 * d_z)), skipped)``.
    """
    if H < 2:
        raise ValueError(f"H must be >= 2, got {H}")
    segs, ctxs = [], []
    skipped = 0
    for rec in latents.successes():
        if rec.T < H:
            skipped += 1
            continue
        for k in range(1, rec.T // H + 1):
            window = rec.z[(k - 1) * H : k * H + 1]
            segs.append(resample_window(window, H).reshape(-1))
            ctxs.append(np.concatenate([window[0], window[-1]]))
    if skipped:
        logger.info("flow pairs: skipped %d demonstrations shorter than H=%d", skipped, H)
    d_z = latents.d_z
    tau1 = np.array(segs).reshape(len(segs), H * d_z)
    ctx = np.array(ctxs).reshape(len(ctxs), 2 * d_z)
    return (tau1, ctx), skipped


@dataclass
class FlowModel:
    """Conditional rectified-flow generator; conditioning is never dropped."""

    v_net: ConditionalMlp
    config: FlowConfig

    kind = "flow"

    @classmethod
    def build(cls, x_dim: int, cond_dim: int, config: FlowConfig, rng: RngStream) -> "FlowModel":
        v_net = ConditionalMlp.build(
            x_dim,
            cond_dim,
            config.hidden,
            x_dim,
            rng,
            time_embedding=TimeEmbedding(dim=config.time_dim),
            kind="velocity",
        )
        return cls(v_net=v_net, config=config)

    @property
    def dim(self) -> int:
        return self.v_net.x_dim

    def trainable(self) -> list[ConditionalMlp]:
        return [self.v_net]

    def loss(self, x1, c, rng: RngStream, mask=None) -> torch.Tensor:
        return flow_loss(self.v_net, x1, c, rng, mask)

    def sample(
        self,
        c,
        rng: RngStream,
        counter: Optional[CallCounter] = None,
        config: Optional[FlowConfig] = None,
    ) -> torch.Tensor:
        cond = as_tensor(c)
        x0 = torch.from_numpy(rng.normal(size=(*cond.shape[:-1], self.dim)))
        with torch.no_grad():
            x1, stats = integrate_ode(
                lambda x, u: self.v_net(x, t=u, cond=cond), x0, config or self.config, counter
            )
        if not torch.isfinite(x1).all():
            raise DivergenceError("non-finite flow sample", {"nfe": stats.nfe})
        return x1

    def to_entries(self, prefix: str) -> tuple[dict[str, bytes], dict]:
        entries = {f"{prefix}.velocity.sgpm": params_to_bytes(self.v_net.params)}
        meta = {
            "kind": self.kind,
            "velocity": self.v_net.meta(),
            "config": self.config.model_dump(mode="json"),
        }
        return entries, meta

    @classmethod
    def from_entries(cls, bundle: Bundle, prefix: str, meta: dict) -> "FlowModel":
        v_net = ConditionalMlp.from_meta(
            params_from_bytes(bundle.entries[f"{prefix}.velocity.sgpm"]), meta["velocity"]
        )
        return cls(v_net=v_net, config=FlowConfig.model_validate(meta["config"]))


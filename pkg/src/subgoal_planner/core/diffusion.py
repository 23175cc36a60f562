"""DDPM over flattened latent subgoal sequences with guidance and projection.

Networks are callables ``net(x, t=..., cond=..., null=...)`` (a
``ConditionalMlp`` in practice) where ``t`` is the original training step
divided by the training step count. Step indices ``ell`` are 1-based
positions in the schedule that is passed in, which may be a respaced one.
"""

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import numpy.typing as npt
import torch

from .checkpoint import Bundle
from .config import DiffusionConfig, GuidanceConfig
from .errors import DivergenceError
from .linalg import PcaBasis, RngStream, knn, local_basis
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

Net = Callable[..., torch.Tensor]

MIN_ALPHA_BAR = 1e-8


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: npt.NDArray[np.float64]
    timesteps: npt.NDArray[np.int64]  # original training step of each entry
    train_steps: int
    alpha: npt.NDArray[np.float64] = field(init=False)
    alpha_bar: npt.NDArray[np.float64] = field(init=False)
    posterior_var: npt.NDArray[np.float64] = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) == 0:
            raise ValueError("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "timesteps", np.asarray(self.timesteps, dtype=np.int64))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "posterior_var", beta * (1.0 - prev) / (1.0 - alpha_bar))

    @property
    def L(self) -> int:
        return len(self.beta)

    def check(self, ell: int):
        if not 1 <= ell <= self.L:
            raise ValueError(f"diffusion step {ell} outside 1..{self.L}")

    def ab(self, ell: int) -> float:
        return 1.0 if ell == 0 else float(self.alpha_bar[ell - 1])

    def time_input(self, ell) -> npt.NDArray[np.float64]:
        return self.timesteps[np.asarray(ell) - 1] / self.train_steps

    def respace(self, n: int) -> "NoiseSchedule":
        """``n`` evenly strided steps (always 1 and L) with recomputed betas."""
        if n >= self.L:
            return self
        if n < 1:
            raise ValueError("respaced schedule needs at least one step")
        picks = np.unique(np.round(np.linspace(1, self.L, n)).astype(np.int64))
        ab = self.alpha_bar[picks - 1]
        prev = np.concatenate([[1.0], ab[:-1]])
        return NoiseSchedule(
            beta=1.0 - ab / prev, timesteps=self.timesteps[picks - 1], train_steps=self.train_steps
        )


def make_schedule(L: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``L`` steps."""
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(
        beta=np.linspace(beta_start, beta_end, L), timesteps=np.arange(1, L + 1), train_steps=L
    )


def schedule_from_config(cfg: DiffusionConfig) -> NoiseSchedule:
    return make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)


@dataclass
class PlanContext:
    z0: torch.Tensor
    zG: torch.Tensor
    null_flag: bool = False

    def vector(self) -> torch.Tensor:
        return torch.cat([as_tensor(self.z0), as_tensor(self.zG)], dim=-1)


def _cond(c) -> torch.Tensor:
    return c.vector() if isinstance(c, PlanContext) else as_tensor(c)


def forward_diffuse(x0, ell: int, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form sample of q(x_ell | x_0)."""
    sched.check(ell)
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(x0.shape)}")
    ab = sched.ab(ell)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddpm_loss(
    eps_net: Net,
    x0,
    c,
    sched: NoiseSchedule,
    rng: RngStream,
    p_uncond: float = 0.1,
    mask=None,
) -> torch.Tensor:
    """Noise-prediction error with random steps and context drop-out."""
    x0 = as_tensor(x0)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("ddpm_loss needs a non-empty (B, D) batch")
    B = x0.shape[0]
    ells = rng.integers(1, sched.L + 1, size=B)
    eps = torch.from_numpy(rng.normal(size=tuple(x0.shape)))
    null = torch.from_numpy((rng.uniform(size=B) < p_uncond).astype(np.float64))
    ab = torch.from_numpy(sched.alpha_bar[ells - 1])[:, None]
    x = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    pred = eps_net(x, t=torch.from_numpy(sched.time_input(ells)), cond=_cond(c), null=null)
    err = (eps - pred) ** 2
    if mask is not None:
        err = err * as_tensor(mask)
    return err.sum(-1).mean()


def cfg_epsilon(
    eps_net: Net,
    x,
    ell: int,
    c,
    w_cfg: float,
    sched: NoiseSchedule,
    counter: Optional[CallCounter] = None,
) -> torch.Tensor:
    """eps_null + w_cfg * (eps_cond - eps_null); w in {0, 1} is one exact call."""
    x = as_tensor(x)
    t = float(sched.time_input(ell))
    cond = _cond(c)
    if w_cfg == 1.0:
        count(counter)
        return eps_net(x, t=t, cond=cond, null=0.0)
    if w_cfg == 0.0:
        count(counter)
        return eps_net(x, t=t, cond=cond, null=1.0)
    count(counter, 2)
    e_c = eps_net(x, t=t, cond=cond, null=0.0)
    e_n = eps_net(x, t=t, cond=cond, null=1.0)
    return e_n + w_cfg * (e_c - e_n)


def reverse_moments(x, eps_hat, ell: int, sched: NoiseSchedule) -> tuple[torch.Tensor, float]:
    """Posterior mean of the reverse step and its scalar variance."""
    sched.check(ell)
    x, eps_hat = as_tensor(x), as_tensor(eps_hat)
    alpha = float(sched.alpha[ell - 1])
    beta = float(sched.beta[ell - 1])
    mu = (x - beta / math.sqrt(1.0 - sched.ab(ell)) * eps_hat) / math.sqrt(alpha)
    return mu, float(sched.posterior_var[ell - 1])


def ebm_energy(ebm: Net, z, c) -> torch.Tensor:
    return ebm(as_tensor(z), cond=_cond(c)).squeeze(-1)


def ebm_loss(ebm: Net, pos, neg, c) -> torch.Tensor:
    """Mean softplus of E(pos) - E(neg) over matched pairs."""
    pos, neg = as_tensor(pos), as_tensor(neg)
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ValueError("energy loss needs non-empty positive and negative pools")
    margin = ebm_energy(ebm, pos, c) - ebm_energy(ebm, neg, c)
    return torch.logaddexp(torch.zeros_like(margin), margin).mean()


def ebm_guidance_grad(ebm: Net, z, c) -> torch.Tensor:
    """Input gradient of the summed energy."""
    with torch.enable_grad():
        z = as_tensor(z).detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(ebm_energy(ebm, z, c).sum(), z)
    return g.detach()


def guided_step(
    eps_net: Net,
    ebm: Optional[Net],
    x,
    ell: int,
    c,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    rng: RngStream,
    counter: Optional[CallCounter] = None,
) -> torch.Tensor:
    """One ancestral step with classifier-free and energy guidance."""
    x = as_tensor(x)
    eps_hat = cfg_epsilon(eps_net, x, ell, c, cfg.w_cfg, sched, counter)
    use_ebm = ebm is not None and cfg.w_ebm > 0
    sign = 1.0 if cfg.sign == "descent" else -1.0
    if use_ebm and cfg.mode == "epsilon":
        count(counter)
        g = ebm_guidance_grad(ebm, x, c)
        eps_hat = eps_hat + sign * cfg.w_ebm * math.sqrt(1.0 - sched.ab(ell)) * g
    mu, var = reverse_moments(x, eps_hat, ell, sched)
    if use_ebm and cfg.mode == "mean_shift":
        count(counter)
        mu = mu - sign * cfg.w_ebm * var * ebm_guidance_grad(ebm, x, c)
    noise = torch.from_numpy(rng.normal(size=tuple(x.shape)))
    return mu + math.sqrt(var) * noise


def tweedie_denoise(
    eps_net: Net, x, ell: int, c, sched: NoiseSchedule, counter: Optional[CallCounter] = None
) -> torch.Tensor:
    """Clean-sample estimate from a noisy iterate and the conditional noise prediction."""
    sched.check(ell)
    ab = sched.ab(ell)
    if ab < MIN_ALPHA_BAR:
        raise ValueError(f"alpha_bar={ab:.3g} at step {ell} is too small for a denoised estimate")
    x = as_tensor(x)
    count(counter)
    eps = eps_net(x, t=float(sched.time_input(ell)), cond=_cond(c), null=0.0)
    return (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


@dataclass
class ManifoldIndex:
    """Clean successful sequences plus cached forward-diffused neighbour sets.

    Each training step owns one shared noise vector (drawn from
    ``noise_seed``), so a neighbour set diffused to a given step is
    deterministic and can be cached.
    """

    sequences: npt.NDArray[np.float64]  # (n, D)
    noise_seed: int = 0
    noise_scale: float = 1.0
    cache_size: int = 4096
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        sequences = np.asarray(self.sequences, dtype=np.float64)
        self.sequences = sequences.reshape(len(sequences), -1)
        if len(self.sequences) == 0:
            raise ValueError("manifold index needs at least one successful sequence")

    @classmethod
    def from_records(cls, sequences, success: Sequence[bool], **kwargs) -> "ManifoldIndex":
        seqs = np.asarray(sequences, dtype=np.float64)
        keep = np.asarray(success, dtype=bool)
        return cls(sequences=seqs[keep].reshape(int(keep.sum()), -1), **kwargs)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def dim(self) -> int:
        return self.sequences.shape[1]

    def shared_noise(self, train_step: int) -> npt.NDArray[np.float64]:
        stream = RngStream(self.noise_seed).child(int(train_step))
        return self.noise_scale * stream.normal(size=self.dim)

    def diffused(
        self, ids: npt.NDArray[np.int64], ell: int, sched: NoiseSchedule
    ) -> npt.NDArray[np.float64]:
        key = (tuple(int(i) for i in ids), int(sched.timesteps[ell - 1]))
        if key not in self._cache:
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            ab = sched.ab(ell)
            eps = self.shared_noise(key[1])
            self._cache[key] = math.sqrt(ab) * self.sequences[ids] + math.sqrt(1.0 - ab) * eps
        return self._cache[key]

    def clean_basis(self, query, k: int, variance_retention: float) -> PcaBasis:
        ids = knn(np.asarray(query, dtype=np.float64), self.sequences, min(k, len(self)))
        return local_basis(self.sequences[ids], variance_retention)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.save(buf, self.sequences.astype("<f8"), allow_pickle=False)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, **kwargs) -> "ManifoldIndex":
        return cls(sequences=np.load(io.BytesIO(data), allow_pickle=False), **kwargs)


def project_onto(x: torch.Tensor, basis: PcaBasis) -> torch.Tensor:
    """Affine projection in torch so gradients flow through ``x``."""
    mean = torch.from_numpy(basis.mean)
    if basis.rank == 0:
        return mean.expand_as(x).clone()
    u = torch.from_numpy(basis.basis)
    return mean + ((x - mean) @ u) @ u.T


def manifold_project_step(
    index: Optional[ManifoldIndex],
    x_temp,
    ell: int,
    c,
    eps_net: Net,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    counter: Optional[CallCounter] = None,
) -> torch.Tensor:
    """Project ``x_temp`` (now at step ``ell``) onto the local diffused manifold."""
    x_temp = as_tensor(x_temp)
    if index is None or not cfg.project or ell < 1:
        return x_temp
    lo, hi = cfg.window(sched.train_steps)
    if not lo <= int(sched.timesteps[ell - 1]) <= hi:
        return x_temp
    single = x_temp.ndim == 1
    x = x_temp[None] if single else x_temp
    cond = _cond(c)
    cond = cond.expand(x.shape[0], -1) if cond.ndim == 1 else cond
    with torch.no_grad():
        z0_hat = tweedie_denoise(eps_net, x, ell, cond, sched, counter).numpy()
    rows = []
    for i in range(x.shape[0]):
        ids = knn(z0_hat[i], index.sequences, min(cfg.k_neighbors, len(index)))
        basis = local_basis(index.diffused(ids, ell, sched), cfg.variance_retention)
        if basis.rank == 0:
            logger.warning("degenerate projection at step %d: neighbours have zero variance", ell)
        rows.append(project_onto(x[i], basis))
    out = torch.stack(rows)
    return out[0] if single else out


def sample_subgoals(
    eps_net: Net,
    ebm: Optional[Net],
    index: Optional[ManifoldIndex],
    c,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
    rng: RngStream,
    counter: Optional[CallCounter] = None,
    dim: Optional[int] = None,
    K: Optional[int] = None,
) -> torch.Tensor:
    """Guided, projected ancestral sampling over ``cfg.sample_steps`` respaced steps.

    ``c`` is one context (returns (D,)) or a batch (returns (B, D)); with ``K``
    the result is reshaped to (..., K, D // K).
    """
    dim = dim or eps_net.x_dim
    cond = _cond(c)
    shape = (dim,) if cond.ndim == 1 else (cond.shape[0], dim)
    run = sched.respace(cfg.sample_steps)
    x = torch.from_numpy(rng.normal(size=shape))
    for ell in range(run.L, 0, -1):
        x = guided_step(eps_net, ebm, x, ell, cond, cfg, run, rng, counter)
        x = manifold_project_step(index, x, ell - 1, cond, eps_net, cfg, run, counter)
        if not torch.isfinite(x).all():
            raise DivergenceError(f"non-finite subgoal iterate at step {ell}", {"step": ell})
    if K is not None:
        x = x.reshape(*shape[:-1], K, dim // K)
    return x


@dataclass
class DiffusionModel:
    """Conditional DDPM generator with optional energy model and manifold index."""

    eps_net: ConditionalMlp
    schedule: NoiseSchedule
    guidance: GuidanceConfig
    config: DiffusionConfig
    ebm: Optional[ConditionalMlp] = None
    index: Optional[ManifoldIndex] = None

    kind = "diffusion"

    @classmethod
    def build(
        cls,
        x_dim: int,
        cond_dim: int,
        config: DiffusionConfig,
        guidance: GuidanceConfig,
        rng: RngStream,
        ebm_hidden: Optional[Sequence[int]] = None,
    ) -> "DiffusionModel":
        eps_net = ConditionalMlp.build(
            x_dim,
            cond_dim,
            config.hidden,
            x_dim,
            rng.child(0),
            time_embedding=TimeEmbedding(dim=config.time_dim),
            null_token=True,
            kind="eps",
        )
        ebm = None
        if ebm_hidden is not None:
            ebm = ConditionalMlp.build(x_dim, cond_dim, ebm_hidden, 1, rng.child(1), kind="ebm")
        return cls(
            eps_net=eps_net,
            schedule=schedule_from_config(config),
            guidance=guidance,
            config=config,
            ebm=ebm,
        )

    @property
    def dim(self) -> int:
        return self.eps_net.x_dim

    def trainable(self) -> list[ConditionalMlp]:
        return [self.eps_net]

    def loss(self, x0, c, rng: RngStream, mask=None) -> torch.Tensor:
        return ddpm_loss(self.eps_net, x0, c, self.schedule, rng, self.config.p_uncond, mask)

    def sample(
        self,
        c,
        rng: RngStream,
        counter: Optional[CallCounter] = None,
        guidance: Optional[GuidanceConfig] = None,
    ) -> torch.Tensor:
        return sample_subgoals(
            self.eps_net,
            self.ebm,
            self.index,
            c,
            guidance or self.guidance,
            self.schedule,
            rng,
            counter,
        )

    def to_entries(self, prefix: str) -> tuple[dict[str, bytes], dict]:
        entries = {f"{prefix}.eps.sgpm": params_to_bytes(self.eps_net.params)}
        meta = {
            "kind": self.kind,
            "eps": self.eps_net.meta(),
            "config": self.config.model_dump(mode="json"),
            "guidance": self.guidance.model_dump(mode="json"),
        }
        if self.ebm is not None:
            entries[f"{prefix}.ebm.sgpm"] = params_to_bytes(self.ebm.params)
            meta["ebm"] = self.ebm.meta()
        if self.index is not None:
            entries[f"{prefix}.index.npy"] = self.index.to_bytes()
            meta["index"] = {
                "noise_seed": self.index.noise_seed,
                "noise_scale": self.index.noise_scale,
            }
        return entries, meta

    @classmethod
    def from_entries(cls, bundle: Bundle, prefix: str, meta: dict) -> "DiffusionModel":
        config = DiffusionConfig.model_validate(meta["config"])
        eps_net = ConditionalMlp.from_meta(
            params_from_bytes(bundle.entries[f"{prefix}.eps.sgpm"]), meta["eps"]
        )
        ebm = None
        if "ebm" in meta:
            ebm = ConditionalMlp.from_meta(
                params_from_bytes(bundle.entries[f"{prefix}.ebm.sgpm"]), meta["ebm"]
            )
        index = None
        if "index" in meta:
            index = ManifoldIndex.from_bytes(bundle.entries[f"{prefix}.index.npy"], **meta["index"])
        return cls(
            eps_net=eps_net,
            schedule=schedule_from_config(config),
            guidance=GuidanceConfig.model_validate(meta["guidance"]),
            config=config,
            ebm=ebm,
            index=index,
        )

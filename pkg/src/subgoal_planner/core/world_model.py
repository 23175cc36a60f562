"""Recurrent latent world model: RSSM heads, training losses and latent export.

Sequences are processed in padded batches of shape (B, T, ...) with a
(B, T) mask. Step t uses h_t = f(h_{t-1}, z_{t-1}) with h_0 = z_0 = 0, a
posterior q(z_t | h_t, e(o_t)) and a prior p(z_t | h_t).
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt
import torch

from .checkpoint import Bundle, atomic_write_text, sha256_hex
from .config import TrainingConfig, WorldModelConfig
from .errors import DataError, DivergenceError, IncompatibleCheckpointError
from .linalg import RngStream
from .maze import Demonstration
from .neural import (
    DTYPE,
    Adam,
    MlpSpec,
    ParamSet,
    as_tensor,
    init_params,
    mlp_forward,
    params_from_bytes,
    params_to_bytes,
)

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

LATENT_FORMAT = "latent-demos"
LATENT_VERSION = 1


@dataclass
class GaussianDiag:
    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError(
                f"mean {tuple(self.mean.shape)} vs log_std {tuple(self.log_std.shape)}"
            )

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "GaussianDiag":
        mean, log_std = raw.chunk(2, dim=-1)
        return cls(mean=mean, log_std=log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return self.mean + self.std * eps

    def kl(self, other: "GaussianDiag") -> torch.Tensor:
        """KL(self || other), summed over the last dimension."""
        var_ratio = torch.exp(2.0 * (self.log_std - other.log_std))
        mean_term = ((self.mean - other.mean) / other.std) ** 2
        return 0.5 * (var_ratio + mean_term - 1.0).sum(-1) + (other.log_std - self.log_std).sum(-1)


@dataclass
class LatentState:
    h: torch.Tensor
    z: torch.Tensor


@dataclass
class WorldModelParams:
    encoder: ParamSet
    recurrent: ParamSet
    prior_head: ParamSet
    posterior_head: ParamSet
    decoder: ParamSet
    proj_head: ParamSet
    idm: ParamSet

    def items(self) -> list[tuple[str, ParamSet]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def all(self) -> list[ParamSet]:
        return [p for _, p in self.items()]


def _heads(cfg: WorldModelConfig, obs_dim: int, action_dim: int) -> dict[str, MlpSpec]:
    z, h, e, w = cfg.d_z, cfg.d_h, cfg.d_e, cfg.hidden
    return {
        "encoder": MlpSpec((obs_dim, w, e)),
        # single gated layer: first d_h outputs are the candidate, last d_h the gate
        "recurrent": MlpSpec((h + z, 2 * h)),
        "prior_head": MlpSpec((h, w, 2 * z)),
        "posterior_head": MlpSpec((h + e, w, 2 * z)),
        "decoder": MlpSpec((h + z, w, obs_dim)),
        "proj_head": MlpSpec((z, w, cfg.proj_dim)),
        "idm": MlpSpec((2 * z, w, action_dim)),
    }


@dataclass
class WorldModel:
    params: WorldModelParams
    config: WorldModelConfig
    obs_dim: int = 2
    action_dim: int = 2
    obs_shift: npt.NDArray[np.float64] = field(default_factory=lambda: np.zeros(2))
    obs_scale: npt.NDArray[np.float64] = field(default_factory=lambda: np.ones(2))

    @classmethod
    def build(
        cls, config: WorldModelConfig, rng: RngStream, obs_dim: int = 2, action_dim: int = 2
    ) -> "WorldModel":
        specs = _heads(config, obs_dim, action_dim)
        params = WorldModelParams(
            **{n: init_params(s, rng.child(i)) for i, (n, s) in enumerate(specs.items())}
        )
        return cls(
            params=params,
            config=config,
            obs_dim=obs_dim,
            action_dim=action_dim,
            obs_shift=np.zeros(obs_dim),
            obs_scale=np.ones(obs_dim),
        )

    @property
    def d_z(self) -> int:
        return self.config.d_z

    @property
    def d_h(self) -> int:
        return self.config.d_h

    def fit_normalization(self, demos: Sequence[Demonstration]):
        obs = np.concatenate([d.observations for d in demos])
        self.obs_shift = obs.mean(axis=0)
        self.obs_scale = np.maximum(obs.std(axis=0), 1e-6)

    def normalize(self, o) -> torch.Tensor:
        return (as_tensor(o) - as_tensor(self.obs_shift)) / as_tensor(self.obs_scale)

    def checksum(self) -> str:
        blobs = [params_to_bytes(p) for _, p in self.params.items()]
        blobs.append(np.asarray(self.obs_shift, dtype="<f8").tobytes())
        blobs.append(np.asarray(self.obs_scale, dtype="<f8").tobytes())
        return sha256_hex(b"".join(blobs))

    # -- single-step pieces -------------------------------------------------

    def encode(self, o) -> torch.Tensor:
        """Observation embedding e(o)."""
        o = as_tensor(o)
        if o.shape[-1] != self.obs_dim:
            raise ValueError(f"observation has width {o.shape[-1]}, model expects {self.obs_dim}")
        return mlp_forward(self.params.encoder, self.normalize(o))

    def recur(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        raw = mlp_forward(self.params.recurrent, torch.cat([h, z], dim=-1))
        cand, gate = raw.chunk(2, dim=-1)
        g = torch.sigmoid(gate)
        return (1.0 - g) * h + g * torch.tanh(cand)

    def prior(self, h: torch.Tensor) -> GaussianDiag:
        return GaussianDiag.from_raw(mlp_forward(self.params.prior_head, h))

    def posterior(self, h: torch.Tensor, e: torch.Tensor) -> GaussianDiag:
        raw = mlp_forward(self.params.posterior_head, torch.cat([h, e], dim=-1))
        return GaussianDiag.from_raw(raw)

    def decode(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Reconstruction in normalised observation units."""
        return mlp_forward(self.params.decoder, torch.cat([h, z], dim=-1))

    def decode_position(self, h, z) -> npt.NDArray[np.float64]:
        with torch.no_grad():
            out = self.decode(as_tensor(h), as_tensor(z))
        return out.numpy() * self.obs_scale + self.obs_shift

    def project(self, z) -> torch.Tensor:
        return mlp_forward(self.params.proj_head, as_tensor(z))

    def idm_predict(self, z_t, z_next) -> torch.Tensor:
        """Raw (unclipped) action predicted for the transition z_t -> z_next."""
        return mlp_forward(self.params.idm, torch.cat([as_tensor(z_t), as_tensor(z_next)], dim=-1))

    def initial_state(self, batch: tuple[int, ...] = ()) -> LatentState:
        return LatentState(
            h=torch.zeros(*batch, self.d_h, dtype=DTYPE),
            z=torch.zeros(*batch, self.d_z, dtype=DTYPE),
        )

    def filter_step(self, state: Optional[LatentState], o) -> LatentState:
        """Posterior-mean update: h <- f(h, z), z <- mean q(z | h, e(o))."""
        with torch.no_grad():
            state = state or self.initial_state()
            h = self.recur(state.h, state.z)
            z = self.posterior(h, self.encode(o)).mean
        return LatentState(h=h, z=z)

    def encode_goal(self, o_goal) -> torch.Tensor:
        return self.filter_step(None, o_goal).z


@dataclass
class Rollout:
    h: torch.Tensor  # (B, T, d_h)
    z: torch.Tensor  # (B, T, d_z), sampled
    priors: GaussianDiag
    posteriors: GaussianDiag
    eps: torch.Tensor  # noise used for z


def rssm_rollout_posterior(
    wm: WorldModel,
    obs,
    rng: Optional[RngStream] = None,
    eps: Optional[torch.Tensor] = None,
) -> Rollout:
    """Filter ``obs`` (T, o) or (B, T, o) through the posterior.

    Noise comes from ``eps`` when given, else from ``rng``; with neither the
    posterior means are used.
    """
    obs = as_tensor(obs)
    squeeze = obs.ndim == 2
    if squeeze:
        obs = obs[None]
    B, T, _ = obs.shape
    if T < 1:
        raise ValueError("rollout needs at least one observation")
    if eps is None:
        eps = (
            torch.from_numpy(rng.normal(size=(B, T, wm.d_z)))
            if rng is not None
            else torch.zeros(B, T, wm.d_z, dtype=DTYPE)
        )
    eps = as_tensor(eps).reshape(B, T, wm.d_z)
    e = wm.encode(obs)
    state = wm.initial_state((B,))
    hs, zs, pri, post = [], [], [], []
    for t in range(T):
        h = wm.recur(state.h, state.z)
        p = wm.prior(h)
        q = wm.posterior(h, e[:, t])
        z = q.sample(eps[:, t])
        hs.append(h)
        zs.append(z)
        pri.append(p)
        post.append(q)
        state = LatentState(h=h, z=z)
    out = Rollout(
        h=torch.stack(hs, 1),
        z=torch.stack(zs, 1),
        priors=GaussianDiag(
            torch.stack([p.mean for p in pri], 1), torch.stack([p.log_std for p in pri], 1)
        ),
        posteriors=GaussianDiag(
            torch.stack([q.mean for q in post], 1), torch.stack([q.log_std for q in post], 1)
        ),
        eps=eps,
    )
    if not (torch.isfinite(out.h).all() and torch.isfinite(out.z).all()):
        raise DivergenceError("non-finite activation in world-model rollout", {"T": T, "batch": B})
    if squeeze:
        out = Rollout(
            h=out.h[0],
            z=out.z[0],
            priors=GaussianDiag(out.priors.mean[0], out.priors.log_std[0]),
            posteriors=GaussianDiag(out.posteriors.mean[0], out.posteriors.log_std[0]),
            eps=out.eps[0],
        )
    return out


def elbo_terms(
    wm: WorldModel, obs, rollout: Rollout, mask=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction, KL), each summed over time and averaged over sequences."""
    target = wm.normalize(obs)
    recon = ((target - wm.decode(rollout.h, rollout.z)) ** 2).sum(-1)
    kl = rollout.posteriors.kl(rollout.priors)
    if mask is None:
        mask = torch.ones(recon.shape, dtype=DTYPE)
    mask = as_tensor(mask)
    n_seq = recon.shape[0] if recon.ndim == 2 else 1
    return (recon * mask).sum() / n_seq, (kl * mask).sum() / n_seq


def elbo_loss(wm: WorldModel, obs, rollout: Rollout, mask=None) -> torch.Tensor:
    recon, kl = elbo_terms(wm, obs, rollout, mask)
    return recon + kl


def _unit(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("cosine similarity of a zero-norm projection (degenerate latent)")
    return x / norm


def contrastive_loss(
    wm: WorldModel,
    anchors: torch.Tensor,
    goals: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """InfoNCE over (anchor, goal) positives and (A, N) failed-trajectory negatives.

    The positive sits in the denominator alongside the negatives.
    """
    anchors, goals, negatives = as_tensor(anchors), as_tensor(goals), as_tensor(negatives)
    if anchors.shape[0] < 1:
        raise ValueError("contrastive loss needs at least one anchor")
    if negatives.ndim != 3 or negatives.shape[1] == 0:
        raise ValueError("contrastive loss needs a non-empty negative pool")
    fa = _unit(wm.project(anchors))
    fg = _unit(wm.project(goals))
    fn = _unit(wm.project(negatives))
    pos = (fa * fg).sum(-1, keepdim=True)
    neg = torch.einsum("ad,and->an", fa, fn)
    logits = torch.cat([pos, neg], dim=-1) / temperature
    return (torch.logsumexp(logits, dim=-1) - logits[:, 0]).mean()


def idm_loss(wm: WorldModel, z_t, z_next, actions, mask=None) -> torch.Tensor:
    """Mean over transitions of the squared action error."""
    err = ((as_tensor(actions) - wm.idm_predict(z_t, z_next)) ** 2).sum(-1)
    if mask is None:
        return err.mean()
    mask = as_tensor(mask)
    return (err * mask).sum() / mask.sum().clamp_min(1.0)


@dataclass
class _Batch:
    obs: torch.Tensor  # (B, T+1, o)
    mask: torch.Tensor  # (B, T+1)
    actions: torch.Tensor  # (B, T, a)
    lengths: list[int]  # T per sequence
    success: list[bool]


def _collate(demos: Sequence[Demonstration]) -> _Batch:
    t_max = max(d.T for d in demos)
    B = len(demos)
    obs = np.zeros((B, t_max + 1, 2))
    mask = np.zeros((B, t_max + 1))
    actions = np.zeros((B, t_max, 2))
    for i, d in enumerate(demos):
        obs[i, : d.T + 1] = d.observations
        # pad by holding the last observation so padded steps stay in range
        obs[i, d.T + 1 :] = d.observations[-1]
        mask[i, : d.T + 1] = 1.0
        actions[i, : d.T] = d.actions
    return _Batch(
        obs=torch.from_numpy(obs),
        mask=torch.from_numpy(mask),
        actions=torch.from_numpy(actions),
        lengths=[d.T for d in demos],
        success=[d.success for d in demos],
    )


def _contrastive_inputs(batch: _Batch, z: torch.Tensor, interval: int, n_neg: int, rng: RngStream):
    anchors, goals = [], []
    pool = []
    for i, (T, ok) in enumerate(zip(batch.lengths, batch.success)):
        if ok:
            for k in range(0, T, interval):
                anchors.append(z[i, k])
                goals.append(z[i, T])
        else:
            pool.extend(z[i, : T + 1])
    if not anchors or not pool:
        return None
    idx = rng.integers(0, len(pool), size=(len(anchors), n_neg))
    pool_t = torch.stack(pool)
    return torch.stack(anchors), torch.stack(goals), pool_t[torch.from_numpy(idx)]


def world_model_loss(
    wm: WorldModel, batch: _Batch, rng: RngStream, neg_rng: RngStream
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the enabled terms plus their unweighted values."""
    w = wm.config.loss
    roll = rssm_rollout_posterior(wm, batch.obs, rng=rng)
    terms: dict[str, torch.Tensor] = {}
    total = torch.zeros((), dtype=DTYPE)
    if w.lambda_wm > 0:
        recon, kl = elbo_terms(wm, batch.obs, roll, batch.mask)
        terms["recon"], terms["kl"] = recon, kl
        total = total + w.lambda_wm * (recon + kl)
    means = roll.posteriors.mean
    if w.lambda_idm > 0:
        terms["idm"] = idm_loss(wm, means[:, :-1], means[:, 1:], batch.actions, batch.mask[:, 1:])
        total = total + w.lambda_idm * terms["idm"]
    if w.lambda_contrastive > 0:
        inputs = _contrastive_inputs(
            batch, means, wm.config.anchor_interval, w.negatives_per_anchor, neg_rng
        )
        if inputs is not None:
            terms["contrastive"] = contrastive_loss(wm, *inputs, temperature=w.temperature)
            total = total + w.lambda_contrastive * terms["contrastive"]
    return total, {k: float(v.detach()) for k, v in terms.items()}


@dataclass
class LossCurves:
    rows: list[dict[str, float]] = field(default_factory=list)

    def append(self, epoch: int, values: dict[str, float]):
        self.rows.append({"epoch": epoch, **values})

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows if name in r]

    def to_csv(self) -> str:
        keys = ["epoch"] + sorted({k for r in self.rows for k in r} - {"epoch"})
        lines = [",".join(keys)]
        for r in self.rows:
            lines.append(",".join(repr(r[k]) if k in r else "" for k in keys))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_csv())


def train_world_model(
    demos: Sequence[Demonstration],
    config: WorldModelConfig,
    training: TrainingConfig,
    rng: RngStream,
) -> tuple[WorldModel, LossCurves]:
    """Stage 1: fit the world model on successful and failed demonstrations."""
    demos = [d for d in demos if d.T >= 1]
    if not demos:
        raise DataError("no demonstrations with at least one step")
    failed = [d for d in demos if not d.success]
    if config.loss.lambda_contrastive > 0 and (not failed or len(failed) == len(demos)):
        raise DataError("contrastive training needs both successful and failed demonstrations")

    wm = WorldModel.build(config, rng.child(0))
    wm.fit_normalization(demos)
    opt = Adam(wm.params.all(), lr=training.lr)
    batch_rng, noise_rng, neg_rng = rng.child(1), rng.child(2), rng.child(3)
    curves = LossCurves()

    for epoch in range(1, training.wm_epochs + 1):
        order = batch_rng.permutation(len(demos))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(demos), training.batch_size):
            chosen = [demos[i] for i in order[start : start + training.batch_size]]
            if failed and all(d.success for d in chosen):
                chosen.append(failed[int(batch_rng.integers(0, len(failed)))])
            total, terms = world_model_loss(wm, _collate(chosen), noise_rng, neg_rng)
            if not torch.isfinite(total):
                raise DivergenceError(
                    f"non-finite world-model loss at epoch {epoch}", {"epoch": epoch, **terms}
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            terms["total"] = float(total.detach())
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        means = {k: v / n_batches for k, v in sums.items()}
        curves.append(epoch, means)
        logger.info(
            "wm epoch %d/%d %s",
            epoch,
            training.wm_epochs,
            " ".join(f"{k}={v:.4f}" for k, v in sorted(means.items())),
        )
    return wm, curves


def save_world_model(wm: WorldModel, path: str | Path) -> Path:
    entries = {f"{name}.sgpm": params_to_bytes(p) for name, p in wm.params.items()}
    meta = {
        "kind": "world_model",
        "config": wm.config.model_dump(mode="json"),
        "obs_dim": wm.obs_dim,
        "action_dim": wm.action_dim,
        "obs_shift": wm.obs_shift.tolist(),
        "obs_scale": wm.obs_scale.tolist(),
        "wm_checksum": wm.checksum(),
    }
    return Bundle(entries=entries, meta=meta).save(path)


def load_world_model(path: str | Path) -> WorldModel:
    bundle = Bundle.load(path)
    meta = bundle.meta
    if meta.get("kind") != "world_model":
        raise IncompatibleCheckpointError(f"{path} is not a world-model bundle")
    params = WorldModelParams(
        **{
            f.name: params_from_bytes(bundle.entries[f"{f.name}.sgpm"])
            for f in fields(WorldModelParams)
        }
    )
    wm = WorldModel(
        params=params,
        config=WorldModelConfig.model_validate(meta["config"]),
        obs_dim=meta["obs_dim"],
        action_dim=meta["action_dim"],
        obs_shift=np.array(meta["obs_shift"], dtype=np.float64),
        obs_scale=np.array(meta["obs_scale"], dtype=np.float64),
    )
    if wm.checksum() != bundle.wm_checksum:
        raise IncompatibleCheckpointError(
            f"world-model checksum in {path} does not match its weights"
        )
    return wm


@dataclass
class LatentRecord:
    z: npt.NDArray[np.float64]  # (T+1, d_z)
    h: npt.NDArray[np.float64]  # (T+1, d_h)
    actions: npt.NDArray[np.float64]  # (T, a)
    success: bool
    maze_id: str = "default8"
    seed: int = 0

    @property
    def T(self) -> int:
        return len(self.actions)


@dataclass
class LatentDataset:
    records: list[LatentRecord]
    d_z: int
    d_h: int
    wm_checksum: str

    def successes(self) -> list[LatentRecord]:
        return [r for r in self.records if r.success]


def export_latent_dataset(wm: WorldModel, demos: Sequence[Demonstration]) -> LatentDataset:
    """Posterior-mean latents for every demonstration, one record each."""
    records = []
    for d in demos:
        state = None
        hs, zs = [], []
        for o in d.observations:
            state = wm.filter_step(state, o)
            hs.append(state.h.numpy())
            zs.append(state.z.numpy())
        records.append(
            LatentRecord(
                z=np.array(zs),
                h=np.array(hs),
                actions=d.actions.copy(),
                success=d.success,
                maze_id=d.maze_id,
                seed=d.seed,
            )
        )
    return LatentDataset(records=records, d_z=wm.d_z, d_h=wm.d_h, wm_checksum=wm.checksum())


def save_latent_dataset(data: LatentDataset, path: str | Path) -> Path:
    header = {
        "format": LATENT_FORMAT,
        "version": LATENT_VERSION,
        "d_z": data.d_z,
        "d_h": data.d_h,
        "wm_checksum": data.wm_checksum,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in data.records:
        lines.append(
            json.dumps(
                {
                    "maze_id": r.maze_id,
                    "seed": r.seed,
                    "success": r.success,
                    "T": r.T,
                    "z": r.z.tolist(),
                    "h": r.h.tolist(),
                    "actions": r.actions.tolist(),
                },
                sort_keys=True,
            )
        )
    return atomic_write_text(path, "\n".join(lines) + "\n")


def load_latent_dataset(path: str | Path) -> LatentDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Latent dataset not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    try:
        header = json.loads(lines[0])
        if header.get("format") != LATENT_FORMAT or header.get("version") != LATENT_VERSION:
            raise DataError(f"{path} is not a v{LATENT_VERSION} latent dataset")
        d_z, d_h = int(header["d_z"]), int(header["d_h"])
        records = []
        for line in lines[1:]:
            if not line:
                continue
            rec = json.loads(line)
            records.append(
                LatentRecord(
                    z=np.array(rec["z"], dtype=np.float64).reshape(-1, d_z),
                    h=np.array(rec["h"], dtype=np.float64).reshape(-1, d_h),
                    actions=np.array(rec["actions"], dtype=np.float64).reshape(-1, 2),
                    success=bool(rec["success"]),
                    maze_id=rec.get("maze_id", "default8"),
                    seed=int(rec.get("seed", 0)),
                )
            )
    except (IndexError, KeyError, ValueError) as e:
        raise DataError(f"malformed latent dataset {path}: {e}") from e
    return LatentDataset(records=records, d_z=d_z, d_h=d_h, wm_checksum=header["wm_checksum"])

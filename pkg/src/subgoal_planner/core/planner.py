"""Stage 2: hierarchical planner datasets, composite training and checkpoints.

The high-level generator proposes K subgoal latents given (z_now, z_goal);
the low-level generator fills in dense H-state segments between consecutive
subgoals. Which model family sits at each level is chosen by the planner
variant:

=========  ====================  ====================
variant    high level            low level
=========  ====================  ====================
hdflow     guided DDPM           rectified flow
hd         guided DDPM           DDPM (unguided)
hf         rectified flow        rectified flow
fd         flat DDPM over K*H latent states (no low level)
=========  ====================  ====================
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
import torch

from .checkpoint import Bundle, require_same_world_model
from .config import GuidanceConfig, PlannerConfig, RunConfig
from .diffusion import DiffusionModel, ManifoldIndex, ebm_loss, project_onto, sample_subgoals
from .errors import DataError, DivergenceError, IncompatibleCheckpointError
from .flow import FlowModel, build_flow_pairs, integrate_ode
from .linalg import RngStream
from .maze import Action
from .neural import Adam, as_tensor
from .world_model import LatentDataset, LossCurves, WorldModel

logger = logging.getLogger(__name__)

Generator = Union[DiffusionModel, FlowModel]

PLANNER_KIND = "planner"


@dataclass
class SubgoalRecord:
    subgoals: npt.NDArray[np.float64]  # (K_max, d_z), padded by repeating the last subgoal
    mask: npt.NDArray[np.bool_]  # (K_max,), True for real slots
    context: npt.NDArray[np.float64]  # (2 * d_z,) = (z_start, z_final)
    success: bool
    maze_id: str = "default8"
    offset: int = 0

    @property
    def K(self) -> int:
        return int(self.mask.sum())

    def flat(self, K: int) -> npt.NDArray[np.float64]:
        return self.subgoals[:K].reshape(-1)


def build_subgoal_dataset(
    latents: LatentDataset,
    H: int,
    stride: int = 0,
    K_max: Optional[int] = None,
) -> tuple[list[SubgoalRecord], int]:
    """Subgoal sequences every H steps, one per start offset 0, stride, 2 * stride, ...

    A record of length T started at offset s holds K = (T - s) // H subgoals at
    s + H, s + 2H, ... with context (z_s, z_T). Demonstrations with T < H are
    skipped and counted.
    """
    if H < 2:
        raise ValueError(f"H must be >= 2, got {H}")
    raw: list[tuple[npt.NDArray, npt.NDArray, bool, str, int]] = []
    skipped = 0
    for rec in latents.records:
        if rec.T < H:
            skipped += 1
            continue
        offsets = range(0, rec.T - H + 1, stride) if stride > 0 else (0,)
        for s in offsets:
            K = (rec.T - s) // H
            subgoals = rec.z[s + H * np.arange(1, K + 1)]
            context = np.concatenate([rec.z[s], rec.z[rec.T]])
            raw.append((subgoals, context, rec.success, rec.maze_id, s))
    if skipped:
        logger.info("subgoal dataset: skipped %d demonstrations shorter than H=%d", skipped, H)
    if not raw:
        return [], skipped

    width = K_max or max(len(r[0]) for r in raw)
    records = []
    for subgoals, context, success, maze_id, s in raw:
        real = min(len(subgoals), width)
        hold = np.repeat(subgoals[real - 1 : real], width - real, axis=0)
        padded = np.concatenate([subgoals[:real], hold])
        records.append(
            SubgoalRecord(
                subgoals=padded,
                mask=np.arange(width) < real,
                context=context,
                success=success,
                maze_id=maze_id,
                offset=s,
            )
        )
    return records, skipped


def build_dense_dataset(
    latents: LatentDataset, length: int, stride: int = 0
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Flattened ``length``-state futures z_{s+1} .. z_{s+length} of successful records.

    Futures running past the final latent hold it. Returns (sequences, contexts).
    """
    seqs, ctxs = [], []
    for rec in latents.successes():
        if rec.T < 1:
            continue
        offsets = range(0, rec.T, stride) if stride > 0 else (0,)
        for s in offsets:
            idx = np.minimum(s + np.arange(1, length + 1), rec.T)
            seqs.append(rec.z[idx].reshape(-1))
            ctxs.append(np.concatenate([rec.z[s], rec.z[rec.T]]))
    d_z = latents.d_z
    return (
        np.array(seqs).reshape(len(seqs), length * d_z),
        np.array(ctxs).reshape(len(ctxs), 2 * d_z),
    )


def projection_residual(z, index: ManifoldIndex, k: int, variance_retention: float) -> torch.Tensor:
    """Mean squared distance of each row of ``z`` to its clean local PCA subspace."""
    z = as_tensor(z)
    rows = z.reshape(-1, index.dim)
    residuals = []
    for row in rows:
        basis = index.clean_basis(row.detach().numpy(), min(k, len(index)), variance_retention)
        residuals.append(((row - project_onto(row, basis)) ** 2).sum())
    return torch.stack(residuals).mean()


def differentiable_sample(hl: Generator, contexts, rng: RngStream, steps: int) -> torch.Tensor:
    """Plans drawn with guidance and projection off, keeping the autograd graph."""
    cond = as_tensor(contexts)
    if isinstance(hl, FlowModel):
        x0 = torch.from_numpy(rng.normal(size=(*cond.shape[:-1], hl.dim)))
        cfg = hl.config.model_copy(update={"integrator": "euler", "steps": steps})
        x1, _ = integrate_ode(lambda x, u: hl.v_net(x, t=u, cond=cond), x0, cfg)
        return x1
    plain = GuidanceConfig(
        w_cfg=1.0, w_ebm=0.0, project=False, sample_steps=min(steps, hl.schedule.L)
    )
    return sample_subgoals(hl.eps_net, None, None, cond, plain, hl.schedule, rng)


def projection_loss(
    hl: Generator,
    index: ManifoldIndex,
    contexts,
    rng: RngStream,
    guidance: GuidanceConfig,
    sample_steps: int = 10,
) -> torch.Tensor:
    """Residual of freshly sampled plans against the clean successful manifold."""
    z = differentiable_sample(hl, contexts, rng, sample_steps)
    return projection_residual(z, index, guidance.k_neighbors, guidance.variance_retention)


def actions_from_segment(wm: WorldModel, segment) -> list[Action]:
    """IDM actions for each consecutive latent pair of an (H, d_z) segment."""
    seg = as_tensor(segment).reshape(-1, wm.d_z)
    with torch.no_grad():
        raw = wm.idm_predict(seg[:-1], seg[1:]).numpy()
    return [Action.from_array(a) for a in raw]


@dataclass
class PlannerComponents:
    variant: str
    hl: Generator
    ll: Optional[Generator]
    config: PlannerConfig
    d_z: int
    wm_checksum: str

    @property
    def H(self) -> int:
        return self.config.H

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def ebm(self):
        return getattr(self.hl, "ebm", None)

    @property
    def index(self) -> Optional[ManifoldIndex]:
        return getattr(self.hl, "index", None)

    def networks(self) -> dict[str, object]:
        nets = {f"hl.{n.kind}": n for n in self.hl.trainable()}
        if self.ebm is not None:
            nets["hl.ebm"] = self.ebm
        if self.ll is not None:
            nets.update({f"ll.{n.kind}": n for n in self.ll.trainable()})
        return nets


def _low_level_guidance(sample_steps: int) -> GuidanceConfig:
    return GuidanceConfig(w_cfg=1.0, w_ebm=0.0, project=False, sample_steps=sample_steps)


def build_components(
    run: RunConfig, d_z: int, wm_checksum: str, rng: RngStream, variant: Optional[str] = None
) -> PlannerComponents:
    cfg = run.planner if variant is None else run.planner.model_copy(update={"variant": variant})
    H, K = cfg.H, cfg.K
    cond_dim = 2 * d_z
    if cfg.variant == "fd":
        hl = DiffusionModel.build(K * H * d_z, cond_dim, run.diffusion, run.guidance, rng.child(0))
        return PlannerComponents(cfg.variant, hl, None, cfg, d_z, wm_checksum)
    if cfg.variant == "hf":
        hl = FlowModel.build(K * d_z, cond_dim, run.flow, rng.child(0))
    else:
        hl = DiffusionModel.build(
            K * d_z, cond_dim, run.diffusion, run.guidance, rng.child(0), ebm_hidden=cfg.ebm_hidden
        )
    if cfg.variant == "hd":
        ll = DiffusionModel.build(
            H * d_z,
            cond_dim,
            run.diffusion,
            _low_level_guidance(min(100, run.diffusion.steps)),
            rng.child(1),
        )
    else:
        ll = FlowModel.build(H * d_z, cond_dim, run.flow, rng.child(1))
    return PlannerComponents(cfg.variant, hl, ll, cfg, d_z, wm_checksum)


def _ebm_pairs(
    records: Sequence[SubgoalRecord], K: int, rng: RngStream, n: int
) -> Optional[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``n`` (positive, negative, context) triples; negatives share the positive's maze."""
    pos = [r for r in records if r.success]
    neg_by_maze: dict[str, list[SubgoalRecord]] = {}
    for r in records:
        if not r.success:
            neg_by_maze.setdefault(r.maze_id, []).append(r)
    pos = [r for r in pos if r.maze_id in neg_by_maze]
    if not pos:
        return None
    picks = rng.integers(0, len(pos), size=n)
    draws = rng.uniform(size=n)
    P, N, C = [], [], []
    for i, u in zip(picks, draws):
        p = pos[int(i)]
        pool = neg_by_maze[p.maze_id]
        q = pool[min(int(u * len(pool)), len(pool) - 1)]
        P.append(p.flat(K))
        N.append(q.flat(K))
        C.append(p.context)
    return np.array(P), np.array(N), np.array(C)


def _slices(order: np.ndarray, batch: int, size: int) -> np.ndarray:
    idx = (np.arange(batch * size, (batch + 1) * size)) % len(order)
    return order[idx]


@dataclass
class _TrainingData:
    hl_x: np.ndarray
    hl_c: np.ndarray
    hl_mask: Optional[np.ndarray]
    ll_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    ll_c: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    records: list[SubgoalRecord] = field(default_factory=list)


def _training_data(latents: LatentDataset, cfg: PlannerConfig) -> _TrainingData:
    H, K, d_z = cfg.H, cfg.K, latents.d_z
    if cfg.variant == "fd":
        x, c = build_dense_dataset(latents, K * H, cfg.context_stride)
        if len(x) == 0:
            raise DataError("no successful demonstrations to train the flat planner on")
        return _TrainingData(hl_x=x, hl_c=c, hl_mask=None)

    records, _ = build_subgoal_dataset(latents, H, cfg.context_stride, K_max=K)
    good = [r for r in records if r.success]
    if not good:
        raise DataError(f"no successful demonstrations with at least H={H} steps")
    hl_x = np.array([r.flat(K) for r in good])
    hl_c = np.array([r.context for r in good])
    hl_mask = None
    if cfg.mask_padding:
        hl_mask = np.repeat(np.array([r.mask[:K] for r in good], dtype=np.float64), d_z, axis=1)
    (ll_x, ll_c), _ = build_flow_pairs(latents, H)
    return _TrainingData(
        hl_x=hl_x, hl_c=hl_c, hl_mask=hl_mask, ll_x=ll_x, ll_c=ll_c, records=records
    )


def train_planner(
    latents: LatentDataset,
    run: RunConfig,
    rng: RngStream,
    variant: Optional[str] = None,
    index_noise_seed: Optional[int] = None,
) -> tuple[PlannerComponents, LossCurves]:
    """Minimise the weighted sum of the high-level, low-level, energy and projection losses.

    Terms with a zero weight are neither computed nor stepped. Each network
    has its own Adam optimizer.
    """
    comps = build_components(run, latents.d_z, latents.wm_checksum, rng.child(0), variant)
    cfg = comps.config
    data = _training_data(latents, cfg)
    guidance = run.guidance
    train = run.training

    index = None
    if isinstance(comps.hl, DiffusionModel) and cfg.variant != "fd":
        index = ManifoldIndex(
            sequences=data.hl_x,
            noise_seed=rng.child(4).seed if index_noise_seed is None else index_noise_seed,
        )
    ebm_on = cfg.lambda_ebm > 0 and comps.ebm is not None
    proj_on = cfg.lambda_proj > 0 and cfg.variant != "fd"
    proj_index = index or (ManifoldIndex(sequences=data.hl_x) if proj_on else None)
    ll_on = cfg.lambda_ll > 0 and comps.ll is not None and len(data.ll_x) > 0
    if comps.ll is not None and len(data.ll_x) == 0:
        logger.warning("no segment pairs with H=%d; the low-level planner stays untrained", cfg.H)
    hl_on = cfg.lambda_hl > 0

    optimizers = {name: Adam([net.params], lr=train.lr) for name, net in comps.networks().items()}
    stepped = set()
    if hl_on or proj_on:
        stepped.update(n for n in optimizers if n.startswith("hl.") and n != "hl.ebm")
    if ebm_on:
        stepped.add("hl.ebm")
    if ll_on:
        stepped.update(n for n in optimizers if n.startswith("ll."))

    batch_rng, noise_rng, pair_rng, proj_rng = (rng.child(i) for i in (1, 2, 3, 5))
    n_hl, n_ll = len(data.hl_x), len(data.ll_x)
    bs = train.batch_size
    n_batches = max(1, math.ceil(max(n_hl, n_ll if ll_on else 0) / bs))
    curves = LossCurves()

    for epoch in range(1, train.planner_epochs + 1):
        hl_order = batch_rng.permutation(n_hl)
        ll_order = batch_rng.permutation(n_ll) if ll_on else None
        sums: dict[str, float] = {}
        for b in range(n_batches):
            terms: dict[str, torch.Tensor] = {}
            ids = _slices(hl_order, b, min(bs, n_hl))
            if hl_on:
                mask = data.hl_mask[ids] if data.hl_mask is not None else None
                terms["hl"] = comps.hl.loss(data.hl_x[ids], data.hl_c[ids], noise_rng, mask)
            if ll_on:
                lids = _slices(ll_order, b, min(bs, n_ll))
                terms["ll"] = comps.ll.loss(data.ll_x[lids], data.ll_c[lids], noise_rng)
            if ebm_on:
                pairs = _ebm_pairs(data.records, cfg.K, pair_rng, min(bs, n_hl))
                if pairs is not None:
                    terms["ebm"] = ebm_loss(comps.ebm, *pairs)
            if proj_on:
                ctx = data.hl_c[ids[: cfg.projection_batch]]
                terms["proj"] = projection_loss(
                    comps.hl, proj_index, ctx, proj_rng, guidance, cfg.projection_sample_steps
                )

            weights = {
                "hl": cfg.lambda_hl,
                "ll": cfg.lambda_ll,
                "ebm": cfg.lambda_ebm,
                "proj": cfg.lambda_proj,
            }
            for name, value in terms.items():
                if not torch.isfinite(value):
                    raise DivergenceError(
                        f"non-finite {name} loss at epoch {epoch}",
                        {"term": name, "epoch": epoch, "batch": b},
                    )
            if not terms:
                continue
            total = sum(weights[n] * v for n, v in terms.items())
            for opt in optimizers.values():
                opt.zero_grad()
            total.backward()
            for name in sorted(stepped):
                optimizers[name].step()
            for name, value in terms.items():
                sums[name] = sums.get(name, 0.0) + float(value.detach())
            sums["total"] = sums.get("total", 0.0) + float(total.detach())
        means = {k: v / n_batches for k, v in sums.items()}
        curves.append(epoch, means)
        logger.info(
            "planner[%s] epoch %d/%d %s",
            cfg.variant,
            epoch,
            train.planner_epochs,
            " ".join(f"{k}={v:.4f}" for k, v in sorted(means.items())),
        )

    if index is not None:
        comps.hl.index = index
    return comps, curves


def _generator_from_entries(bundle: Bundle, prefix: str, meta: dict) -> Generator:
    if meta["kind"] == FlowModel.kind:
        return FlowModel.from_entries(bundle, prefix, meta)
    if meta["kind"] == DiffusionModel.kind:
        return DiffusionModel.from_entries(bundle, prefix, meta)
    raise IncompatibleCheckpointError(f"unknown generator kind '{meta['kind']}'")


def save_planner(comps: PlannerComponents, path: str | Path) -> Path:
    entries, hl_meta = comps.hl.to_entries("hl")
    meta = {
        "kind": PLANNER_KIND,
        "variant": comps.variant,
        "d_z": comps.d_z,
        "planner": comps.config.model_dump(mode="json"),
        "wm_checksum": comps.wm_checksum,
        "hl": hl_meta,
    }
    if comps.ll is not None:
        ll_entries, meta["ll"] = comps.ll.to_entries("ll")
        entries.update(ll_entries)
    return Bundle(entries=entries, meta=meta).save(path)


def load_planner(path: str | Path, wm_checksum: Optional[str] = None) -> PlannerComponents:
    """Load a planner bundle; with ``wm_checksum`` the world models must match."""
    bundle = Bundle.load(path)
    meta = bundle.meta
    if meta.get("kind") != PLANNER_KIND:
        raise IncompatibleCheckpointError(f"{path} is not a planner bundle")
    if wm_checksum is not None:
        require_same_world_model(wm_checksum, bundle.wm_checksum, what="planner and world model")
    return PlannerComponents(
        variant=meta["variant"],
        hl=_generator_from_entries(bundle, "hl", meta["hl"]),
        ll=_generator_from_entries(bundle, "ll", meta["ll"]) if "ll" in meta else None,
        config=PlannerConfig.model_validate(meta["planner"]),
        d_z=int(meta["d_z"]),
        wm_checksum=bundle.wm_checksum,
    )

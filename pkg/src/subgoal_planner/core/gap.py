"""Monte Carlo measurement of the energy-guidance gap.

At step ell the clean sample given z_ell is z0 = (z_ell - sqrt(1 - ab) eps) / sqrt(ab)
with eps ~ N(0, I). Two guidance estimates are compared:

* exact:   -E[eps * exp(-E(z0))] / E[exp(-E(z0))] / sqrt(1 - ab)
* learned: -E[E(z0) * eps] / sqrt(1 - ab)

The test family uses the linear energy E(z0) = sqrt(ab / (1 - ab)) <w, z0>
evaluated at z_ell = 0, where w = c * ones(d). In noise coordinates this is
E = -<w, eps>, so the exact guidance is -w / sqrt(1 - ab), the learned one is
+w / sqrt(1 - ab), and the gap is 2 c sqrt(d) / sqrt(1 - ab).
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write_text
from .diffusion import NoiseSchedule
from .errors import EstimationError
from .linalg import RngStream

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("d", "ell", "alpha_bar", "delta_ebm", "stderr", "analytic")

N_BATCHES = 20
CI_Z = 1.96


@dataclass
class GapRow:
    d: int
    ell: int
    alpha_bar: float
    delta_ebm: float
    stderr: float
    analytic: float
    samples: int = 0


@dataclass
class GapResult:
    rows: list[GapRow] = field(default_factory=list)
    slope: float = float("nan")  # d(log delta) / d(log d), per-step intercepts
    noise_exponent: float = float("nan")  # d(log delta) / d(log(1 - alpha_bar))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [r.d, r.ell, repr(r.alpha_bar), repr(r.delta_ebm), repr(r.stderr), repr(r.analytic)]
            )
        return buf.getvalue()

    def save(self, path):
        return atomic_write_text(path, self.to_csv())


def analytic_gap(d: int, alpha_bar: float, energy_scale: float) -> float:
    return 2.0 * energy_scale * math.sqrt(d) / math.sqrt(1.0 - alpha_bar)


def _accumulate(eps: np.ndarray, w: np.ndarray) -> dict[str, np.ndarray]:
    energy = -eps @ w
    weights = np.exp(-energy)
    return {
        "n": np.array(len(eps), dtype=np.float64),
        "sum_eps": eps.sum(axis=0),
        "sum_w": weights.sum(),
        "sum_w_eps": weights @ eps,
        "sum_e": energy.sum(),
        "sum_e_eps": energy @ eps,
    }


def _merge(parts: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: sum(p[k] for p in parts) for k in parts[0]}


def _gap_from(acc: dict[str, np.ndarray], alpha_bar: float) -> float:
    # centring eps by its sample mean acts as a control variate
    eps_bar = acc["sum_eps"] / acc["n"]
    exact = (acc["sum_w_eps"] - eps_bar * acc["sum_w"]) / acc["sum_w"]
    learned = (acc["sum_e_eps"] - eps_bar * acc["sum_e"]) / acc["n"]
    return float(np.linalg.norm(exact - learned)) / math.sqrt(1.0 - alpha_bar)


def estimate_gap(
    d: int,
    ell: int,
    sched: NoiseSchedule,
    rng: RngStream,
    energy_scale: float = 0.05,
    samples: int = 100_000,
    max_samples: int = 1_600_000,
    rel_ci: float = 0.1,
) -> GapRow:
    """Gap at one (d, ell); doubles the sample count until the 95% CI is tight."""
    sched.check(ell)
    alpha_bar = sched.ab(ell)
    analytic = analytic_gap(d, alpha_bar, energy_scale)
    if energy_scale == 0.0:
        return GapRow(d, ell, alpha_bar, 0.0, 0.0, 0.0, samples=0)

    w = np.full(d, energy_scale)
    n = samples
    attempt = 0
    while True:
        per_batch = max(1, n // N_BATCHES)
        stream = rng.child(attempt)
        parts = [_accumulate(stream.normal(size=(per_batch, d)), w) for _ in range(N_BATCHES)]
        pooled = _merge(parts)
        if not all(np.all(np.isfinite(v)) for v in pooled.values()):
            raise EstimationError(f"non-finite importance weights at d={d}, ell={ell}")
        delta = _gap_from(pooled, alpha_bar)
        batch_gaps = np.array([_gap_from(p, alpha_bar) for p in parts])
        stderr = float(batch_gaps.std(ddof=1) / math.sqrt(N_BATCHES))
        if CI_Z * stderr <= rel_ci * delta:
            return GapRow(d, ell, alpha_bar, delta, stderr, analytic, samples=per_batch * N_BATCHES)
        if 2 * n > max_samples:
            raise EstimationError(
                f"gap estimate at d={d}, ell={ell} has CI half-width {CI_Z * stderr:.3g} "
                f"> {rel_ci:.0%} of {delta:.3g} with {n} samples"
            )
        logger.info("gap at d=%d ell=%d too noisy with %d samples, doubling", d, ell, n)
        n *= 2
        attempt += 1


def default_steps(L: int, fractions: Sequence[float] = (0.1, 0.3, 0.5, 0.7, 0.9)) -> list[int]:
    return sorted({min(L, max(1, round(f * L))) for f in fractions})


def _pooled_slope(x: np.ndarray, y: np.ndarray, groups: np.ndarray) -> float:
    """Least-squares slope of y on x with one intercept per group."""
    xc = np.zeros_like(x)
    yc = np.zeros_like(y)
    for g in np.unique(groups):
        sel = groups == g
        xc[sel] = x[sel] - x[sel].mean()
        yc[sel] = y[sel] - y[sel].mean()
    denom = float(xc @ xc)
    return float(xc @ yc / denom) if denom > 0 else float("nan")


def guidance_gap_experiment(
    dims: Sequence[int],
    sched: NoiseSchedule,
    rng: RngStream,
    steps: Sequence[int] | None = None,
    energy_scale: float = 0.05,
    samples: int = 100_000,
) -> GapResult:
    """Gap table over ``dims`` x ``steps`` with fitted scaling exponents."""
    if not dims:
        raise ValueError("gap experiment needs at least one dimension")
    steps = list(steps) if steps is not None else default_steps(sched.L)
    result = GapResult()
    for i, d in enumerate(dims):
        for j, ell in enumerate(steps):
            row = estimate_gap(d, ell, sched, rng.child(i * 10_000 + j), energy_scale, samples)
            logger.info(
                "gap d=%d ell=%d delta=%.4g (analytic %.4g)", d, ell, row.delta_ebm, row.analytic
            )
            result.rows.append(row)

    usable = [r for r in result.rows if r.delta_ebm > 0]
    if len({r.d for r in usable}) >= 2:
        result.slope = _pooled_slope(
            np.log([r.d for r in usable]),
            np.log([r.delta_ebm for r in usable]),
            np.array([r.ell for r in usable]),
        )
    if len({r.ell for r in usable}) >= 2:
        result.noise_exponent = _pooled_slope(
            np.log([1.0 - r.alpha_bar for r in usable]),
            np.log([r.delta_ebm for r in usable]),
            np.array([r.d for r in usable]),
        )
    return result

import csv

import pytest

from subgoal_planner.core.ablation import (
    ABLATION_COLUMNS,
    AblationContext,
    AblationResult,
    random_reference,
    run_components,
    run_k_sweep,
    run_variants,
    sweep_config,
)
from subgoal_planner.core.errors import ConfigError
from subgoal_planner.core.linalg import RngStream

from .conftest import tiny_config


@pytest.fixture
def ctx(corridor, wm, latents):
    return AblationContext(
        spec=corridor,
        wm=wm,
        latents=latents,
        run=tiny_config(),
        rng=RngStream(4),
        episodes=1,
        timing=False,
    )


def test_random_reference(ctx):
    row = random_reference(ctx)
    assert (row.name, row.group, row.K) == ("random", "reference", 2)
    assert row.report.n_episodes == 1


def test_unknown_variant(ctx):
    with pytest.raises(ConfigError, match="variant"):
        run_variants(ctx, ["hdflow2"])


def test_unknown_component(ctx, hdflow):
    with pytest.raises(ConfigError):
        run_components(ctx, ["no-idm"], base=hdflow)


def test_contrastive_ablation_needs_demonstrations(ctx, hdflow):
    with pytest.raises(ConfigError, match="demonstration"):
        run_components(ctx, ["no-contrastive"], base=hdflow)


@pytest.mark.parametrize("ks", [[], [0], [2, -1]])
def test_k_sweep_validation(ctx, hdflow, ks):
    with pytest.raises(ConfigError):
        run_k_sweep(ctx, ks, base=hdflow)


def test_sampling_time_components(ctx, hdflow):
    rows = run_components(ctx, ["no-proj", "no-ebm"], base=hdflow)
    assert [r.name for r in rows] == ["hdflow", "no-proj", "no-ebm"]
    assert {r.group for r in rows} == {"component"}
    # the toggles change guidance only, never the number of low-level calls
    assert len({r.report.ll_nfe_per_replan for r in rows}) == 1


def test_sweep_config_is_revalidated():
    run = tiny_config()
    swept = sweep_config(run, 3)
    assert (swept.planner.K, swept.planner.lambda_ll) == (3, 0.0)
    assert swept.planner.H == run.planner.H and swept.diffusion == run.diffusion
    assert run.planner.K == 2
    # attribute assignment skips validation; the swept copy must not
    run.planner.replan_every = run.planner.H
    with pytest.raises(ConfigError, match="replan_every"):
        sweep_config(run, 3)


def test_k_sweep_keeps_low_level(ctx, hdflow):
    (row,) = run_k_sweep(ctx, [1], base=hdflow)
    assert (row.name, row.group, row.K) == ("K=1", "k-sweep", 1)
    assert row.report.ll_nfe_per_replan == 8.0


def test_variants(ctx):
    rows = run_variants(ctx, ["fd"])
    assert [r.name for r in rows] == ["fd"]
    assert rows[0].report.ll_nfe_per_replan == 0.0


@pytest.mark.slow
def test_contrastive_ablation_retrains(ctx, demos, hdflow):
    ctx.demos = demos
    rows = run_components(ctx, ["no-contrastive"], base=hdflow)
    assert [r.name for r in rows] == ["hdflow", "no-contrastive"]


def test_result_csv(ctx):
    result = AblationResult([random_reference(ctx)])
    rows = list(csv.reader(result.to_csv().splitlines()))
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert rows[1][:4] == ["random", "reference", "2", "1"]
    assert float(rows[1][4]) == 0.0
    assert result.row("random").group == "reference"
    with pytest.raises(KeyError):
        result.row("hdflow")

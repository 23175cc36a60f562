import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from subgoal_planner.core.errors import DataError, MazeError
from subgoal_planner.core.linalg import RngStream
from subgoal_planner.core.maze import (
    MAZES,
    Action,
    Demonstration,
    EnvState,
    MazeSpec,
    bfs_distances,
    env_reset,
    env_step,
    generate_dataset,
    is_free,
    is_success,
    load_dataset,
    save_dataset,
    scripted_expert,
)


@pytest.fixture
def corridor():
    return MazeSpec.named("corridor5")


class TestMazeSpec:
    @pytest.mark.parametrize("maze_id", sorted(MAZES))
    def test_named_layouts_roundtrip(self, maze_id):
        spec = MazeSpec.named(maze_id)
        assert spec.layout() == list(MAZES[maze_id])
        again = MazeSpec.from_dict(spec.to_dict())
        assert again.layout() == spec.layout()
        assert again.start_cell == spec.start_cell

    def test_unknown_maze(self):
        with pytest.raises(MazeError, match="unknown maze"):
            MazeSpec.named("nowhere")

    def test_start_in_wall(self):
        with pytest.raises(MazeError):
            MazeSpec(np.array([[True, False]]), start_cell=(0, 0), goal_cell=(0, 1))

    def test_layout_needs_start(self):
        with pytest.raises(MazeError, match="start"):
            MazeSpec.from_layout(["..G"])

    def test_cell_center(self):
        spec = MazeSpec.named("open4", cell_size=2.0)
        assert_allclose(spec.cell_center((1, 2)), [5.0, 3.0])
        assert spec.step_size == pytest.approx(0.5)


class TestDynamics:
    def test_action_is_clipped(self):
        assert Action((1.7, -0.2)).velocity == (1.0, -0.2)
        assert Action.from_array([-3.0, 0.5]).velocity == (-1.0, 0.5)

    def test_free_step(self, corridor):
        state = env_step(corridor, EnvState((0.5, 0.5)), Action((1.0, 0.0)))
        assert state.position == pytest.approx((0.75, 0.5))
        assert state.t == 1

    def test_wall_truncates_move(self, corridor):
        state = env_step(corridor, EnvState((0.5, 0.1)), Action((0.0, -1.0)))
        assert 0.0 <= state.position[1] < 0.1
        assert is_free(corridor, *state.position)

    def test_moves_are_axis_separable(self):
        spec = MazeSpec.named("default8")
        # (3, 0) is free, (3, 1) is a wall: the x part is blocked, the y part still applies
        state = env_step(spec, EnvState((0.9, 3.5)), Action((1.0, 1.0)))
        assert state.position[0] <= 1.0
        assert state.position[1] == pytest.approx(3.75)

    def test_step_after_episode_end(self, corridor):
        with pytest.raises(MazeError, match="finished"):
            env_step(corridor, EnvState((0.5, 0.5), t=corridor.max_episode_length), Action((0, 0)))

    def test_success_radius(self, corridor):
        goal = np.array([4.5, 0.5])
        assert is_success(corridor, EnvState((4.25, 0.5)), goal)
        assert not is_success(corridor, EnvState((4.1, 0.5)), goal)

    @given(
        actions=st.lists(
            st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=40
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_agent_never_enters_walls(self, actions):
        spec = MazeSpec.named("default8")
        state = EnvState((0.5, 0.5))
        for a in actions:
            state = env_step(spec, state, Action(a))
            assert is_free(spec, *state.position)


class TestExpert:
    def test_bfs_corridor(self, corridor):
        assert bfs_distances(corridor, (0, 4)).tolist() == [[4, 3, 2, 1, 0]]

    def test_bfs_marks_walls(self):
        spec = MazeSpec.named("default8")
        dist = bfs_distances(spec, spec.goal_cell)
        assert dist[0, 3] == -1
        assert dist[spec.start_cell] > 0

    def test_expert_heads_for_goal(self, corridor):
        a = scripted_expert(corridor, EnvState((0.5, 0.5)), np.array([4.5, 0.5]))
        assert a.velocity == (1.0, 0.0)

    @pytest.mark.parametrize("level", ["low", "med"])
    def test_reset_stays_near_cells(self, corridor, level):
        spec = MazeSpec.named("corridor5", randomization=level)
        radius = {"low": 0.1, "med": 0.3}[level]
        state, goal = env_reset(spec, RngStream(5))
        assert np.linalg.norm(state.array() - spec.cell_center(spec.start_cell)) <= radius + 1e-12
        assert np.linalg.norm(goal - spec.cell_center(spec.goal_cell)) <= radius + 1e-12


class TestDataset:
    def test_labels_and_order(self, corridor):
        demos = generate_dataset(corridor, 2, 2, RngStream(0))
        assert [d.success for d in demos] == [True, True, False, False]
        for d in demos:
            final = EnvState(tuple(d.observations[-1]))
            assert is_success(corridor, final, d.goal) == d.success
            assert len(d.observations) == d.T + 1

    def test_deterministic(self, corridor):
        a = generate_dataset(corridor, 1, 1, RngStream(3))
        b = generate_dataset(corridor, 1, 1, RngStream(3))
        for x, y in zip(a, b):
            assert_allclose(x.observations, y.observations)

    def test_file_roundtrip(self, corridor, tmp_path):
        demos = generate_dataset(corridor, 1, 1, RngStream(1))
        spec, loaded = load_dataset(save_dataset(corridor, demos, tmp_path / "demos.jsonl"))
        assert spec.maze_id == "corridor5"
        assert [d.success for d in loaded] == [True, False]
        assert_allclose(loaded[0].actions, demos[0].actions)

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"format": "other"}) + "\n")
        with pytest.raises(DataError):
            load_dataset(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{nope\n")
        with pytest.raises(DataError):
            load_dataset(path)

    def test_observation_count_checked(self):
        with pytest.raises(DataError):
            Demonstration(np.zeros((3, 2)), np.zeros((3, 2)), True, np.zeros(2))

import numpy as np
import pytest

from envs import (
    Action,
    MazeEnv,
    PointMassConfig,
    PointMassEnv,
    discretize,
    load_bundled_maze,
    maze_distances,
    maze_load,
    maze_step,
    pointmass_reset,
    pointmass_step,
)
from errors import InvalidArgument, MazeParseError

BOX = ((-1000.0, 1000.0), (-1000.0, 1000.0))


def test_single_row_maze():
    m = maze_load("S.")
    assert (m.height, m.width, m.start, m.max_steps) == (1, 2, (0, 0), 700)


def test_maze_with_wall():
    m = maze_load("S#\n..")
    assert m.walls.tolist() == [[False, True], [False, False]]


@pytest.mark.parametrize(
    "text, line, column",
    [("SS", 1, 2), ("S.\n.", 2, 2), ("S.x", 1, 3), ("..\n..", 1, 1), ("", 1, 1)],
)
def test_parse_errors_report_position(text, line, column):
    with pytest.raises(MazeParseError) as exc:
        maze_load(text)
    assert (exc.value.line, exc.value.column) == (line, column)


def test_blocked_moves_are_noops():
    m = maze_load("S#\n..")
    assert maze_step(m, (0, 0), Action.RIGHT) == (0, 0)
    assert maze_step(m, (0, 0), Action.UP) == (0, 0)
    assert maze_step(m, (0, 0), Action.DOWN) == (1, 0)


def test_free_move_right():
    assert maze_step(maze_load("S."), (0, 0), Action.RIGHT) == (0, 1)


def test_step_from_wall_rejected():
    with pytest.raises(InvalidArgument):
        maze_step(maze_load("S#"), (0, 1), Action.LEFT)


def test_distances_flood_fill():
    m = maze_load("S..\n##.\n#..")
    assert maze_distances(m).tolist() == [[0, 1, 2], [-1, -1, 3], [-1, 5, 4]]


def test_unreachable_cells_marked():
    m = maze_load("S#.")
    assert maze_distances(m).tolist() == [[0, -1, -1]]


def test_bundled_maze_shape_and_reachability():
    m = load_bundled_maze()
    assert (m.height, m.width, m.start) == (20, 20, (0, 0))
    dist = maze_distances(m)
    assert np.all(dist[~m.walls] >= 0)
    assert dist.max() > 40


def test_random_walk_stays_on_reachable_cells(tiny_maze, rng):
    env = MazeEnv(tiny_maze)
    reachable = maze_distances(tiny_maze) >= 0
    env.reset(rng)
    for a in rng.integers(0, env.n_actions, size=500):
        env.step(int(a))
        assert reachable[env.cell]
        assert 0 <= env.state_id < env.n_states


def test_maze_coverage_position_lands_in_cell(tiny_maze):
    env = MazeEnv(tiny_maze)
    env.cell = (2, 3)
    cell = discretize(env.coverage_position, env.coverage_bounds, env.coverage_bins)
    assert cell == 2 * env.coverage_bins + 3


def test_zero_action_from_rest():
    cfg = PointMassConfig()
    w = pointmass_reset(cfg, np.random.default_rng(0))
    start = w.position.copy()
    assert np.array_equal(pointmass_step(w, [0.0, 0.0]), start)


def test_constant_thrust_moves_right():
    w = pointmass_reset(PointMassConfig(reset_noise=0.0), np.random.default_rng(0))
    xs = [pointmass_step(w, [1.0, 0.0])[0] for _ in range(50)]
    assert np.all(np.diff(xs) > 0)
    assert np.linalg.norm(w.velocity) <= 1.0 + 1e-12


def test_reset_within_noise(rng):
    cfg = PointMassConfig(reset_noise=0.1)
    for _ in range(200):
        w = pointmass_reset(cfg, rng)
        assert np.linalg.norm(w.position) <= 0.1
        assert np.array_equal(w.velocity, np.zeros(2))


def test_speed_bound_every_step(rng):
    w = pointmass_reset(PointMassConfig(), rng)
    for a in rng.uniform(-1, 1, size=(500, 2)):
        pointmass_step(w, a)
        assert np.linalg.norm(w.velocity) <= w.max_speed + 1e-12


def test_out_of_range_action_clamped_and_counted():
    w = pointmass_reset(PointMassConfig(reset_noise=0.0), np.random.default_rng(0))
    pointmass_step(w, [5.0, 0.0])
    assert w.clamped_actions == 1
    assert w.velocity[0] == pytest.approx(0.1)


def test_pointmass_determinism():
    def trajectory(seed):
        env = PointMassEnv(PointMassConfig())
        env.reset(np.random.default_rng(seed))
        out = []
        for a in list(range(env.n_actions)) * 20:
            env.step(a)
            out.append(env.state_point)
        return np.array(out)

    assert np.array_equal(trajectory(4), trajectory(4))


def test_discretize_center():
    assert discretize((0.0, 0.0), BOX, 100) == 5050


def test_discretize_clamps():
    assert discretize((-5000.0, -5000.0), BOX, 100) == 0
    assert discretize((5000.0, 5000.0), BOX, 100) == 99 * 100 + 99


def test_discretize_single_bin(rng):
    for p in rng.uniform(-2000, 2000, size=(20, 2)):
        assert discretize(p, BOX, 1) == 0


def test_discretize_degenerate_bounds():
    with pytest.raises(InvalidArgument):
        discretize((0.0, 0.0), ((1.0, 1.0), (0.0, 1.0)), 10)

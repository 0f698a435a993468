import numpy as np
import pytest

from envs import maze_load
from knn_graph import smooth_random_walk

TINY_MAZE = "S...\n.##.\n...."


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def walk_points(rng):
    return smooth_random_walk(300, 2, rng)


@pytest.fixture
def tiny_maze():
    return maze_load(TINY_MAZE, max_steps=20)

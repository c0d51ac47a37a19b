from __future__ import annotations

import numpy as np
import pytest

from delaypolicy.trajectory import Meta, Trajectory


def line_trajectory(n: int, dt: float = 1.0, d_s: int = 2, d_a: int = 1, seed: int = 0) -> Trajectory:
    """Random-walk demo obeying the delta-action convention on the first ``d_a`` coordinates."""
    rng = np.random.default_rng(seed)
    states = np.cumsum(rng.normal(size=(n + 1, d_s)), axis=0)
    return Trajectory.from_states(states, dt, d_a, Meta("toy", seed, 0))


@pytest.fixture
def make_traj():
    return line_trajectory


# A seconds-scale experiment config for the experiment and CLI tests.
TINY_CONFIG = """
[train]
steps = 40
batch_size = 32
warmup = 5
diffusion_steps = 8
width = 32
emb_dim = 8
cond_hidden = 8
log_every = 20

[experiment]
demos = 6
episodes = 3
eval_seeds = 0
q1_deltas = 0.0, 0.1
q2_deltas = 0.0, 0.05
q3_shift = 0.1
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG)
    return path


# Acceptance verdicts, one line per criterion, repeated in the terminal summary.
ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def verdict():
    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES[criterion] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.split()[0]), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

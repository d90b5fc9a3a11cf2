"""Small factories shared by the unit tests."""

from __future__ import annotations

import itertools

import pytest

from rlflow.core import RolloutGroup, RolloutTask, Trajectory, TrajectoryMeta, WorkflowSpec, reward_stats

_ids = itertools.count(1)

SOLO = WorkflowSpec("solo", (("solver", "A"),))


def make_traj(policy="A", version=1, reward=1.0, tokens=10, prompt_id=0, wf=SOLO) -> Trajectory:
    task = RolloutTask(f"task-{next(_ids)}", prompt_id, wf, {policy: version}, 0.0)
    meta = TrajectoryMeta(policy, version, 0.0, "t", (reward, reward, reward))
    return Trajectory(f"traj-{next(_ids)}", task, meta, reward, tokens)


def make_group(rewards, policy="A", version=1, prompt_id=0, tokens=10) -> RolloutGroup:
    task = RolloutTask(f"task-{next(_ids)}", prompt_id, SOLO, {policy: version}, 0.0)
    stats = reward_stats(rewards)
    members = tuple(
        Trajectory(f"traj-{next(_ids)}", task, TrajectoryMeta(policy, version, 0.0, "t", stats), float(r), tokens)
        for r in rewards
    )
    return RolloutGroup(prompt_id, policy, members)


@pytest.fixture
def group_factory():
    return make_group


# -- acceptance summary: one PASS/FAIL line per criterion -------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when == "teardown":
        return
    n, title = m.args
    ok = _CRITERIA.get(n, (title, True))[1]
    if rep.when == "call" or rep.failed:
        ok = ok and rep.passed
        _CRITERIA[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}: {title}")

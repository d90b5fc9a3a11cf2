import math

import pytest

from rlflow.core import (
    IdGenerator,
    ModelVersion,
    WorkflowSpec,
    derive_seed,
    group_is_zero_advantage,
    round_half_away,
    validate_workflow,
)
from rlflow.errors import DuplicateRole, InvalidArgument, UnknownPolicy

from conftest import make_group, make_traj


def test_zero_advantage_exact_equality():
    assert group_is_zero_advantage([1.0, 1.0, 1.0])
    assert group_is_zero_advantage([0.0] * 8)
    assert not group_is_zero_advantage([0.5, 0.5 + 1e-12])
    assert not group_is_zero_advantage(make_group([1.0, 0.0, 1.0]))
    assert group_is_zero_advantage(make_group([0.25]))


def test_zero_advantage_rejects_empty():
    with pytest.raises(InvalidArgument):
        group_is_zero_advantage([])


def test_validate_workflow():
    wf = WorkflowSpec("sv", (("solver", "A"), ("verifier", "B")))
    validate_workflow(wf, ["A", "B"])
    with pytest.raises(UnknownPolicy) as err:
        validate_workflow(wf, ["A"])
    assert err.value.role == "verifier"
    with pytest.raises(DuplicateRole):
        validate_workflow(WorkflowSpec("dup", (("r", "A"), ("r", "A"))), ["A"])


def test_workflow_policies_keep_role_order():
    wf = WorkflowSpec("w", (("a", "B"), ("b", "A"), ("c", "B")))
    assert wf.policies == ("B", "A")
    assert wf.assignment("a") == "terminal"


def test_workflow_rejects_bad_fields():
    with pytest.raises(InvalidArgument):
        WorkflowSpec("empty", ())
    with pytest.raises(InvalidArgument):
        WorkflowSpec("w", (("r", "A"),), max_retries=-1)
    with pytest.raises(InvalidArgument):
        WorkflowSpec("w", (("r", "A"),), reward_assignment={"r": "bogus"})


def test_trajectory_invariants():
    with pytest.raises(InvalidArgument):
        make_traj(tokens=0)
    with pytest.raises(InvalidArgument):
        make_traj(reward=math.nan)
    with pytest.raises(InvalidArgument):
        ModelVersion("A", -1)


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, -2.5, 2.4999)] == [1, 2, 3, -1, -3, 2]


def test_ids_and_seeds_are_stable():
    gen = IdGenerator()
    assert [gen.next("task"), gen.next("task"), gen.next("traj")] == ["task-1", "task-2", "traj-1"]
    assert derive_seed(1, "A", 3) == derive_seed(1, "A", 3)
    assert derive_seed(1, "A", 3) != derive_seed(1, "A", 4)
    # pinned so a silent change of hash construction is caught
    assert derive_seed("x") == int.from_bytes(__import__("hashlib").blake2b(b"x", digest_size=8).digest(), "little")

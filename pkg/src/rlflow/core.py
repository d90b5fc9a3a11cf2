"""Shared vocabulary: tasks, trajectories, groups, batches and workflows.

Everything here is an immutable value record. Behaviour is limited to
validation and a few derived statistics.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import DuplicateRole, InvalidArgument, UnknownPolicy

PolicyId = str

TERMINAL = "terminal"
PER_ROLE = "per_role"
REWARD_ASSIGNMENTS = (TERMINAL, PER_ROLE)


@dataclass(frozen=True)
class ModelVersion:
    policy: PolicyId
    version: int

    def __post_init__(self):
        if self.version < 0:
            raise InvalidArgument(f"negative version {self.version}")


@dataclass(frozen=True)
class WorkflowSpec:
    """Ordered roles, each filled by one policy.

    ``reward_assignment`` maps role name to ``"terminal"`` (every role
    receives the task's final outcome) or ``"per_role"`` (each role is
    scored on its own output).
    """

    name: str
    roles: tuple[tuple[str, PolicyId], ...]
    max_retries: int = 0
    reward_assignment: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.roles:
            raise InvalidArgument(f"workflow {self.name!r} has no roles")
        if self.max_retries < 0:
            raise InvalidArgument("max_retries must be non-negative")
        for role, tag in self.reward_assignment.items():
            if tag not in REWARD_ASSIGNMENTS:
                raise InvalidArgument(f"reward assignment for {role!r} must be one of {REWARD_ASSIGNMENTS}")

    @property
    def policies(self) -> tuple[PolicyId, ...]:
        seen = []
        for _, pol in self.roles:
            if pol not in seen:
                seen.append(pol)
        return tuple(seen)

    def assignment(self, role: str) -> str:
        return self.reward_assignment.get(role, TERMINAL)


@dataclass(frozen=True)
class RolloutTask:
    task_id: str
    prompt_id: int
    workflow: WorkflowSpec
    submit_version: Mapping[PolicyId, int]
    issue_time: float


@dataclass(frozen=True)
class TrajectoryMeta:
    producing_policy: PolicyId
    produced_at_version: int
    produced_time: float
    task_type: str
    reward_stats: tuple[float, float, float]  # (min, max, mean) over the group


@dataclass(frozen=True)
class Trajectory:
    traj_id: str
    task: RolloutTask
    meta: TrajectoryMeta
    reward: float
    payload_tokens: int

    def __post_init__(self):
        if self.payload_tokens < 1:
            raise InvalidArgument("payload_tokens must be >= 1")
        if not math.isfinite(self.reward):
            raise InvalidArgument("reward must be finite")

    @property
    def policy(self) -> PolicyId:
        return self.meta.producing_policy

    @property
    def version(self) -> int:
        return self.meta.produced_at_version


@dataclass(frozen=True)
class RolloutGroup:
    prompt_id: int
    policy: PolicyId
    members: tuple[Trajectory, ...]

    def __post_init__(self):
        for t in self.members:
            if t.task.prompt_id != self.prompt_id or t.policy != self.policy:
                raise InvalidArgument("group members must share prompt_id and policy")

    def __len__(self):
        return len(self.members)

    @property
    def rewards(self) -> list[float]:
        return [t.reward for t in self.members]


@dataclass(frozen=True)
class TrainingBatch:
    trainer: PolicyId
    members: tuple[Trajectory, ...]
    fresh_count: int
    replay_count: int
    assembled_at_version: int

    def __post_init__(self):
        if self.fresh_count + self.replay_count != len(self.members):
            raise InvalidArgument("fresh_count + replay_count must equal batch size")

    @property
    def tokens(self) -> int:
        return sum(t.payload_tokens for t in self.members)


def group_is_zero_advantage(group: RolloutGroup | Sequence[float]) -> bool:
    """True iff every reward in the group is exactly equal.

    Accepts a group or a bare reward sequence. No tolerance is applied:
    ``[0.5, 0.5 + 1e-12]`` is *not* zero-advantage.
    """
    rewards = group.rewards if isinstance(group, RolloutGroup) else list(group)
    if not rewards:
        raise InvalidArgument("empty group")
    first = rewards[0]
    return all(r == first for r in rewards)


def reward_stats(rewards: Sequence[float]) -> tuple[float, float, float]:
    return (min(rewards), max(rewards), sum(rewards) / len(rewards))


def validate_workflow(spec: WorkflowSpec, declared_policies: Iterable[PolicyId]) -> None:
    """Raise if a role names an undeclared policy or role names repeat."""
    declared = set(declared_policies)
    names = set()
    for role, policy in spec.roles:
        if role in names:
            raise DuplicateRole(role)
        names.add(role)
        if policy not in declared:
            raise UnknownPolicy(role, policy)


class IdGenerator:
    """Deterministic ``<kind>-<counter>`` identifiers."""

    def __init__(self):
        self._counters: dict[str, itertools.count] = {}

    def next(self, kind: str) -> str:
        counter = self._counters.setdefault(kind, itertools.count(1))
        return f"{kind}-{next(counter)}"


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero (Python's round() is banker's)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")

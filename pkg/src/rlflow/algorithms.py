"""Data-path hooks: pre-rollout curators, post-rollout filters, batch composers.

The dataflow layer calls these at three points:

* ``Curator.admit`` before a prompt is turned into a rollout task,
* ``PostFilter.keep`` when a finished group arrives,
* ``BatchComposer.compose`` when a trainer asks for a batch.

Registered names (used by scenario files): curators ``keep_all`` and
``greso``; post-filters ``keep_all`` and ``zero_adv``; composers
``fresh_only`` and ``replay``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import RolloutGroup, Trajectory, group_is_zero_advantage, round_half_away
from .errors import InvalidArgument

EASY = "easy"
HARD = "hard"
UNSEEN = "unseen"

# -- GRESO selective rollout ----------------------------------------------


@dataclass(frozen=True)
class GresoConfig:
    p_init_easy: float = 0.5
    p_init_hard: float = 0.5
    alpha_easy: float = 0.083
    alpha_hard: float = 0.167
    delta_p: float = 0.01
    floor_easy: float = 0.05
    floor_hard: float = 0.30
    correctness_threshold: float = 0.5

    def __post_init__(self):
        probs = (self.p_init_easy, self.p_init_hard, self.alpha_easy, self.alpha_hard,
                 self.delta_p, self.floor_easy, self.floor_hard)
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise InvalidArgument("GRESO probabilities must lie in [0, 1]")
        if self.floor_easy > self.p_init_easy or self.floor_hard > self.p_init_hard:
            raise InvalidArgument("GRESO floors must not exceed initial probabilities")

    def floor(self, bucket: str) -> float:
        return self.floor_easy if bucket == EASY else self.floor_hard

    def target(self, bucket: str) -> float:
        return self.alpha_easy if bucket == EASY else self.alpha_hard

    def p_init(self, bucket: str) -> float:
        return self.p_init_easy if bucket == EASY else self.p_init_hard


@dataclass(frozen=True)
class GresoPromptState:
    prompt_id: int
    bucket: str = UNSEEN
    submit_prob: float = 1.0
    groups_seen: int = 0
    zero_var_seen: int = 0
    mean_correctness: float = 0.0

    @property
    def zero_variance_ratio(self) -> float:
        return self.zero_var_seen / self.groups_seen if self.groups_seen else 0.0


def greso_should_submit(state: GresoPromptState, uniform_draw: float) -> bool:
    if state.bucket == UNSEEN:
        return True
    return uniform_draw < state.submit_prob


def greso_update(state: GresoPromptState, group: RolloutGroup | Sequence[float],
                 cfg: GresoConfig = GresoConfig()) -> GresoPromptState:
    """Fold one group outcome into the prompt's state.

    The zero-variance ratio is the prompt's empirical ratio over its whole
    history. Above the bucket target the submit probability steps down by
    ``delta_p``, below it steps up; the result is clamped to
    ``[floor(bucket), 1]``.
    """
    rewards = group.rewards if isinstance(group, RolloutGroup) else list(group)
    n = state.groups_seen + 1
    zero_var = state.zero_var_seen + int(group_is_zero_advantage(rewards))
    mean = state.mean_correctness + (sum(rewards) / len(rewards) - state.mean_correctness) / n
    bucket = EASY if mean >= cfg.correctness_threshold else HARD

    p = cfg.p_init(bucket) if state.bucket == UNSEEN else state.submit_prob
    ratio = zero_var / n
    alpha = cfg.target(bucket)
    if ratio > alpha:
        p -= cfg.delta_p
    elif ratio < alpha:
        p += cfg.delta_p
    p = min(1.0, max(cfg.floor(bucket), p))
    return GresoPromptState(state.prompt_id, bucket, p, n, zero_var, mean)


class Curator:
    name = "keep_all"

    def admit(self, prompt_id: int, rng: np.random.Generator) -> bool:
        return True

    def observe(self, group: RolloutGroup) -> None:
        pass


KeepAllCurator = Curator


class GresoCurator(Curator):
    name = "greso"

    def __init__(self, cfg: GresoConfig | None = None):
        self.cfg = cfg or GresoConfig()
        self.states: dict[int, GresoPromptState] = {}

    def state(self, prompt_id: int) -> GresoPromptState:
        return self.states.get(prompt_id) or GresoPromptState(prompt_id)

    def admit(self, prompt_id, rng):
        st = self.state(prompt_id)
        if st.bucket == UNSEEN:
            return True
        return greso_should_submit(st, float(rng.random()))

    def observe(self, group):
        self.states[group.prompt_id] = greso_update(self.state(group.prompt_id), group, self.cfg)


class NeverCurator(Curator):
    """Admits nothing; only useful for exercising degenerate paths."""

    name = "never"

    def admit(self, prompt_id, rng):
        return False


# -- post-rollout filters -------------------------------------------------


def post_filter_zero_adv(group: RolloutGroup) -> str:
    return "drop" if group_is_zero_advantage(group) else "keep"


class PostFilter:
    name = "keep_all"

    def keep(self, group: RolloutGroup) -> bool:
        return True


KeepAllFilter = PostFilter


class ZeroAdvantageFilter(PostFilter):
    name = "zero_adv"

    def keep(self, group):
        return post_filter_zero_adv(group) == "keep"


# -- replay ---------------------------------------------------------------


@dataclass(frozen=True)
class ReplayConfig:
    pool_capacity: int = 10_000
    max_staleness: int = 8
    replay_ratio: float = 0.0

    def __post_init__(self):
        if self.pool_capacity < 1:
            raise InvalidArgument("pool_capacity must be >= 1")
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise InvalidArgument("replay_ratio must lie in [0, 1]")
        if self.max_staleness < 0:
            raise InvalidArgument("max_staleness must be >= 0")


class ReplayPool:
    """Bounded pool of consumed trajectories, evicting oldest-admitted first."""

    def __init__(self, capacity: int = 10_000, max_staleness: int = 8):
        if capacity < 1:
            raise InvalidArgument("capacity must be >= 1")
        self.capacity = capacity
        self.max_staleness = max_staleness
        self.entries: deque[tuple[Trajectory, int]] = deque()
        self.evicted_stale = 0

    def __len__(self):
        return len(self.entries)

    def evict_stale(self, trainer_version: int) -> int:
        before = len(self.entries)
        self.entries = deque(e for e in self.entries if trainer_version - e[1] <= self.max_staleness)
        dropped = before - len(self.entries)
        self.evicted_stale += dropped
        return dropped


def replay_admit(pool: ReplayPool, traj: Trajectory, trainer_version: int) -> None:
    # age is measured from the version that generated the trajectory, not from admission
    pool.entries.append((traj, min(traj.version, trainer_version)))
    while len(pool.entries) > pool.capacity:
        pool.entries.popleft()


def replay_serve(pool: ReplayPool, k: int, trainer_version: int,
                 rng: np.random.Generator | None = None) -> list[Trajectory]:
    """Evict stale entries, then sample up to ``k`` without replacement.

    Served entries stay in the pool.
    """
    if k < 0:
        raise InvalidArgument("k must be >= 0")
    pool.evict_stale(trainer_version)
    if k == 0 or not pool.entries:
        return []
    k = min(k, len(pool.entries))
    rng = rng if rng is not None else np.random.default_rng(0)
    picks = rng.choice(len(pool.entries), size=k, replace=False)
    return [pool.entries[int(i)][0] for i in sorted(picks)]


def compose_batch(fresh_available: int | Sequence, pool: ReplayPool | int, cfg: ReplayConfig,
                  batch_size: int) -> tuple[int, int] | None:
    """Split ``batch_size`` between fresh and replayed members.

    Returns ``(fresh_take, replay_take)`` or ``None`` (not-ready) when the
    two sources together cannot fill the batch. A replay shortfall is
    made up from fresh data.
    """
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    n_fresh = fresh_available if isinstance(fresh_available, int) else len(fresh_available)
    n_pool = pool if isinstance(pool, int) else len(pool)
    replay_take = min(round_half_away(cfg.replay_ratio * batch_size), n_pool)
    fresh_take = min(batch_size - replay_take, n_fresh)
    if fresh_take + replay_take < batch_size:
        return None
    return fresh_take, replay_take


class BatchComposer:
    """Fresh-only composition: the batch is ``batch_size`` fresh members."""

    name = "fresh_only"

    def compose(self, fresh_available: int, batch_size: int, trainer_version: int):
        return (batch_size, 0) if fresh_available >= batch_size else None

    def serve(self, k: int, trainer_version: int, rng) -> list[Trajectory]:
        return []

    def admit(self, members: Sequence[Trajectory], trainer_version: int) -> None:
        pass


FreshOnlyComposer = BatchComposer


class ReplayComposer(BatchComposer):
    name = "replay"

    def __init__(self, cfg: ReplayConfig | None = None):
        self.cfg = cfg or ReplayConfig()
        self.pool = ReplayPool(self.cfg.pool_capacity, self.cfg.max_staleness)

    def compose(self, fresh_available, batch_size, trainer_version):
        self.pool.evict_stale(trainer_version)
        return compose_batch(fresh_available, self.pool, self.cfg, batch_size)

    def serve(self, k, trainer_version, rng):
        return replay_serve(self.pool, k, trainer_version, rng)

    def admit(self, members, trainer_version):
        for t in members:
            replay_admit(self.pool, t, trainer_version)


def make_curator(name: str, **kwargs) -> Curator:
    if name == "keep_all":
        return Curator()
    if name == "greso":
        return GresoCurator(GresoConfig(**kwargs))
    if name == "never":
        return NeverCurator()
    raise InvalidArgument(f"unknown curator {name!r}")


def make_post_filter(name: str) -> PostFilter:
    if name == "keep_all":
        return PostFilter()
    if name == "zero_adv":
        return ZeroAdvantageFilter()
    raise InvalidArgument(f"unknown post_filter {name!r}")


def make_composer(name: str, **kwargs) -> BatchComposer:
    if name == "fresh_only":
        return BatchComposer()
    if name == "replay":
        return ReplayComposer(ReplayConfig(**kwargs))
    raise InvalidArgument(f"unknown composer {name!r}")

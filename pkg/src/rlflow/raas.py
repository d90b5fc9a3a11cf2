"""Simulated Rollout-as-a-Service instances.

An instance consumes tasks from the dataflow layer, "generates" groups
after a modelled delay, pushes them back, and refreshes its weights by
pulling from the weight store. Generation is synthetic: token counts
come from a configured distribution and rewards are Bernoulli draws
against a per-prompt success probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import (
    PER_ROLE,
    RolloutGroup,
    RolloutTask,
    Trajectory,
    TrajectoryMeta,
    derive_seed,
    reward_stats,
)
from .errors import EmptyWindow, InvalidArgument
from .weights import (
    UP_TO_DATE,
    LinkModel,
    WeightSnapshot,
    WeightStore,
    apply_update,
    transfer_time,
    update_bytes,
)


@dataclass(frozen=True)
class TokenDistribution:
    """``constant(value)``, ``uniform(lo, hi)`` or ``lognormal(mu, sigma)``; draws are >= 1."""

    kind: str = "constant"
    value: float = 256
    lo: float = 1
    hi: float = 1
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise InvalidArgument(f"unknown token distribution {self.kind!r}")
        if self.kind == "uniform" and not 1 <= self.lo <= self.hi:
            raise InvalidArgument("uniform token distribution needs 1 <= lo <= hi")

    def draw(self, rng: np.random.Generator, shift: float = 0.0) -> int:
        if self.kind == "constant":
            x = self.value
        elif self.kind == "uniform":
            x = rng.uniform(self.lo, self.hi)
        else:
            x = rng.lognormal(self.mu, self.sigma)
        return max(1, int(round(x + shift)))


@dataclass(frozen=True)
class RolloutModel:
    tokens: TokenDistribution = TokenDistribution()
    role_tokens: Mapping[str, TokenDistribution] = field(default_factory=dict)
    growth_per_version: float = 0.0  # extra tokens per trajectory per trainer version
    group_size: int = 8
    verifier_noise: float = 0.0
    success: tuple[float, ...] = (0.5,)  # per-prompt success probability, indexed modulo length

    @classmethod
    def with_prompt_table(cls, n_prompts: int, seed: int, alpha: float = 1.0, beta: float = 1.0, **kw):
        rng = np.random.default_rng(derive_seed(seed, "prompt-table"))
        table = tuple(float(p) for p in rng.beta(alpha, beta, size=n_prompts))
        return cls(success=table, **kw)

    def success_prob(self, prompt_id: int) -> float:
        return self.success[prompt_id % len(self.success)]

    def dist(self, role: str) -> TokenDistribution:
        return self.role_tokens.get(role, self.tokens)


@dataclass(frozen=True)
class RaasInstanceSpec:
    uid: str
    gpus: int = 4
    throughput_share: float = 1.0
    base_tokens_per_sec_per_gpu: float = 1000.0
    link: LinkModel = LinkModel(1e11, 0.0)
    reload_seconds: float = 5.0
    refresh_every: int = 1
    workflow: str = ""
    slots: int = 1

    def __post_init__(self):
        if self.gpus < 1 or self.slots < 1 or self.refresh_every < 1:
            raise InvalidArgument("gpus, slots and refresh_every must be positive")
        if not 0 < self.throughput_share <= 1:
            raise InvalidArgument("throughput_share must lie in (0, 1]")
        if self.base_tokens_per_sec_per_gpu <= 0 or self.reload_seconds < 0:
            raise InvalidArgument("rate must be positive and reload non-negative")

    @property
    def tokens_per_sec(self) -> float:
        return self.gpus * self.base_tokens_per_sec_per_gpu * self.throughput_share


@dataclass(frozen=True)
class PullRecord:
    policy: str
    from_version: int
    to_version: int
    mode: str  # "full" | "delta"
    wire_bytes: int
    transfer_bytes: float  # after payload scaling
    seconds: float


@dataclass(frozen=True)
class Refresh:
    uid: str
    start: float
    transfer_seconds: float
    reload_seconds: float
    pulls: tuple[PullRecord, ...]

    @property
    def downtime(self) -> float:
        return self.transfer_seconds + self.reload_seconds

    @property
    def transfer_end(self) -> float:
        return self.start + self.transfer_seconds

    @property
    def end(self) -> float:
        return self.start + self.downtime


@dataclass(frozen=True)
class Generation:
    uid: str
    task: RolloutTask
    start: float
    duration: float
    groups: tuple[RolloutGroup, ...]
    attempts: int
    tokens: int

    @property
    def end(self) -> float:
        return self.start + self.duration


class RaasInstance:
    """One rollout service. Driven by :meth:`service_step` and :meth:`complete`."""

    def __init__(self, spec: RaasInstanceSpec, model: RolloutModel, seed: int = 0,
                 payload_scale: Mapping[str, float] | None = None):
        self.spec = spec
        self.model = model
        self.rng = np.random.default_rng(derive_seed(seed, "raas", spec.uid))
        self.payload_scale = dict(payload_scale or {})
        self.versions: dict[str, int] = {}
        self.weights: dict[str, WeightSnapshot] = {}
        self._pending: dict[str, WeightSnapshot] | None = None
        self.refreshing: Refresh | None = None
        self.inflight = 0
        self.retired = False
        self.produced = 0
        self.busy_seconds = 0.0  # time spent generating
        self.produced_log: list[tuple[float, int]] = []  # (time, trajectories)
        self.refresh_log: list[Refresh] = []
        self._traj_counter = 0

    @property
    def uid(self) -> str:
        return self.spec.uid

    def version(self, policy: str) -> int:
        return self.versions.get(policy, 0)

    def refresh_due(self, workflow_policies, store: WeightStore) -> list[str]:
        return [p for p in workflow_policies
                if store.latest_version(p) - self.version(p) >= self.spec.refresh_every]

    # -- refresh -----------------------------------------------------------

    def begin_refresh(self, store: WeightStore, policies, now: float) -> Refresh:
        pulls, pending = [], {}
        for p in policies:
            have = self.version(p)
            upd = store.pull_update(p, have)
            if upd is UP_TO_DATE:
                continue
            snap = apply_update(self.weights.get(p), upd)
            wire = update_bytes(upd)
            scaled = wire * self.payload_scale.get(p, 1.0)
            secs = transfer_time(scaled, self.spec.link)
            mode = "delta" if isinstance(upd, list) else "full"
            pulls.append(PullRecord(p, have, snap.version, mode, wire, scaled, secs))
            pending[p] = snap
        ref = Refresh(self.uid, now, sum(r.seconds for r in pulls), self.spec.reload_seconds, tuple(pulls))
        self._pending = pending
        self.refreshing = ref
        self.refresh_log.append(ref)
        return ref

    def finish_refresh(self) -> None:
        for p, snap in (self._pending or {}).items():
            self.weights[p] = snap
            self.versions[p] = snap.version
        self._pending = None
        self.refreshing = None

    def transfer_active(self, now: float) -> bool:
        return self.refreshing is not None and now < self.refreshing.transfer_end

    # -- generation --------------------------------------------------------

    def _traj_id(self) -> str:
        self._traj_counter += 1
        return f"traj-{self.uid}-{self._traj_counter}"

    def execute(self, task: RolloutTask, now: float) -> Generation:
        """Run the task's workflow: roles in order, retrying on rejection."""
        wf = task.workflow
        m = self.model
        G = m.group_size
        p_success = m.success_prob(task.prompt_id)
        roles = wf.roles
        attempts = []  # per attempt: list of (role, policy, tokens[], judgement or correctness[])
        while True:
            gen_role, gen_policy = roles[0]
            shift = m.growth_per_version * task.submit_version.get(gen_policy, 0)
            toks = [m.dist(gen_role).draw(self.rng, shift) for _ in range(G)]
            correct = [bool(self.rng.random() < p_success) for _ in range(G)]
            attempt = [(gen_role, gen_policy, toks, correct)]
            accepted = True
            for role, policy in roles[1:]:
                shift = m.growth_per_version * task.submit_version.get(policy, 0)
                jt = [m.dist(role).draw(self.rng, shift) for _ in range(G)]
                flips = [bool(self.rng.random() < m.verifier_noise) for _ in range(G)]
                verdict = [c != f for c, f in zip(correct, flips)]
                attempt.append((role, policy, jt, verdict))
                if 2 * sum(verdict) < G:
                    accepted = False
            attempts.append(attempt)
            if accepted or len(attempts) > wf.max_retries:
                break

        final_correct = attempts[-1][0][3]
        total_tokens = sum(sum(r[2]) for a in attempts for r in a)
        duration = total_tokens / self.spec.tokens_per_sec
        end = now + duration
        groups = []
        for attempt in attempts:
            correct = attempt[0][3]
            for i, (role, policy, toks, outcome) in enumerate(attempt):
                if wf.assignment(role) == PER_ROLE:
                    if i == 0:
                        rewards = [1.0 if c else 0.0 for c in outcome]
                    else:
                        rewards = [1.0 if v == c else 0.0 for v, c in zip(outcome, correct)]
                else:
                    rewards = [1.0 if c else 0.0 for c in final_correct]
                stats = reward_stats(rewards)
                meta = TrajectoryMeta(policy, self.version(policy), end, f"{wf.name}/{role}", stats)
                members = tuple(Trajectory(self._traj_id(), task, meta, r, t) for r, t in zip(rewards, toks))
                groups.append(RolloutGroup(task.prompt_id, policy, members))
        return Generation(self.uid, task, now, duration, tuple(groups), len(attempts), total_tokens)

    def service_step(self, dataflow, store: WeightStore, now: float) -> list:
        """One scheduling decision: refresh, pull-and-generate, or nothing.

        Returns a list holding a :class:`Refresh` or one :class:`Generation`
        per task pulled; the caller completes them at their end times.
        """
        if self.retired or self.refreshing is not None:
            return []
        wf = dataflow.workflows[dataflow.raas[self.uid].workflow]
        due = self.refresh_due(wf.policies, store)
        if due:
            if self.inflight:
                return []  # drain in-flight groups before swapping weights
            return [self.begin_refresh(store, due, now)]
        free = self.spec.slots - self.inflight
        if free <= 0:
            return []
        out = []
        for task in dataflow.next_rollout_tasks(self.uid, free, now):
            out.append(self.execute(task, now))
            self.inflight += 1
        return out

    def complete(self, gen: Generation, dataflow, now: float) -> list:
        self.inflight -= 1
        self.busy_seconds += gen.duration
        results = [dataflow.ingest_trajectory_group(g, now, self.uid) for g in gen.groups]
        n = sum(len(g) for g in gen.groups)
        self.produced += n
        self.produced_log.append((now, n))
        return results


def fleet_throughput_report(instances, t_start: float, t_end: float) -> dict[str, int]:
    """Trajectories produced per instance with completion time in ``(t_start, t_end]``."""
    if not t_end > t_start:
        raise EmptyWindow("window must have positive length")
    return {inst.uid: sum(n for t, n in inst.produced_log if t_start < t <= t_end) for inst in instances}

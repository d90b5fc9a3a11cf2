"""The coordination plane between rollout services and trainers.

RaaS instances pull tasks and push finished groups; trainers pull
batches. The layer owns the per-trainer trajectory buffers, the routing
table, staleness enforcement, backpressure, and the production /
consumption accounting read by the autoscaler.

Every public method takes the layer's lock for its whole duration, so the
object can be shared between threads.
"""

from __future__ import annotations

import threading
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .algorithms import BatchComposer, Curator, PostFilter
from .core import IdGenerator, PolicyId, RolloutGroup, RolloutTask, TrainingBatch, WorkflowSpec
from .errors import (
    DuplicateRaas,
    EmptyWindow,
    InvalidArgument,
    ScenarioValidationError,
    UnknownRaas,
    UnknownTrainer,
    UnregisteredWorkflow,
)

EXCLUSIVE = "exclusive"
SHARED = "shared"
MIXED = "mixed"
ROUTING_MODES = (EXCLUSIVE, SHARED, MIXED)

HEALTHY = "healthy"
SUSPECT = "suspect"
SUSPECT_ACCEPT_RATE = 0.5


class NotReady:
    def __repr__(self):
        return "NOT_READY"

    def __bool__(self):
        return False


NOT_READY = NotReady()


@dataclass(frozen=True)
class Route:
    consumers: tuple[PolicyId, ...]
    mode: str = EXCLUSIVE


class RoutingTable:
    """Producing policy -> consuming trainers."""

    def __init__(self, routes: Mapping[PolicyId, Route | Iterable[PolicyId]]):
        self.routes: dict[PolicyId, Route] = {}
        for producer, route in routes.items():
            if not isinstance(route, Route):
                consumers = tuple(route)
                route = Route(consumers, EXCLUSIVE if len(consumers) == 1 else SHARED)
            if route.mode not in ROUTING_MODES:
                raise InvalidArgument(f"routing mode {route.mode!r} not in {ROUTING_MODES}")
            self.routes[producer] = route

    @classmethod
    def identity(cls, policies: Iterable[PolicyId]) -> "RoutingTable":
        return cls({p: Route((p,), EXCLUSIVE) for p in policies})

    def consumers(self, producer: PolicyId) -> tuple[PolicyId, ...]:
        route = self.routes.get(producer)
        return route.consumers if route else ()

    def routes_to(self, producer: PolicyId, trainer: PolicyId) -> bool:
        return trainer in self.consumers(producer)

    def validate(self, trainers: Iterable[PolicyId]) -> None:
        consumed = {c for r in self.routes.values() for c in r.consumers}
        for t in trainers:
            if t not in consumed:
                raise ScenarioValidationError("routing-coverage", f"trainer {t!r} consumes no producer")


@dataclass(frozen=True)
class StalenessPolicy:
    max_version_gap: int = 8

    def __post_init__(self):
        if self.max_version_gap < 0:
            raise InvalidArgument("max_version_gap must be >= 0")

    def usable(self, trainer_version: int, produced_at_version: int) -> bool:
        return trainer_version - produced_at_version <= self.max_version_gap


@dataclass(frozen=True)
class BufferConfig:
    capacity: Mapping[PolicyId, int] = field(default_factory=dict)
    backpressure_high_watermark: float = 0.9
    default_capacity_factor: int = 4

    def __post_init__(self):
        if not 0.0 < self.backpressure_high_watermark <= 1.0:
            raise InvalidArgument("watermark must lie in (0, 1]")
        if any(c < 1 for c in self.capacity.values()):
            raise InvalidArgument("buffer capacities must be positive")


@dataclass(frozen=True)
class IngestResult:
    accepted: int
    rejected: int
    reason: str = ""


@dataclass(frozen=True)
class LayoutRow:
    uid: str
    gpus: int
    produced: int
    accepted: int
    accept_rate: float
    throughput_per_gpu: float
    status: str


@dataclass(frozen=True)
class BalanceWindow:
    n_iterations: int
    wall_time_sec: float
    eval_time_sec: float
    training_time_sec: float
    avg_step_time_sec: float
    avg_batch_wait_sec: float
    wait_fraction: float
    total_raas_gpus: int
    produced: int
    entered: int
    consumed: int
    stale_skipped: int
    layout: tuple[LayoutRow, ...] = ()
    t_start: float = 0.0
    t_end: float = 0.0

    @property
    def accept_rate(self) -> float:
        return self.entered / self.produced if self.produced else 0.0

    @property
    def stale_rate(self) -> float:
        return self.stale_skipped / self.entered if self.entered else 0.0

    @property
    def throughput_per_gpu(self) -> float:
        return self.entered / self.total_raas_gpus if self.total_raas_gpus else 0.0

    @property
    def produce_consume_ratio(self) -> float:
        return self.entered / self.consumed if self.consumed else 0.0


@dataclass(frozen=True)
class StepEvent:
    trainer: PolicyId
    version: int
    time: float  # end of the iteration
    wait_seconds: float
    compute_seconds: float

    @property
    def step_seconds(self) -> float:
        """Wall time of the iteration: waiting for the batch plus computing on it."""
        return self.wait_seconds + self.compute_seconds


@dataclass
class _RaasEntry:
    uid: str
    gpus: int
    workflow: str
    available: bool = True
    produced: int = 0
    accepted: int = 0


@dataclass
class _TrainerEntry:
    policy: PolicyId
    composer: BatchComposer
    capacity: int
    buffer: deque = field(default_factory=deque)  # (seq, Trajectory)
    consumed: int = 0
    replayed: int = 0
    stale_skipped: int = 0
    entered: int = 0
    wait_seconds: float = 0.0
    step_seconds: float = 0.0


@dataclass
class PolicyCounters:
    produced: int = 0
    accepted: int = 0
    rejected: int = 0


class PromptStream:
    """Cycles through prompt ids ``0..count-1`` in order."""

    def __init__(self, count: int):
        if count < 1:
            raise InvalidArgument("prompt count must be >= 1")
        self.count = count
        self.cursor = 0

    def next(self) -> int:
        pid = self.cursor % self.count
        self.cursor += 1
        return pid


class DataflowLayer:
    def __init__(
        self,
        routing: RoutingTable,
        staleness: StalenessPolicy | None = None,
        buffers: BufferConfig | None = None,
        curator: Curator | None = None,
        post_filter: PostFilter | None = None,
        prompts: PromptStream | None = None,
        latest_versions=None,
        rng: np.random.Generator | None = None,
        fresher_first: bool = False,
    ):
        self.routing = routing
        self.staleness = staleness or StalenessPolicy()
        self.buffers = buffers or BufferConfig()
        self.curator = curator or Curator()
        self.post_filter = post_filter or PostFilter()
        self.prompts = prompts or PromptStream(1_000_000)
        # callable PolicyId -> latest published version; usually WeightStore.latest_version
        self.latest_versions = latest_versions or (lambda policy: 0)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.fresher_first = fresher_first

        self._lock = threading.RLock()
        self._ids = IdGenerator()
        self._seq = 0
        self.workflows: dict[str, WorkflowSpec] = {}
        self.raas: "OrderedDict[str, _RaasEntry]" = OrderedDict()
        self.retired: dict[str, _RaasEntry] = {}
        self.trainers: dict[PolicyId, _TrainerEntry] = {}
        self.policy_counters: dict[PolicyId, PolicyCounters] = {}
        # raw logs: windows and oracles recompute from these
        self.production_log: list[tuple[float, str, int, int]] = []  # (t, uid, produced, accepted)
        self.consumption_log: list[tuple[float, PolicyId, int, int]] = []  # (t, trainer, consumed, stale)
        self.step_log: list[StepEvent] = []

    # -- registration ----------------------------------------------------

    def register_workflow(self, spec: WorkflowSpec) -> None:
        with self._lock:
            self.workflows[spec.name] = spec

    def register_trainer(self, policy: PolicyId, batch_size: int, composer: BatchComposer | None = None,
                         capacity: int | None = None) -> None:
        with self._lock:
            if capacity is None:
                capacity = self.buffers.capacity.get(policy, self.buffers.default_capacity_factor * batch_size)
            self.trainers[policy] = _TrainerEntry(policy, composer or BatchComposer(), capacity)

    def register_raas(self, uid: str, gpus: int, workflow: str | None = None) -> None:
        with self._lock:
            if uid in self.raas or uid in self.retired:
                raise DuplicateRaas(f"duplicate-uid({uid})")
            if gpus < 1:
                raise InvalidArgument("gpus must be >= 1")
            if workflow is None and len(self.workflows) == 1:
                workflow = next(iter(self.workflows))
            self.raas[uid] = _RaasEntry(uid, gpus, workflow or "")

    def mark_unavailable(self, uid: str) -> None:
        with self._lock:
            self._raas(uid).available = False

    def mark_available(self, uid: str) -> None:
        with self._lock:
            self._raas(uid).available = True

    def retire_raas(self, uid: str) -> None:
        with self._lock:
            self.retired[uid] = self.raas.pop(self._raas(uid).uid)

    def total_raas_gpus(self) -> int:
        with self._lock:
            return sum(e.gpus for e in self.raas.values())

    def _raas(self, uid: str) -> _RaasEntry:
        try:
            return self.raas[uid]
        except KeyError:
            raise UnknownRaas(uid) from None

    def _trainer(self, policy: PolicyId) -> _TrainerEntry:
        try:
            return self.trainers[policy]
        except KeyError:
            raise UnknownTrainer(policy) from None

    def _targets(self, producer: PolicyId) -> list[_TrainerEntry]:
        return [self.trainers[c] for c in self.routing.consumers(producer) if c in self.trainers]

    # -- rollout side ------------------------------------------------------

    def buffer_fill(self, trainer: PolicyId) -> float:
        with self._lock:
            t = self._trainer(trainer)
            return len(t.buffer) / t.capacity

    def next_rollout_tasks(self, raas_uid: str, max_n: int, now: float) -> list[RolloutTask]:
        if max_n < 1:
            raise InvalidArgument("max_n must be >= 1")
        with self._lock:
            entry = self._raas(raas_uid)
            if not entry.available:
                return []
            wf = self.workflows.get(entry.workflow)
            if wf is None:
                raise UnregisteredWorkflow(f"workflow {entry.workflow!r} is not registered")
            wm = self.buffers.backpressure_high_watermark
            for policy in wf.policies:
                for t in self._targets(policy):
                    # entries already too old for the trainer's published version never count against capacity
                    self._purge(t, self.latest_versions(t.policy), now)
                    if len(t.buffer) >= wm * t.capacity:
                        return []
            submit = {p: self.latest_versions(p) for p in wf.policies}
            tasks = []
            for _ in range(self.prompts.count):
                if len(tasks) == max_n:
                    break
                pid = self.prompts.next()
                if not self.curator.admit(pid, self.rng):
                    continue
                tasks.append(RolloutTask(self._ids.next("task"), pid, wf, dict(submit), now))
            return tasks

    def ingest_trajectory_group(self, group: RolloutGroup, now: float, raas_uid: str | None = None) -> IngestResult:
        with self._lock:
            n = len(group)
            if n == 0:
                raise InvalidArgument("empty group")
            entry = self.raas.get(raas_uid) or self.retired.get(raas_uid)
            pc = self.policy_counters.setdefault(group.policy, PolicyCounters())
            pc.produced += n
            self.curator.observe(group)

            result = None
            if not self.post_filter.keep(group):
                result = IngestResult(0, n, "filtered")
            else:
                targets = self._targets(group.policy)
                if not targets:
                    result = IngestResult(0, n, "unroutable")
                elif any(len(t.buffer) + n > t.capacity for t in targets):
                    full = [t.policy for t in targets if len(t.buffer) + n > t.capacity]
                    result = IngestResult(0, n, f"buffer-full({','.join(full)})")
                else:
                    for t in targets:
                        for traj in group.members:
                            self._seq += 1
                            t.buffer.append((self._seq, traj))
                        t.entered += n
                    result = IngestResult(n, 0)
            pc.accepted += result.accepted
            pc.rejected += result.rejected
            if entry is not None:
                entry.produced += n
                entry.accepted += result.accepted
            self.production_log.append((now, raas_uid or "", n, result.accepted))
            return result

    # -- trainer side ------------------------------------------------------

    def next_training_batch(self, trainer: PolicyId, batch_size: int, trainer_version: int, now: float):
        if batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        with self._lock:
            t = self._trainer(trainer)
            stale = self._purge(t, trainer_version, now, log=False)
            plan = t.composer.compose(len(t.buffer), batch_size, trainer_version)
            if plan is None:
                if stale:
                    self.consumption_log.append((now, trainer, 0, stale))
                return NOT_READY
            fresh_take, replay_take = plan
            if self.fresher_first:
                ordered = sorted(t.buffer, key=lambda it: (-it[1].version, it[0]))
                taken = ordered[:fresh_take]
                taken_ids = {it[0] for it in taken}
                t.buffer = deque(it for it in t.buffer if it[0] not in taken_ids)
                fresh = [it[1] for it in taken]
            else:
                fresh = [t.buffer.popleft()[1] for _ in range(fresh_take)]
            replay = t.composer.serve(replay_take, trainer_version, self.rng)
            t.composer.admit(fresh, trainer_version)
            t.consumed += fresh_take
            t.replayed += len(replay)
            self.consumption_log.append((now, trainer, fresh_take, stale))
            return TrainingBatch(trainer, tuple(fresh) + tuple(replay), fresh_take, len(replay), trainer_version)

    def _purge(self, t: _TrainerEntry, trainer_version: int, now: float, log: bool = True) -> int:
        if not any(not self.staleness.usable(trainer_version, it[1].version) for it in t.buffer):
            return 0
        kept = deque(it for it in t.buffer if self.staleness.usable(trainer_version, it[1].version))
        stale = len(t.buffer) - len(kept)
        t.buffer = kept
        t.stale_skipped += stale
        if log:
            self.consumption_log.append((now, t.policy, 0, stale))
        return stale

    def record_step(self, trainer: PolicyId, version: int, wait_seconds: float, compute_seconds: float,
                    now: float) -> StepEvent:
        if wait_seconds < 0 or compute_seconds < 0:
            raise InvalidArgument("negative wait or step time")
        with self._lock:
            t = self._trainer(trainer)
            ev = StepEvent(trainer, version, now, wait_seconds, compute_seconds)
            t.wait_seconds += wait_seconds
            t.step_seconds += ev.step_seconds
            self.step_log.append(ev)
            return ev

    # -- statistics --------------------------------------------------------

    def window_stats(self, last_n_versions: int, trainer: PolicyId | None = None) -> BalanceWindow:
        """Summarise the last ``last_n_versions`` trainer iterations.

        ``w = sum(wait) / sum(step)`` where a step is the iteration's wall
        time (batch wait plus compute). With several trainers and no
        ``trainer`` argument, each trainer's last N iterations are pooled.
        """
        if last_n_versions < 1:
            raise InvalidArgument("last_n_versions must be >= 1")
        with self._lock:
            names = [trainer] if trainer is not None else list(self.trainers)
            steps: list[StepEvent] = []
            for name in names:
                self._trainer(name)
                mine = [e for e in self.step_log if e.trainer == name]
                steps.extend(mine[-last_n_versions:])
            if not steps:
                raise EmptyWindow("no completed trainer step in the window")
            t_end = max(e.time for e in steps)
            t_start = min(e.time - e.step_seconds for e in steps)
            total_wait = sum(e.wait_seconds for e in steps)
            total_step = sum(e.step_seconds for e in steps)
            n = len(steps)

            per_uid: dict[str, list[int]] = {}
            produced = accepted = 0
            for t, uid, p, a in self.production_log:
                if t_start < t <= t_end:
                    produced += p
                    accepted += a
                    acc = per_uid.setdefault(uid, [0, 0])
                    acc[0] += p
                    acc[1] += a
            consumed = stale = 0
            for t, tr, c, s in self.consumption_log:
                if t_start < t <= t_end and tr in names:
                    consumed += c
                    stale += s

            layout = []
            for entry in self.raas.values():
                p, a = per_uid.get(entry.uid, (0, 0))
                rate = a / p if p else 0.0
                suspect = (not entry.available) or (p > 0 and rate < SUSPECT_ACCEPT_RATE)
                layout.append(LayoutRow(entry.uid, entry.gpus, p, a, rate, a / entry.gpus,
                                        SUSPECT if suspect else HEALTHY))
            return BalanceWindow(
                n_iterations=max(len([e for e in steps if e.trainer == nm]) for nm in names),
                wall_time_sec=t_end - t_start,
                eval_time_sec=0.0,
                training_time_sec=sum(e.compute_seconds for e in steps),
                avg_step_time_sec=total_step / n,
                avg_batch_wait_sec=total_wait / n,
                wait_fraction=total_wait / total_step if total_step > 0 else 0.0,
                total_raas_gpus=sum(e.gpus for e in self.raas.values()),
                produced=produced,
                entered=accepted,
                consumed=consumed,
                stale_skipped=stale,
                layout=tuple(layout),
                t_start=t_start,
                t_end=t_end,
            )

    def buffered(self, trainer: PolicyId) -> int:
        with self._lock:
            return len(self._trainer(trainer).buffer)

    def conservation(self) -> dict:
        """End-of-run ledger; ``balanced`` is true when every identity holds."""
        with self._lock:
            policies = {
                p: {"produced": c.produced, "accepted": c.accepted, "rejected": c.rejected,
                    "balanced": c.produced == c.accepted + c.rejected}
                for p, c in sorted(self.policy_counters.items())
            }
            trainers = {}
            for name, t in sorted(self.trainers.items()):
                trainers[name] = {
                    "entered": t.entered, "consumed": t.consumed, "stale_skipped": t.stale_skipped,
                    "buffered": len(t.buffer), "replayed": t.replayed,
                    "balanced": t.entered == t.consumed + t.stale_skipped + len(t.buffer),
                }
            ok = all(v["balanced"] for v in policies.values()) and all(v["balanced"] for v in trainers.values())
            return {"policies": policies, "trainers": trainers, "balanced": ok}

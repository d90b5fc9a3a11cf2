"""Simulated trainers.

A trainer pulls batches from the dataflow layer, spends a step time
proportional to the batch's token mass, perturbs its weight snapshot
with a calibrated sparsity, and publishes the result. There is no
optimiser: the update only has to look like one to the weight-transfer
path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TrainingBatch, derive_seed, round_half_away
from .dataflow import NOT_READY
from .errors import InvalidArgument
from .weights import WeightSnapshot, WeightStore, compute_delta


@dataclass(frozen=True)
class TrainerSpec:
    policy: str
    batch_size: int = 256
    step_seconds_per_token: float = 1e-4
    target_sparsity: float = 0.989
    element_count: int = 100_000
    seed: int = 0
    represented_elements: float | None = None  # model size the snapshot stands in for
    stalled: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.element_count < 1:
            raise InvalidArgument("batch_size and element_count must be positive")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise InvalidArgument("target_sparsity must lie in [0, 1)")
        if self.step_seconds_per_token <= 0:
            raise InvalidArgument("step_seconds_per_token must be positive")

    @property
    def payload_scale(self) -> float:
        return (self.represented_elements or self.element_count) / self.element_count

    @property
    def changed_per_step(self) -> int:
        return round_half_away((1.0 - self.target_sparsity) * self.element_count)


@dataclass(frozen=True)
class StepRecord:
    version: int  # version published by this step
    wait_seconds: float
    step_seconds: float  # compute time only
    fresh_count: int
    replay_count: int
    sparsity: float
    tokens: int
    started: float
    finished: float
    member_policies: tuple[str, ...] = ()  # producing policies present in the batch


class Waiting:
    def __repr__(self):
        return "WAITING"

    def __bool__(self):
        return False


WAITING = Waiting()


def initial_weights(spec: TrainerSpec) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(spec.seed, spec.policy, "init"))
    return rng.integers(0, 2**16, size=spec.element_count, dtype=np.uint16)


def mutate(elements: np.ndarray, spec: TrainerSpec, version: int) -> np.ndarray:
    """Flip exactly ``round((1 - s) * N)`` words chosen by a seeded hash of (policy, version).

    Each chosen word is XORed with a non-zero mask, so it always changes.
    """
    k = spec.changed_per_step
    rng = np.random.default_rng(derive_seed(spec.seed, spec.policy, version))
    idx = rng.choice(spec.element_count, size=k, replace=False)
    masks = rng.integers(1, 2**16, size=k, dtype=np.uint16)
    out = elements.copy()
    out[idx] ^= masks
    return out


class TrainerSim:
    def __init__(self, spec: TrainerSpec, store: WeightStore, now: float = 0.0):
        self.spec = spec
        self.store = store
        self.snapshot = WeightSnapshot(spec.policy, 1, initial_weights(spec))
        store.publish(self.snapshot, now)
        self.free_since = now
        self.wait_accrued = 0.0
        self.pending: tuple[TrainingBatch, float, float] | None = None  # batch, start, wait
        self.log: list[StepRecord] = []

    @property
    def policy(self) -> str:
        return self.spec.policy

    @property
    def version(self) -> int:
        return self.snapshot.version

    @property
    def busy(self) -> bool:
        return self.pending is not None

    def step_seconds(self, batch: TrainingBatch) -> float:
        return self.spec.step_seconds_per_token * batch.tokens

    def poll(self, dataflow, now: float):
        """Ask for a batch; on success the trainer is busy until :meth:`commit`."""
        if self.pending is not None:
            raise RuntimeError(f"trainer {self.policy} is mid-step")
        self.wait_accrued = now - self.free_since
        batch = dataflow.next_training_batch(self.policy, self.spec.batch_size, self.version, now)
        if batch is NOT_READY:
            return NOT_READY
        self.pending = (batch, now, self.wait_accrued)
        return batch

    def commit(self, dataflow, now: float) -> StepRecord:
        """Finish the step: perturb the weights and publish the next version."""
        batch, started, wait = self.pending
        new = WeightSnapshot(self.policy, self.version + 1, mutate(self.snapshot.elements, self.spec, self.version + 1))
        stored = self.store.publish(new, now)
        sparsity = stored.delta.sparsity if stored.delta is not None else compute_delta(self.snapshot, new).sparsity
        self.snapshot = new
        rec = StepRecord(new.version, wait, now - started, batch.fresh_count, batch.replay_count, sparsity,
                         batch.tokens, started, now, tuple(sorted({t.policy for t in batch.members})))
        self.log.append(rec)
        dataflow.record_step(self.policy, new.version, wait, now - started, now)
        self.pending = None
        self.free_since = now
        self.wait_accrued = 0.0
        return rec

    def train_step(self, dataflow, store: WeightStore | None = None, now: float = 0.0):
        """Poll and, if a batch is ready, complete the whole step.

        Publication is stamped ``now + step time``. Returns a
        :class:`StepRecord` or ``WAITING``.
        """
        batch = self.poll(dataflow, now)
        if batch is NOT_READY:
            return WAITING
        return self.commit(dataflow, now + self.step_seconds(batch))


def downtime_trace(step_log) -> list[tuple[int, float]]:
    """``(version, wait_seconds)`` per completed step."""
    return [(r.version, r.wait_seconds) for r in step_log]

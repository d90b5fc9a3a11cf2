"""End-to-end composition and the simulation clock.

``Simulation`` wires a :class:`~rlflow.scenario.Scenario` into a weight
store, a dataflow layer, trainers, RaaS instances and a maintainer, then
drives them from a single event heap. Ties at equal simulated time break
on (event kind, component uid, insertion order). The maintainer runs
inline at every K-th commit of the primary trainer, so a run is a pure
function of scenario and seed.

``run_live`` runs the same components as threads against a scaled wall
clock. Ordering then varies between runs; counts and the conservation
ledger do not.
"""

from __future__ import annotations

import heapq
import json
import logging
import threading
import time as _time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .algorithms import make_composer, make_curator, make_post_filter
from .autoscaler import CallbackExecutor, Maintainer, MaintainOutcome, ShellExecutor
from .core import IdGenerator, derive_seed
from .dataflow import NOT_READY, DataflowLayer, PromptStream
from .errors import EmptyWindow, RLFlowError
from .raas import Generation, RaasInstance, Refresh
from .scenario import Scenario
from .trainer import TrainerSim, initial_weights
from .weights import WeightSnapshot, WeightStore

log = logging.getLogger(__name__)

FAMILIES = ("pool_size", "wait_fraction", "produced", "transfer_seconds", "downtime", "delta_sparsity")
HEADER = "time,version,metric,labels,value"

# event kinds, in tie-break order
RAAS_COMPLETE = 0
RAAS_REFRESHED = 1
TRAINER_COMMIT = 2
TRAINER_POLL = 3
RAAS_STEP = 4


class SimulationError(RLFlowError):
    """A module raised while handling an event; the message names the event."""


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _labels(**kw) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(kw.items()))


@dataclass(frozen=True)
class MetricsRow:
    time: float
    version: int
    metric: str
    labels: str
    value: float

    def line(self) -> str:
        return ",".join((_fmt(self.time), str(self.version), self.metric, self.labels, _fmt(self.value)))


class MetricsLog:
    """Append-only rows grouped by family."""

    def __init__(self):
        self.rows: dict[str, list[MetricsRow]] = {f: [] for f in FAMILIES}
        self._lock = threading.Lock()

    def add(self, family: str, time: float, version: int, metric: str, labels: str, value) -> None:
        with self._lock:
            self.rows[family].append(MetricsRow(time, version, metric, labels, value))

    def series(self, family: str, metric: str | None = None, labels: str | None = None) -> list[MetricsRow]:
        return [r for r in self.rows[family]
                if (metric is None or r.metric == metric) and (labels is None or r.labels == labels)]

    def text(self, family: str) -> str:
        return "\n".join([HEADER] + [r.line() for r in self.rows[family]]) + "\n"


def emit_metrics(metrics: MetricsLog, out_dir, fmt: str = "csv") -> list[Path]:
    """Write one ``<family>.csv`` per metric family under ``out_dir/metrics``."""
    if fmt != "csv":
        raise ValueError(f"unsupported metrics format {fmt!r}")
    d = Path(out_dir) / "metrics"
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for fam in FAMILIES:
        p = d / f"{fam}.csv"
        p.write_text(metrics.text(fam), encoding="utf-8")
        paths.append(p)
    return paths


def read_metrics(path) -> list[MetricsRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != HEADER:
        raise ValueError(f"{path}: missing metrics header")
    rows = []
    for ln in lines[1:]:
        t, v, m, lab, val = ln.split(",")
        rows.append(MetricsRow(float(t), int(v), m, lab, float(val)))
    return rows


def gpu_seconds(changes: list[tuple[float, int]], t_end: float) -> float:
    """Exact integral of a piecewise-constant pool-size series up to ``t_end``."""
    total = 0.0
    for (t0, g), (t1, _) in zip(changes, changes[1:] + [(t_end, 0)]):
        total += g * (max(t1, t0) - t0)
    return total


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    summary: dict
    metrics: MetricsLog
    reports: list[MaintainOutcome]
    trainers: dict[str, TrainerSim]
    instances: dict[str, RaasInstance]
    dataflow: DataflowLayer
    store: WeightStore
    pool_changes: list[tuple[float, int]] = field(default_factory=list)

    def step_log(self, policy: str):
        return list(self.trainers[policy].log)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        emit_metrics(self.metrics, out)
        rdir = out / "reports"
        rdir.mkdir(parents=True, exist_ok=True)
        for o in self.reports:
            (rdir / f"balance_report_{o.window_index:04d}.txt").write_text(o.report, encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        return out


class _Components:
    """Shared construction for the simulated and the live runner."""

    def __init__(self, scenario: Scenario, seed: int | None = None):
        sc = scenario
        self.sc = sc
        self.seed = sc.seed if seed is None else seed
        self.metrics = MetricsLog()
        self.store = WeightStore(sc.sync)
        self.model = sc.rollout.model(self.seed)
        self.ids = IdGenerator()
        self.now = 0.0

        # frozen policies: initial weights only
        for spec in sc.frozen:
            spec = self._seeded(spec)
            self.store.publish(WeightSnapshot(spec.policy, 1, initial_weights(spec)), 0.0)
        self.trainers = {t.policy: TrainerSim(self._seeded(t), self.store, 0.0) for t in sc.trainers}
        self.primary = sc.primary_trainer
        self.payload_scale = {t.policy: t.payload_scale for t in sc.trainers + sc.frozen}

        h = sc.hooks
        curator = make_curator(h.curator, **asdict(h.greso)) if h.curator == "greso" else make_curator(h.curator)
        self.dataflow = DataflowLayer(
            sc.routing, sc.staleness, sc.buffers, curator, make_post_filter(h.post_filter),
            PromptStream(sc.rollout.prompts), self.store.latest_version,
            np.random.default_rng(derive_seed(self.seed, "dataflow")), sc.fresher_first)
        for wf in sc.workflows.values():
            self.dataflow.register_workflow(wf)
        for t in sc.trainers:
            if t.stalled:
                continue  # zero batch supply: nothing is routed to it
            kw = asdict(h.replay) if h.composer == "replay" else {}
            self.dataflow.register_trainer(t.policy, t.batch_size, make_composer(h.composer, **kw))

        self.instances: dict[str, RaasInstance] = {}
        self.pool_changes: list[tuple[float, int]] = []
        for spec in sc.raas:
            self._add_instance(spec, 0.0)
        self._record_pool(0.0)

        a = sc.autoscale
        if a.executor == "shell":
            executor = ShellExecutor(a.launch_command, a.retire_command, dry_run=True)
        else:
            executor = CallbackExecutor(self._launch, self._retire)
        self.maintainer = Maintainer(a.config, executor)
        self.reports: list[MaintainOutcome] = []
        self._produced_mark: dict[str, int] = {}

    def _seeded(self, spec):
        return replace(spec, seed=derive_seed(self.seed, "trainer", spec.policy, spec.seed))

    # -- fleet ---------------------------------------------------------

    def _add_instance(self, spec, now: float) -> RaasInstance:
        inst = RaasInstance(spec, self.model, self.seed, self.payload_scale)
        self.dataflow.register_raas(spec.uid, spec.gpus, spec.workflow)
        self.instances[spec.uid] = inst
        return inst

    def _record_pool(self, now: float) -> None:
        g = self.dataflow.total_raas_gpus()
        if self.pool_changes and self.pool_changes[-1][0] == now:
            self.pool_changes[-1] = (now, g)
        else:
            self.pool_changes.append((now, g))
        self.metrics.add("pool_size", now, self._version(), "raas_gpus", "", g)

    def _version(self) -> int:
        tr = self.trainers.get(self.primary)
        return tr.version if tr else 0

    def _launch(self, gpus: int) -> str:
        uid = self.ids.next("raas-auto")
        spec = replace(self.sc.autoscale.template, uid=uid, gpus=gpus)
        self._add_instance(spec, self.now)
        self._on_launch(uid)
        self._record_pool(self.now)
        return uid

    def _retire(self, uid: str) -> None:
        self.dataflow.retire_raas(uid)
        self.instances[uid].retired = True
        self._record_pool(self.now)

    def _on_launch(self, uid: str) -> None:
        pass

    # -- metric hooks ----------------------------------------------------

    def _log_refresh(self, ref: Refresh) -> None:
        v = self._version()
        for p in ref.pulls:
            self.metrics.add("transfer_seconds", ref.start, v, "transfer_seconds",
                             _labels(mode=p.mode, policy=p.policy, raas=ref.uid, to=p.to_version), p.seconds)
        self.metrics.add("downtime", ref.start, v, "rollout_downtime", _labels(raas=ref.uid), ref.downtime)

    def _log_commit(self, policy: str, rec) -> None:
        self.metrics.add("downtime", rec.finished, rec.version, "trainer_wait", _labels(policy=policy),
                         rec.wait_seconds)
        self.metrics.add("downtime", rec.finished, rec.version, "trainer_step", _labels(policy=policy),
                         rec.step_seconds)
        self.metrics.add("delta_sparsity", rec.finished, rec.version, "delta_sparsity", _labels(policy=policy),
                         rec.sparsity)
        if policy == self.primary:
            for uid, inst in self.instances.items():
                n = inst.produced - self._produced_mark.get(uid, 0)
                if n or not inst.retired:
                    self.metrics.add("produced", rec.finished, rec.version, "produced", _labels(raas=uid), n)
                self._produced_mark[uid] = inst.produced

    def _maintain(self, window_index: int, now: float) -> MaintainOutcome | None:
        try:
            window = self.dataflow.window_stats(self.sc.autoscale.config.K, trainer=self.primary)
        except EmptyWindow:
            return None
        active = any(i.transfer_active(now) for i in self.instances.values() if not i.retired)
        if self.sc.autoscale.enabled:
            out = self.maintainer.maintain(window_index, window, active)
        else:
            out = self.maintainer.report_only(window_index, window, active)
        self.reports.append(out)
        self.metrics.add("wait_fraction", now, self._version(), "wait_fraction", _labels(policy=self.primary),
                         window.wait_fraction)
        return out

    def summary(self, end: float, truncated: bool = False) -> dict:
        gs = gpu_seconds(self.pool_changes, end)
        trainers = {}
        for p, tr in sorted(self.trainers.items()):
            trainers[p] = {
                "versions_published": tr.version - 1,
                "busy_seconds": sum(r.step_seconds for r in tr.log),
                "wait_seconds": sum(r.wait_seconds for r in tr.log),
                "stalled": tr.spec.stalled,
            }
        raas = {}
        for uid, inst in self.instances.items():
            raas[uid] = {
                "gpus": inst.spec.gpus,
                "produced": inst.produced,
                "busy_seconds": inst.busy_seconds,
                "transfer_seconds": sum(r.transfer_seconds for r in inst.refresh_log),
                "reload_seconds": sum(r.reload_seconds for r in inst.refresh_log),
                "retired": inst.retired,
            }
        return {
            "scenario": self.sc.name,
            "seed": self.seed,
            "simulated_seconds": end,
            "truncated": truncated,
            "rollout_gpu_seconds": gs,
            "rollout_gpu_hours": gs / 3600.0,
            "trainers": trainers,
            "raas": raas,
            "conservation": self.dataflow.conservation(),
            "windows": len(self.reports),
        }


class Simulation(_Components):
    """Deterministic discrete-event run of a scenario."""

    def __init__(self, scenario: Scenario, seed: int | None = None):
        super().__init__(scenario, seed)
        self._heap: list = []
        self._seq = 0
        self._step_token: dict[str, int] = {}
        self._waiting: set[str] = set()
        self.events = 0

    def _push(self, t: float, kind: int, uid: str, payload=None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, kind, uid, self._seq, payload))

    def _wake_raas(self, uid: str, t: float) -> None:
        tok = self._step_token.get(uid, 0) + 1
        self._step_token[uid] = tok
        self._push(t, RAAS_STEP, uid, tok)

    def _on_launch(self, uid: str) -> None:
        self._wake_raas(uid, self.now)

    def _active_trainers(self):
        return [p for p, tr in self.trainers.items() if not tr.spec.stalled]

    def _finished(self, policy: str) -> bool:
        return self.trainers[policy].version - 1 >= self.sc.run_versions

    def run(self, max_time: float | None = None, max_events: int = 20_000_000) -> RunResult:
        if self.sc.run_versions == 0:
            # nothing runs, so no series gets a sample (not even the initial pool size)
            self.metrics = MetricsLog()
            return RunResult(self.sc, self.seed, self.summary(0.0), self.metrics, self.reports, self.trainers,
                             self.instances, self.dataflow, self.store, list(self.pool_changes))
        for uid in self.instances:
            self._wake_raas(uid, 0.0)
        for p in self._active_trainers():
            if not self._finished(p):
                self._push(0.0, TRAINER_POLL, p)
        end, truncated = 0.0, False
        active = self._active_trainers()
        while self._heap:
            if active and all(self._finished(p) for p in active):
                break
            t, kind, uid, _, payload = heapq.heappop(self._heap)
            if max_time is not None and t > max_time:
                truncated = True
                end = max_time
                break
            self.now = end = t
            self.events += 1
            if self.events > max_events:
                truncated = True
                break
            try:
                self._dispatch(kind, uid, payload)
            except RLFlowError as exc:
                raise SimulationError(f"event kind={kind} uid={uid} t={t!r}: {exc}") from exc
        else:
            truncated = bool(active) and not all(self._finished(p) for p in active)
        return RunResult(self.sc, self.seed, self.summary(end, truncated), self.metrics, self.reports,
                         self.trainers, self.instances, self.dataflow, self.store, list(self.pool_changes))

    def _dispatch(self, kind: int, uid: str, payload) -> None:
        now = self.now
        if kind == RAAS_STEP:
            if payload != self._step_token.get(uid):
                return  # superseded wake-up
            inst = self.instances[uid]
            results = inst.service_step(self.dataflow, self.store, now)
            for r in results:
                if isinstance(r, Refresh):
                    self._log_refresh(r)
                    self._push(r.end, RAAS_REFRESHED, uid)
                else:
                    self._push(r.end, RAAS_COMPLETE, uid, r)
            if not results and not inst.retired and inst.refreshing is None and inst.inflight < inst.spec.slots:
                self._wake_raas(uid, now + self.sc.poll_interval)
        elif kind == RAAS_REFRESHED:
            self.instances[uid].finish_refresh()
            self._wake_raas(uid, now)
        elif kind == RAAS_COMPLETE:
            inst = self.instances[uid]
            inst.complete(payload, self.dataflow, now)
            for p in sorted(self._waiting):
                self._push(now, TRAINER_POLL, p)
            self._waiting.clear()
            if not inst.retired:
                self._wake_raas(uid, now)
        elif kind == TRAINER_POLL:
            tr = self.trainers[uid]
            if tr.busy or self._finished(uid):
                return
            batch = tr.poll(self.dataflow, now)
            if batch is NOT_READY:
                self._waiting.add(uid)
                return
            self._push(now + tr.step_seconds(batch), TRAINER_COMMIT, uid)
            self._wake_idle(now)
        elif kind == TRAINER_COMMIT:
            tr = self.trainers[uid]
            rec = tr.commit(self.dataflow, now)
            self._log_commit(uid, rec)
            if uid == self.primary and (rec.version - 1) % self.sc.autoscale.config.K == 0:
                self._maintain((rec.version - 1) // self.sc.autoscale.config.K, now)
            if not self._finished(uid):
                self._push(now, TRAINER_POLL, uid)
            self._wake_idle(now)

    def _wake_idle(self, now: float) -> None:
        # buffer space or a new version may unblock idle instances
        for uid, inst in self.instances.items():
            if not inst.retired and inst.refreshing is None and inst.inflight == 0:
                self._wake_raas(uid, now)


def run(scenario: Scenario, seed: int | None = None, out_dir=None, max_time: float | None = None) -> RunResult:
    """Deterministic run; writes metrics, reports and summary when ``out_dir`` is given."""
    res = Simulation(scenario, seed).run(max_time=max_time)
    if out_dir is not None:
        res.write(out_dir)
    return res


# -- live mode ------------------------------------------------------------


class LiveRun(_Components):
    """Threaded run: one worker per RaaS instance and per trainer.

    Simulated durations are slept for ``time_scale`` real seconds each.
    Component calls are serialised by one lock; workers overlap only in
    their sleeps, which is where the modelled time goes.
    """

    def __init__(self, scenario: Scenario, seed: int | None = None, time_scale: float = 1e-3):
        super().__init__(scenario, seed)
        self.time_scale = time_scale
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._t0 = 0.0
        self._threads: list[threading.Thread] = []
        self.errors: list[BaseException] = []

    def _clock(self) -> float:
        return (_time.monotonic() - self._t0) / self.time_scale

    def _sleep(self, sim_seconds: float) -> None:
        self._stop.wait(max(0.0, sim_seconds) * self.time_scale)

    def _on_launch(self, uid: str) -> None:
        if self._t0:
            self._start(threading.Thread(target=self._raas_worker, args=(uid,), name=f"raas-{uid}", daemon=True))

    def _start(self, th: threading.Thread) -> None:
        self._threads.append(th)
        th.start()

    def _guard(self, fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # surface worker failures to run()
            self.errors.append(exc)
            self._stop.set()

    def _raas_worker(self, uid: str) -> None:
        self._guard(self._raas_loop, uid)

    def _raas_loop(self, uid: str) -> None:
        inst = self.instances[uid]
        while not self._stop.is_set() and not inst.retired:
            with self._lock:
                self.now = self._clock()
                results = inst.service_step(self.dataflow, self.store, self.now)
                if results and isinstance(results[0], Refresh):
                    self._log_refresh(results[0])
            if not results:
                self._sleep(self.sc.poll_interval)
                continue
            if isinstance(results[0], Refresh):
                self._sleep(results[0].downtime)
                with self._lock:
                    inst.finish_refresh()
                continue
            for gen in results:  # slots run in parallel; wait for the longest
                assert isinstance(gen, Generation)
            self._sleep(max(g.duration for g in results))
            with self._lock:
                self.now = self._clock()
                for gen in results:
                    inst.complete(gen, self.dataflow, self.now)

    def _trainer_worker(self, policy: str) -> None:
        self._guard(self._trainer_loop, policy)

    def _trainer_loop(self, policy: str) -> None:
        tr = self.trainers[policy]
        K = self.sc.autoscale.config.K
        while not self._stop.is_set() and tr.version - 1 < self.sc.run_versions:
            with self._lock:
                self.now = self._clock()
                batch = tr.poll(self.dataflow, self.now)
            if batch is NOT_READY:
                self._sleep(min(self.sc.poll_interval, 1.0))
                continue
            self._sleep(tr.step_seconds(batch))
            with self._lock:
                self.now = self._clock()
                rec = tr.commit(self.dataflow, self.now)
                self._log_commit(policy, rec)
                if policy == self.primary and (rec.version - 1) % K == 0:
                    # a retired instance's worker notices the flag and exits
                    self._maintain((rec.version - 1) // K, self.now)

    def run(self, timeout: float = 120.0) -> RunResult:
        self._t0 = _time.monotonic()
        for uid in list(self.instances):
            self._start(threading.Thread(target=self._raas_worker, args=(uid,), name=f"raas-{uid}", daemon=True))
        trainer_threads = []
        for p, tr in self.trainers.items():
            if tr.spec.stalled:
                continue
            th = threading.Thread(target=self._trainer_worker, args=(p,), name=f"trainer-{p}", daemon=True)
            trainer_threads.append(th)
            self._start(th)
        deadline = _time.monotonic() + timeout
        for th in trainer_threads:
            th.join(max(0.0, deadline - _time.monotonic()))
        truncated = any(th.is_alive() for th in trainer_threads)
        self._stop.set()
        for th in list(self._threads):
            th.join(5.0)
        if self.errors:
            raise SimulationError(f"live worker failed: {self.errors[0]!r}") from self.errors[0]
        with self._lock:
            # groups still in flight at shutdown are dropped before ingestion
            end = self._clock()
            summary = self.summary(end, truncated)
        return RunResult(self.sc, self.seed, summary, self.metrics, self.reports, self.trainers, self.instances,
                         self.dataflow, self.store, list(self.pool_changes))


def run_live(scenario: Scenario, seed: int | None = None, out_dir=None, time_scale: float = 1e-3,
             timeout: float = 120.0) -> RunResult:
    res = LiveRun(scenario, seed, time_scale).run(timeout)
    if out_dir is not None:
        res.write(out_dir)
    return res

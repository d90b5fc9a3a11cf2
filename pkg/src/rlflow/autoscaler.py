"""Three-zone rollout-pool controller and its maintenance loop.

Every K trainer versions the harness hands the maintainer a balance
window. The maintainer derives a target pool size, renders the balance
report, and issues launch/retire commands through an executor.
"""

from __future__ import annotations

import logging
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Protocol, Sequence

from .dataflow import SUSPECT, BalanceWindow, LayoutRow
from .errors import InsufficientCapacity, InvalidArgument
from .report import render_report

log = logging.getLogger(__name__)

SCALE_UP = "scale_up"
SCALE_DOWN = "scale_down"
HOLD = "hold"


@dataclass(frozen=True)
class AutoscaleConfig:
    K: int = 10
    tau_low: float = 0.05
    tau_high: float = 0.10
    rho: float = 1.10
    G_min: int = 6
    G_max: int = 11
    instance_sizes: tuple[int, ...] = (4, 2, 1)

    def __post_init__(self):
        if not 0 <= self.tau_low < self.tau_high < 1:
            raise InvalidArgument("need 0 <= tau_low < tau_high < 1")
        if self.rho < 1:
            raise InvalidArgument("rho must be >= 1")
        if not 1 <= self.G_min <= self.G_max:
            raise InvalidArgument("need 1 <= G_min <= G_max")
        if self.K < 1 or not self.instance_sizes or min(self.instance_sizes) < 1:
            raise InvalidArgument("K and instance sizes must be positive")


@dataclass(frozen=True)
class ScalingDecision:
    branch: str
    G_target: int
    estimated_delta_gpus: int
    weight_transfer_active: bool = False
    G: int = 0


def _exact(x) -> Fraction:
    # Decimal intent of the input: 0.1 means 1/10, not the nearest double.
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


def compute_target(G: int, w: float, n_p: int, n_c: int, cfg: AutoscaleConfig = AutoscaleConfig(),
                   weight_transfer_active: bool = False) -> ScalingDecision:
    """Target pool size from the trainer waiting fraction ``w``.

    * ``w > tau_high``: ``ceil(G / (1 - w))``
    * ``w < tau_low`` and both counts positive: ``min(G, ceil(G * n_c/n_p * rho))``
    * otherwise ``G``

    The result is clamped to ``[G_min, G_max]``. Arithmetic is exact on
    the decimal value of each input, so ceilings never pick up binary
    rounding noise.
    """
    if G < 1:
        raise InvalidArgument("G must be >= 1")
    if not (0.0 <= w <= 1.0):
        raise InvalidArgument(f"invalid-w: {w!r} outside [0, 1]")
    W = _exact(w)
    if W > _exact(cfg.tau_high):
        raw = cfg.G_max if W == 1 else math.ceil(Fraction(G) / (1 - W))
    elif W < _exact(cfg.tau_low) and n_p > 0 and n_c > 0:
        raw = min(G, math.ceil(G * Fraction(n_c, n_p) * _exact(cfg.rho)))
    else:
        raw = G
    target = min(cfg.G_max, max(cfg.G_min, raw))
    if target == G:
        branch = HOLD
    else:
        branch = SCALE_UP if target > G else SCALE_DOWN
    return ScalingDecision(branch, target, target - G, weight_transfer_active, G)


def select_scale_down_victims(rows: Sequence[LayoutRow], gpus_to_remove: int) -> list[str]:
    """Suspect instances first, then lowest throughput per GPU; ties by uid.

    Stops once the removed GPUs reach ``gpus_to_remove`` (overshoot allowed).
    """
    if gpus_to_remove < 1:
        raise InvalidArgument("gpus_to_remove must be positive")
    if gpus_to_remove > sum(r.gpus for r in rows):
        raise InsufficientCapacity(f"cannot remove {gpus_to_remove} GPUs from {sum(r.gpus for r in rows)}")
    order = sorted(rows, key=lambda r: (r.status != SUSPECT, r.throughput_per_gpu, r.uid))
    victims, removed = [], 0
    for r in order:
        if removed >= gpus_to_remove:
            break
        victims.append(r.uid)
        removed += r.gpus
    return victims


def compose_instances(gpus: int, sizes: Sequence[int]) -> list[int]:
    """Greedy largest-first split of ``gpus`` into allowed instance sizes."""
    sizes = sorted(set(sizes), reverse=True)
    out, left = [], gpus
    while left > 0:
        fit = [s for s in sizes if s <= left]
        s = fit[0] if fit else sizes[-1]
        out.append(s)
        left -= s
    return out


# -- executors ------------------------------------------------------------


class Executor(Protocol):
    def launch(self, gpus: int) -> str: ...

    def retire(self, uid: str) -> None: ...


class CallbackExecutor:
    """Executor backed by two callables; the simulator uses this to mutate its fleet."""

    def __init__(self, launch: Callable[[int], str], retire: Callable[[str], None]):
        self._launch = launch
        self._retire = retire

    def launch(self, gpus):
        return self._launch(gpus)

    def retire(self, uid):
        self._retire(uid)


class ShellExecutor:
    """Renders launch/retire command templates and optionally runs them.

    Templates are ``str.format`` strings with ``{uid}`` and ``{gpus}``.
    With ``dry_run`` (the default) commands are only recorded.
    """

    def __init__(self, launch_template: str = "raas-launch --uid {uid} --gpus {gpus}",
                 retire_template: str = "raas-retire --uid {uid}", dry_run: bool = True,
                 uid_prefix: str = "raas-shell"):
        self.launch_template = launch_template
        self.retire_template = retire_template
        self.dry_run = dry_run
        self.uid_prefix = uid_prefix
        self.issued: list[str] = []
        self._n = 0

    def _run(self, cmd: str) -> None:
        self.issued.append(cmd)
        if not self.dry_run:
            subprocess.run(shlex.split(cmd), check=True)

    def launch(self, gpus):
        self._n += 1
        uid = f"{self.uid_prefix}-{self._n}"
        self._run(self.launch_template.format(uid=uid, gpus=gpus))
        return uid

    def retire(self, uid):
        self._run(self.retire_template.format(uid=uid, gpus=""))


# -- maintenance loop -----------------------------------------------------


@dataclass(frozen=True)
class Command:
    action: str  # "launch" | "retire"
    uid: str
    gpus: int


@dataclass
class MaintainOutcome:
    window_index: int
    decision: ScalingDecision
    report: str
    commands: list[Command] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    deferred: bool = False


class Maintainer:
    """Reads each window's report and acts on the suggested target."""

    def __init__(self, cfg: AutoscaleConfig, executor: Executor):
        self.cfg = cfg
        self.executor = executor
        self.history: dict[int, MaintainOutcome] = {}

    def report_only(self, window_index: int, window: BalanceWindow,
                    weight_transfer_active: bool = False) -> MaintainOutcome:
        """Decide and render, but issue no commands (fixed-pool runs)."""
        G = window.total_raas_gpus
        decision = compute_target(max(G, 1), window.wait_fraction, window.entered, window.consumed, self.cfg,
                                  weight_transfer_active)
        return MaintainOutcome(window_index, decision, render_report(window, decision))

    def maintain(self, window_index: int, window: BalanceWindow, weight_transfer_active: bool = False) -> MaintainOutcome:
        if window_index in self.history:
            prev = self.history[window_index]
            return MaintainOutcome(window_index, prev.decision, prev.report, [], ["duplicate window ignored"],
                                   prev.deferred)
        G = window.total_raas_gpus
        decision = compute_target(max(G, 1), window.wait_fraction, window.entered, window.consumed, self.cfg,
                                  weight_transfer_active)
        out = MaintainOutcome(window_index, decision, render_report(window, decision))
        self.history[window_index] = out
        if weight_transfer_active:
            out.deferred = True
            out.events.append("weight transfer active; action deferred")
            return out
        delta = decision.G_target - G
        if delta > 0:
            for size in compose_instances(delta, self.cfg.instance_sizes):
                self._launch(out, size)
        elif delta < 0:
            victims = select_scale_down_victims(window.layout, -delta)
            sizes = {r.uid: r.gpus for r in window.layout}
            # overshooting the victim list must not take the pool under G_min
            while victims and G - sum(sizes[v] for v in victims) < self.cfg.G_min:
                victims.pop()
            for uid in victims:
                self._retire(out, uid, sizes[uid])
        return out

    def _launch(self, out: MaintainOutcome, gpus: int) -> None:
        try:
            uid = self.executor.launch(gpus)
        except Exception as exc:  # executor failures never stop the loop
            log.warning("launch of %d GPUs failed: %s", gpus, exc)
            out.events.append(f"launch failed: {exc}")
            return
        out.commands.append(Command("launch", uid, gpus))

    def _retire(self, out: MaintainOutcome, uid: str, gpus: int) -> None:
        try:
            self.executor.retire(uid)
        except Exception as exc:
            log.warning("retire of %s failed: %s", uid, exc)
            out.events.append(f"retire {uid} failed: {exc}")
            return
        out.commands.append(Command("retire", uid, gpus))

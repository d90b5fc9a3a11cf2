"""Scenario files: a declarative description of one simulated deployment.

Scenarios are TOML. A file may name a parent with a top-level
``extends = "other.toml"`` (resolved relative to the file, or to the
bundled presets with ``extends = "preset:elastic"``); tables are merged
key by key, the child winning. See README.md for the full grammar.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .algorithms import GresoConfig, ReplayConfig
from .autoscaler import AutoscaleConfig
from .core import REWARD_ASSIGNMENTS, WorkflowSpec, validate_workflow
from .dataflow import ROUTING_MODES, BufferConfig, Route, RoutingTable, StalenessPolicy
from .errors import DuplicateRole, RLFlowError, ScenarioParseError, ScenarioValidationError, UnknownPolicy
from .raas import RaasInstanceSpec, RolloutModel, TokenDistribution
from .trainer import TrainerSpec
from .weights import LinkModel, SyncPolicy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CURATORS = ("keep_all", "greso", "never")
POST_FILTERS = ("keep_all", "zero_adv")
COMPOSERS = ("fresh_only", "replay")
EXECUTORS = ("sim", "shell")


@dataclass(frozen=True)
class HookConfig:
    curator: str = "keep_all"
    post_filter: str = "keep_all"
    composer: str = "fresh_only"
    greso: GresoConfig = GresoConfig()
    replay: ReplayConfig = ReplayConfig()


@dataclass(frozen=True)
class RolloutConfig:
    group_size: int = 8
    prompts: int = 1000
    prompt_alpha: float = 1.0
    prompt_beta: float = 1.0
    growth_per_version: float = 0.0
    verifier_noise: float = 0.0
    tokens: TokenDistribution = TokenDistribution()
    role_tokens: Mapping[str, TokenDistribution] = field(default_factory=dict)

    def model(self, seed: int) -> RolloutModel:
        return RolloutModel.with_prompt_table(
            self.prompts, seed, self.prompt_alpha, self.prompt_beta, tokens=self.tokens,
            role_tokens=dict(self.role_tokens), growth_per_version=self.growth_per_version,
            group_size=self.group_size, verifier_noise=self.verifier_noise)


@dataclass(frozen=True)
class AutoscaleSpec:
    config: AutoscaleConfig = AutoscaleConfig()
    enabled: bool = False  # False: reports are still written, but nothing is launched or retired
    trainer: str | None = None
    template: RaasInstanceSpec = RaasInstanceSpec("template")
    executor: str = "sim"
    launch_command: str = "raas-launch --uid {uid} --gpus {gpus}"
    retire_command: str = "raas-retire --uid {uid}"


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    run_versions: int
    policies: tuple[str, ...]
    workflows: Mapping[str, WorkflowSpec]
    trainers: tuple[TrainerSpec, ...]
    raas: tuple[RaasInstanceSpec, ...]
    routing: RoutingTable
    frozen: tuple[TrainerSpec, ...] = ()
    links: Mapping[str, LinkModel] = field(default_factory=dict)
    staleness: StalenessPolicy = StalenessPolicy()
    buffers: BufferConfig = BufferConfig()
    fresher_first: bool = False
    hooks: HookConfig = HookConfig()
    sync: SyncPolicy = SyncPolicy()
    rollout: RolloutConfig = RolloutConfig()
    autoscale: AutoscaleSpec = AutoscaleSpec()
    poll_interval: float = 1.0
    source: str = ""

    def trainer(self, policy: str) -> TrainerSpec:
        for t in self.trainers:
            if t.policy == policy:
                return t
        raise KeyError(policy)

    @property
    def primary_trainer(self) -> str:
        if self.autoscale.trainer:
            return self.autoscale.trainer
        active = [t.policy for t in self.trainers if not t.stalled]
        return active[0] if active else self.trainers[0].policy

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)

    def with_stalled(self, policy: str) -> "Scenario":
        """Same deployment, but ``policy``'s trainer receives no batches."""
        return replace(self, trainers=tuple(replace(t, stalled=True) if t.policy == policy else t
                                            for t in self.trainers))

    def solo(self, policy: str) -> "Scenario":
        """Only ``policy`` trains; every other trainer's weights stay at their initial version."""
        keep = tuple(t for t in self.trainers if t.policy == policy)
        frozen = self.frozen + tuple(t for t in self.trainers if t.policy != policy)
        return replace(self, trainers=keep, frozen=frozen)

    def with_fixed_pool(self, gpus: int) -> "Scenario":
        """Replace the rollout fleet with a fixed pool of ``gpus`` GPUs (autoscaling off)."""
        from .autoscaler import compose_instances

        tpl = self.autoscale.template
        sizes = compose_instances(gpus, self.autoscale.config.instance_sizes)
        fleet = tuple(replace(tpl, uid=f"fixed-{i + 1}", gpus=g) for i, g in enumerate(sizes))
        return replace(self, raas=fleet, autoscale=replace(self.autoscale, enabled=False))

    def validate(self) -> "Scenario":
        validate_scenario(self)
        return self


# -- parsing ----------------------------------------------------------------


def _deep_merge(base: dict, child: dict) -> dict:
    out = dict(base)
    for k, v in child.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_toml(text: str, origin: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioParseError(f"{origin}: {exc}", line=int(m.group(1)) if m else None) from None


def preset_text(name: str) -> str:
    fname = name if name.endswith(".toml") else f"{name}.toml"
    try:
        return resources.files("rlflow").joinpath("scenarios", fname).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ScenarioParseError(f"no bundled preset {name!r}") from None


def list_presets() -> list[str]:
    root = resources.files("rlflow").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml") and not p.name.startswith("_"))


def _resolve(raw: dict, base_dir: Path | None, depth: int = 0) -> dict:
    parent = raw.pop("extends", None)
    if parent is None:
        return raw
    if depth > 8:
        raise ScenarioParseError("extends chain too deep", field="extends")
    if not isinstance(parent, str):
        raise ScenarioParseError("must be a string", field="extends")
    if parent.startswith("preset:"):
        ptext, pdir = preset_text(parent[len("preset:"):]), None
    else:
        ppath = (base_dir or Path.cwd()) / parent
        try:
            ptext = ppath.read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioParseError(f"cannot read parent scenario: {exc}", field="extends") from None
        pdir = ppath.parent
    praw = _resolve(_read_toml(ptext, parent), pdir, depth + 1)
    return _deep_merge(praw, raw)


class _Section:
    """Typed accessor over one TOML table that reports the offending field path."""

    def __init__(self, data: Mapping, path: str):
        if not isinstance(data, Mapping):
            raise ScenarioParseError("expected a table", field=path)
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def _f(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, kind, default=...):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise ScenarioParseError("missing required field", field=self._f(key))
            return default
        val = self.data[key]
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if kind is not None and not isinstance(val, kind) or (kind in (int, float) and isinstance(val, bool)):
            raise ScenarioParseError(f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}",
                                     field=self._f(key))
        return val

    def sub(self, key, default=...):
        val = self.get(key, dict, {} if default is ... else default)
        return _Section(val, self._f(key))

    def finish(self):
        extra = set(self.data) - self.used
        if extra:
            raise ScenarioParseError(f"unknown key(s) {sorted(extra)}", field=self.path or "<top>")


def _tokens(sec: _Section) -> TokenDistribution:
    kind = sec.get("kind", str, "constant")
    kw = {}
    for key in ("value", "lo", "hi", "mu", "sigma"):
        if key in sec.data:
            kw[key] = sec.get(key, float)
    sec.finish()
    try:
        return TokenDistribution(kind, **kw)
    except RLFlowError as exc:
        raise ScenarioParseError(str(exc), field=sec.path) from None


def _raas_spec(uid: str, sec: _Section, links: Mapping[str, LinkModel], wf_default: str) -> RaasInstanceSpec:
    link_name = sec.get("link", str, "local")
    if link_name not in links:
        raise ScenarioValidationError("unknown-link", f"{sec.path}.link names undeclared link {link_name!r}")
    spec = RaasInstanceSpec(
        uid=uid,
        gpus=sec.get("gpus", int, 4),
        throughput_share=sec.get("throughput_share", float, 1.0),
        base_tokens_per_sec_per_gpu=sec.get("base_tokens_per_sec_per_gpu", float, 1000.0),
        link=links[link_name],
        reload_seconds=sec.get("reload_seconds", float, 5.0),
        refresh_every=sec.get("refresh_every", int, 1),
        workflow=sec.get("workflow", str, wf_default),
        slots=sec.get("slots", int, 1),
    )
    sec.finish()
    return spec


def _trainer_spec(policy: str, sec: _Section) -> TrainerSpec:
    rep = sec.get("represented_elements", float, None)
    spec = TrainerSpec(
        policy=policy,
        batch_size=sec.get("batch_size", int, 256),
        step_seconds_per_token=sec.get("step_seconds_per_token", float, 1e-4),
        target_sparsity=sec.get("target_sparsity", float, 0.989),
        element_count=sec.get("element_count", int, 100_000),
        seed=sec.get("seed", int, 0),
        represented_elements=rep,
        stalled=sec.get("stalled", bool, False),
    )
    sec.finish()
    return spec


def _build(raw: dict, source: str) -> Scenario:
    top = _Section(raw, "")
    policies = tuple(top.get("policies", list))
    if not all(isinstance(p, str) and p for p in policies):
        raise ScenarioParseError("policies must be non-empty strings", field="policies")

    wf_sec = top.sub("workflows")
    workflows = {}
    for name in wf_sec.data:
        s = wf_sec.sub(name)
        roles = s.get("roles", list)
        if not all(isinstance(r, list) and len(r) == 2 and all(isinstance(x, str) for x in r) for r in roles):
            raise ScenarioParseError("roles must be [role, policy] pairs", field=f"workflows.{name}.roles")
        ra = s.get("reward_assignment", dict, {})
        for role, tag in ra.items():
            if tag not in REWARD_ASSIGNMENTS:
                raise ScenarioParseError(f"must be one of {REWARD_ASSIGNMENTS}",
                                         field=f"workflows.{name}.reward_assignment.{role}")
        workflows[name] = WorkflowSpec(name, tuple((r, p) for r, p in roles), s.get("max_retries", int, 0), dict(ra))
        s.finish()
    wf_sec.finish()
    if not workflows:
        raise ScenarioParseError("at least one workflow is required", field="workflows")
    wf_default = next(iter(workflows))

    links = {"local": LinkModel(1e11, 0.0)}
    l_sec = top.sub("links")
    for name in l_sec.data:
        s = l_sec.sub(name)
        try:
            links[name] = LinkModel(s.get("bandwidth_bits_per_sec", float), s.get("rtt_seconds", float, 0.0))
        except RLFlowError as exc:
            raise ScenarioParseError(str(exc), field=f"links.{name}") from None
        s.finish()
    l_sec.finish()

    t_sec = top.sub("trainers")
    trainers = tuple(_trainer_spec(p, t_sec.sub(p)) for p in t_sec.data)
    t_sec.finish()
    f_sec = top.sub("frozen")
    frozen = tuple(_trainer_spec(p, f_sec.sub(p)) for p in f_sec.data)
    f_sec.finish()

    r_sec = top.sub("raas")
    raas = tuple(_raas_spec(uid, r_sec.sub(uid), links, wf_default) for uid in r_sec.data)
    r_sec.finish()

    route_sec = top.sub("routing")
    routes = {}
    for producer in route_sec.data:
        s = route_sec.sub(producer)
        consumers = s.get("consumers", list)
        mode = s.get("mode", str, "exclusive")
        if mode not in ROUTING_MODES:
            raise ScenarioParseError(f"must be one of {ROUTING_MODES}", field=f"routing.{producer}.mode")
        routes[producer] = Route(tuple(consumers), mode)
        s.finish()
    route_sec.finish()
    routing = RoutingTable(routes) if routes else RoutingTable.identity(t.policy for t in trainers)

    d_sec = top.sub("dataflow")
    staleness = StalenessPolicy(d_sec.get("max_version_gap", int, 8))
    capacity = d_sec.get("capacity", dict, {})
    buffers = BufferConfig(dict(capacity), d_sec.get("watermark", float, 0.9),
                           d_sec.get("capacity_factor", int, 4))
    fresher_first = d_sec.get("fresher_first", bool, False)
    d_sec.finish()

    h_sec = top.sub("hooks")
    g_sec = h_sec.sub("greso")
    greso = GresoConfig(**{k: g_sec.get(k, float) for k in list(g_sec.data)})
    rp_sec = h_sec.sub("replay")
    replay = ReplayConfig(rp_sec.get("pool_capacity", int, 10_000), rp_sec.get("max_staleness", int, 8),
                          rp_sec.get("replay_ratio", float, 0.0))
    rp_sec.finish()
    hooks = HookConfig(h_sec.get("curator", str, "keep_all"), h_sec.get("post_filter", str, "keep_all"),
                       h_sec.get("composer", str, "fresh_only"), greso, replay)
    h_sec.finish()

    s_sec = top.sub("sync")
    sync = SyncPolicy(s_sec.get("full_sync_interval", int, 20), s_sec.get("max_delta_chain", int, 4))
    s_sec.finish()

    ro = top.sub("rollout")
    rt_sec = ro.sub("role_tokens")
    role_tokens = {role: _tokens(rt_sec.sub(role)) for role in rt_sec.data}
    rt_sec.finish()
    rollout = RolloutConfig(
        group_size=ro.get("group_size", int, 8),
        prompts=ro.get("prompts", int, 1000),
        prompt_alpha=ro.get("prompt_alpha", float, 1.0),
        prompt_beta=ro.get("prompt_beta", float, 1.0),
        growth_per_version=ro.get("growth_per_version", float, 0.0),
        verifier_noise=ro.get("verifier_noise", float, 0.0),
        tokens=_tokens(ro.sub("tokens")) if "tokens" in ro.data else TokenDistribution(),
        role_tokens=role_tokens,
    )
    ro.finish()

    a_sec = top.sub("autoscale")
    tpl = _raas_spec("template", a_sec.sub("template"), links, wf_default)
    cfg = AutoscaleConfig(
        K=a_sec.get("K", int, 10),
        tau_low=a_sec.get("tau_low", float, 0.05),
        tau_high=a_sec.get("tau_high", float, 0.10),
        rho=a_sec.get("rho", float, 1.10),
        G_min=a_sec.get("G_min", int, 6),
        G_max=a_sec.get("G_max", int, 11),
        instance_sizes=tuple(a_sec.get("instance_sizes", list, [4, 2, 1])),
    )
    autoscale = AutoscaleSpec(
        config=cfg,
        enabled=a_sec.get("enabled", bool, False),
        trainer=a_sec.get("trainer", str, None),
        template=tpl,
        executor=a_sec.get("executor", str, "sim"),
        launch_command=a_sec.get("launch_command", str, AutoscaleSpec.launch_command),
        retire_command=a_sec.get("retire_command", str, AutoscaleSpec.retire_command),
    )
    a_sec.finish()

    sc = Scenario(
        name=top.get("name", str, Path(source).stem if source else "scenario"),
        seed=top.get("seed", int, 0),
        run_versions=top.get("run_versions", int, 50),
        policies=policies,
        workflows=workflows,
        trainers=trainers,
        frozen=frozen,
        raas=raas,
        routing=routing,
        links=links,
        staleness=staleness,
        buffers=buffers,
        fresher_first=fresher_first,
        hooks=hooks,
        sync=sync,
        rollout=rollout,
        autoscale=autoscale,
        poll_interval=top.get("poll_interval", float, 1.0),
        source=source,
    )
    top.finish()
    return sc


def validate_scenario(sc: Scenario) -> None:
    declared = set(sc.policies)
    if len(declared) != len(sc.policies):
        raise ScenarioValidationError("unique-policies", "policy ids must be unique")
    for wf in sc.workflows.values():
        try:
            validate_workflow(wf, declared)
        except UnknownPolicy as exc:
            raise ScenarioValidationError("unknown-policy", f"workflow {wf.name!r}, role {exc.role!r}: "
                                          f"policy {exc.policy!r} not declared") from None
        except DuplicateRole as exc:
            raise ScenarioValidationError("duplicate-role", f"workflow {wf.name!r} repeats role {exc.name!r}") from None
    seen = set()
    for t in sc.trainers + sc.frozen:
        if t.policy not in declared:
            raise ScenarioValidationError("unknown-policy", f"trainer for undeclared policy {t.policy!r}")
        if t.policy in seen:
            raise ScenarioValidationError("unique-trainers", f"policy {t.policy!r} has two trainers")
        seen.add(t.policy)
    for producer, route in sc.routing.routes.items():
        if producer not in declared:
            raise ScenarioValidationError("unknown-policy", f"routing producer {producer!r} not declared")
        for c in route.consumers:
            if c not in {t.policy for t in sc.trainers + sc.frozen}:
                raise ScenarioValidationError("unknown-trainer", f"routing consumer {c!r} has no trainer")
    sc.routing.validate(t.policy for t in sc.trainers)
    for wf in sc.workflows.values():
        for p in wf.policies:
            if p not in seen:
                raise ScenarioValidationError("unweighted-policy", f"policy {p!r} has neither trainer nor frozen weights")
    uids = set()
    for r in sc.raas:
        if r.uid in uids:
            raise ScenarioValidationError("unique-raas", f"duplicate RaaS uid {r.uid!r}")
        uids.add(r.uid)
        if r.workflow not in sc.workflows:
            raise ScenarioValidationError("unknown-workflow", f"RaaS {r.uid!r} serves unknown workflow {r.workflow!r}")
    if sc.hooks.curator not in CURATORS:
        raise ScenarioValidationError("unknown-hook", f"curator {sc.hooks.curator!r} not in {CURATORS}")
    if sc.hooks.post_filter not in POST_FILTERS:
        raise ScenarioValidationError("unknown-hook", f"post_filter {sc.hooks.post_filter!r} not in {POST_FILTERS}")
    if sc.hooks.composer not in COMPOSERS:
        raise ScenarioValidationError("unknown-hook", f"composer {sc.hooks.composer!r} not in {COMPOSERS}")
    if sc.autoscale.executor not in EXECUTORS:
        raise ScenarioValidationError("unknown-executor", f"executor {sc.autoscale.executor!r} not in {EXECUTORS}")
    if sc.autoscale.trainer and sc.autoscale.trainer not in {t.policy for t in sc.trainers}:
        raise ScenarioValidationError("unknown-trainer", f"autoscale trainer {sc.autoscale.trainer!r}")
    if sc.run_versions < 0:
        raise ScenarioValidationError("run-length", "run_versions must be >= 0")
    if not sc.trainers:
        raise ScenarioValidationError("trainers", "at least one trainer is required")
    if sc.poll_interval <= 0:
        raise ScenarioValidationError("poll-interval", "poll_interval must be positive")


def loads_scenario(text: str, source: str = "<string>", base_dir: Path | None = None) -> Scenario:
    raw = _resolve(_read_toml(text, source), base_dir)
    try:
        sc = _build(raw, source)
    except ScenarioParseError:
        raise
    except (RLFlowError, ValueError, TypeError) as exc:
        if isinstance(exc, ScenarioValidationError):
            raise
        raise ScenarioParseError(str(exc)) from None
    validate_scenario(sc)
    return sc


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file (or ``preset:<name>``)."""
    p = str(path)
    if p.startswith("preset:"):
        return load_preset(p[len("preset:"):])
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read {path}: {exc}") from None
    return loads_scenario(text, str(path), path.parent)


def load_preset(name: str) -> Scenario:
    return loads_scenario(preset_text(name), f"preset:{name}", None)

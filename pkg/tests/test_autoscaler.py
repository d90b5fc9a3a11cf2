import random

import pytest

from rlflow.autoscaler import (
    HOLD,
    SCALE_DOWN,
    SCALE_UP,
    AutoscaleConfig,
    CallbackExecutor,
    Maintainer,
    ShellExecutor,
    compose_instances,
    compute_target,
    select_scale_down_victims,
)
from rlflow.dataflow import BalanceWindow, LayoutRow
from rlflow.errors import InsufficientCapacity, InvalidArgument

CFG = AutoscaleConfig()


def _decimal(x) -> tuple[int, int]:
    """(numerator, 10**k) of the shortest decimal string of x."""
    s = repr(float(x))
    assert "e" not in s, s
    whole, _, frac = s.partition(".")
    frac = frac.rstrip("0")
    scale = 10 ** len(frac)
    return int(whole) * scale + (int(frac) if frac else 0), scale


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def oracle(G, w, n_p, n_c, cfg=CFG):
    """Integer-only re-derivation of the three-zone rule."""
    wn, ws = _decimal(w)
    hn, hs = _decimal(cfg.tau_high)
    ln, ls = _decimal(cfg.tau_low)
    rn, rs = _decimal(cfg.rho)
    if wn * hs > hn * ws:
        raw = cfg.G_max if wn == ws else _ceil_div(G * ws, ws - wn)
    elif wn * ls < ln * ws and n_p > 0 and n_c > 0:
        raw = min(G, _ceil_div(G * n_c * rn, n_p * rs))
    else:
        raw = G
    return min(cfg.G_max, max(cfg.G_min, raw))


def test_hand_derived_cases():
    d = compute_target(6, 0.269, 0, 0)
    assert (d.branch, d.G_target, d.estimated_delta_gpus) == (SCALE_UP, 9, 3)
    d = compute_target(11, 0.021, 1000, 800)
    assert (d.branch, d.G_target) == (SCALE_DOWN, 10)
    d = compute_target(8, 0.07, 10, 10)
    assert (d.branch, d.G_target, d.estimated_delta_gpus) == (HOLD, 8, 0)


def test_band_edges_are_holds():
    assert compute_target(8, 0.10, 10, 5).branch == HOLD
    assert compute_target(8, 0.05, 10, 5).branch == HOLD
    # w = 0.1 exactly must not leak into the scale-up zone through binary rounding
    assert compute_target(9, 0.1, 1, 1).G_target == 9


def test_random_grid_matches_oracle():
    rng = random.Random(0)
    cfgs = [CFG, AutoscaleConfig(G_min=1, G_max=64, rho=1.25, tau_low=0.02, tau_high=0.2)]
    for i in range(1000):
        cfg = cfgs[i % 2]
        G = rng.randint(1, 40)
        w = round(rng.random(), rng.choice([1, 2, 3, 4]))
        if i % 10 == 0:
            w = rng.choice([0.0, 1.0, cfg.tau_low, cfg.tau_high])
        n_p, n_c = rng.randint(0, 5000), rng.randint(0, 5000)
        got = compute_target(G, w, n_p, n_c, cfg)
        want = oracle(G, w, n_p, n_c, cfg)
        assert got.G_target == want, (G, w, n_p, n_c)
        assert got.branch == (HOLD if want == G else SCALE_UP if want > G else SCALE_DOWN)


def test_scale_consistency():
    rng = random.Random(1)
    wide = AutoscaleConfig(G_min=1, G_max=1000)
    for _ in range(500):
        G = rng.randint(1, 100)
        w = rng.random()
        n_p = rng.randint(1, 1000)
        n_c = rng.randint(1, n_p)
        t = compute_target(G, w, n_p, n_c, wide).G_target
        if w > wide.tau_high:
            assert t >= G
        elif w < wide.tau_low:
            assert t <= G
        else:
            assert t == G


def test_invalid_inputs():
    with pytest.raises(InvalidArgument):
        compute_target(4, 1.2, 1, 1)
    with pytest.raises(InvalidArgument):
        compute_target(0, 0.5, 1, 1)
    with pytest.raises(InvalidArgument):
        AutoscaleConfig(tau_low=0.2, tau_high=0.1)


def row(uid, gpus, tpg, status="healthy"):
    return LayoutRow(uid, gpus, 0, 0, 1.0, tpg, status)


def test_victim_order():
    rows = [row("a", 2, 90), row("b", 2, 50), row("c", 2, 70)]
    assert select_scale_down_victims(rows, 2) == ["b"]
    rows.append(row("d", 1, 99, "suspect"))
    assert select_scale_down_victims(rows, 1) == ["d"]
    assert select_scale_down_victims([row("x", 4, 5), row("w", 2, 5)], 5) == ["w", "x"]
    with pytest.raises(InsufficientCapacity):
        select_scale_down_victims(rows, 100)


def test_compose_instances():
    assert compose_instances(7, (4, 2, 1)) == [4, 2, 1]
    assert compose_instances(3, (4, 2)) == [2, 2]
    assert sum(compose_instances(11, (4, 2, 1))) == 11


def window(G_rows, w, entered=100, consumed=100):
    return BalanceWindow(10, 100.0, 0.0, 90.0, 10.0, w * 10, w, sum(r.gpus for r in G_rows), entered, entered,
                         consumed, 0, tuple(G_rows))


class Recorder:
    def __init__(self, fail=False):
        self.calls = []
        self.fail = fail
        self.n = 0

    def launch(self, gpus):
        if self.fail:
            raise RuntimeError("no capacity")
        self.n += 1
        self.calls.append(("launch", gpus))
        return f"new-{self.n}"

    def retire(self, uid):
        self.calls.append(("retire", uid))


def test_maintainer_launches_and_is_idempotent():
    rec = Recorder()
    m = Maintainer(CFG, rec)
    rows = [row("a", 4, 10), row("b", 2, 10)]
    out = m.maintain(1, window(rows, 0.269))
    assert [c.gpus for c in out.commands] == [2, 1] and out.decision.G_target == 9
    again = m.maintain(1, window(rows, 0.269))
    assert again.commands == [] and rec.calls == [("launch", 2), ("launch", 1)]
    assert "scale_up" in out.report


def test_maintainer_defers_during_transfer():
    rec = Recorder()
    out = Maintainer(CFG, rec).maintain(1, window([row("a", 4, 1), row("b", 2, 1)], 0.5), True)
    assert out.deferred and out.commands == [] and rec.calls == []
    assert "weight_transfer_active : true" in out.report


def test_maintainer_scale_down_respects_floor():
    rec = Recorder()
    rows = [row("a", 4, 10), row("b", 4, 5), row("c", 2, 20), row("d", 1, 30)]
    out = Maintainer(CFG, rec).maintain(2, window(rows, 0.01, entered=1000, consumed=800))
    # target 10 -> one GPU out; the lowest-throughput instance has 4 GPUs, which would leave 7 >= 6
    assert rec.calls == [("retire", "b")] and out.decision.G_target == 10


def test_maintainer_survives_executor_failure():
    out = Maintainer(CFG, Recorder(fail=True)).maintain(1, window([row("a", 6, 1)], 0.5))
    assert out.commands == [] and out.events and "failed" in out.events[0]


def test_shell_executor_dry_run():
    ex = ShellExecutor("launch --uid {uid} --gpus {gpus}", "retire {uid}")
    uid = ex.launch(2)
    ex.retire(uid)
    assert ex.issued == [f"launch --uid {uid} --gpus 2", f"retire {uid}"]
    cb = CallbackExecutor(lambda g: f"x{g}", lambda u: None)
    assert cb.launch(3) == "x3"

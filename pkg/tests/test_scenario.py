import pytest

from rlflow.errors import ScenarioParseError, ScenarioValidationError
from rlflow.scenario import list_presets, load_preset, load_scenario, loads_scenario

MINIMAL = """
name = "tiny"
policies = ["A"]

[workflows.main]
roles = [["solver", "A"]]

[trainers.A]
batch_size = 8

[raas.r0]
gpus = 2
"""


def test_minimal_file():
    sc = loads_scenario(MINIMAL)
    assert sc.name == "tiny" and sc.policies == ("A",)
    assert sc.trainer("A").batch_size == 8
    (r,) = sc.raas
    assert r.uid == "r0" and r.gpus == 2 and r.workflow == "main"
    assert sc.primary_trainer == "A"


def test_undeclared_policy_in_workflow():
    text = MINIMAL.replace('roles = [["solver", "A"]]', 'roles = [["solver", "A"], ["judge", "Z"]]')
    with pytest.raises(ScenarioValidationError) as e:
        loads_scenario(text)
    assert e.value.invariant == "unknown-policy"


def test_syntax_error_reports_line():
    with pytest.raises(ScenarioParseError) as e:
        loads_scenario(MINIMAL + "\n[trainers.B\n")
    assert e.value.line == MINIMAL.count("\n") + 2


def test_unknown_key_reports_field():
    with pytest.raises(ScenarioParseError) as e:
        loads_scenario(MINIMAL.replace("gpus = 2", "gpus = 2\nspeed = 3"))
    assert e.value.field == "raas.r0" and "speed" in str(e.value)


def test_type_error_reports_field():
    with pytest.raises(ScenarioParseError) as e:
        loads_scenario(MINIMAL.replace("batch_size = 8", 'batch_size = "eight"'))
    assert e.value.field == "trainers.A.batch_size"


def test_unknown_link():
    with pytest.raises(ScenarioValidationError) as e:
        loads_scenario(MINIMAL.replace("gpus = 2", 'gpus = 2\nlink = "nowhere"'))
    assert e.value.invariant == "unknown-link"


def test_extends_relative_and_preset(tmp_path):
    (tmp_path / "base.toml").write_text(MINIMAL)
    child = tmp_path / "child.toml"
    child.write_text('extends = "base.toml"\nname = "child"\n[trainers.A]\nstep_seconds_per_token = 0.01\n')
    sc = load_scenario(child)
    assert sc.name == "child"
    assert sc.trainer("A").batch_size == 8 and sc.trainer("A").step_seconds_per_token == 0.01
    held = loads_scenario('extends = "preset:cross_region"\nname = "x"\n[sync]\nfull_sync_interval = 10\n')
    assert held.sync.full_sync_interval == 10 and len(held.raas) == 3


def test_cross_region_preset_values():
    sc = load_preset("cross_region")
    assert [r.throughput_share for r in sc.raas] == [1.0, 0.6, 0.3]
    assert all(r.gpus == 4 for r in sc.raas)
    remote = [r for r in sc.raas if r.uid != "local"]
    assert remote and all(r.link.bandwidth_bits_per_sec == 4e9 and r.link.rtt_seconds == 0.3 for r in remote)
    assert sc.sync.full_sync_interval == 20
    assert sc.trainer("A").target_sparsity == 0.989


def test_all_presets_load_and_scenario_variants():
    names = list_presets()
    assert {"vanilla", "cross_region", "elastic", "multi_policy"} <= set(names)
    for n in names:
        load_preset(n)
    mp = load_preset("multi_policy")
    solo = mp.solo("A")
    assert [t.policy for t in solo.trainers] == ["A"] and [t.policy for t in solo.frozen] == ["B"]
    assert mp.with_stalled("B").trainer("B").stalled
    el = load_preset("elastic").with_fixed_pool(11)
    assert sum(r.gpus for r in el.raas) == 11 and not el.autoscale.enabled
    assert load_scenario("preset:vanilla").name == "vanilla"
    with pytest.raises(ScenarioParseError):
        load_preset("nope")

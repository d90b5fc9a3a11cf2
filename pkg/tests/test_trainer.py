import numpy as np
import pytest

from rlflow.dataflow import DataflowLayer, RoutingTable
from rlflow.errors import InvalidArgument
from rlflow.trainer import WAITING, TrainerSim, TrainerSpec, downtime_trace, initial_weights, mutate
from rlflow.weights import WeightStore

from conftest import make_group


@pytest.mark.parametrize("n,s", [(1000, 0.989), (12345, 0.9), (10, 0.0), (999, 0.5)])
def test_mutate_flips_exact_count(n, s):
    spec = TrainerSpec("A", element_count=n, target_sparsity=s)
    base = initial_weights(spec)
    out = mutate(base, spec, 7)
    changed = int(np.count_nonzero(out != base))
    expected = int(np.floor((1 - s) * n + 0.5))
    assert changed == expected
    assert np.array_equal(mutate(base, spec, 7), out)  # reproducible
    assert not np.array_equal(mutate(base, spec, 8), out)


def test_spec_validation():
    with pytest.raises(InvalidArgument):
        TrainerSpec("A", target_sparsity=1.0)
    with pytest.raises(InvalidArgument):
        TrainerSpec("A", batch_size=0)
    assert TrainerSpec("A", element_count=10, represented_elements=1000).payload_scale == 100


def setup(batch=4, spt=0.5):
    store = WeightStore()
    spec = TrainerSpec("A", batch_size=batch, step_seconds_per_token=spt, element_count=2000,
                       target_sparsity=0.99)
    tr = TrainerSim(spec, store)
    df = DataflowLayer(RoutingTable.identity(["A"]), latest_versions=store.latest_version)
    df.register_trainer("A", batch)
    return store, tr, df


def test_wait_then_step_publishes_next_version():
    store, tr, df = setup()
    assert store.latest_version("A") == 1
    assert tr.train_step(df, now=2.0) is WAITING
    df.ingest_trajectory_group(make_group([0, 1, 1, 0], tokens=10), 3.0)
    rec = tr.train_step(df, now=5.0)
    assert rec.version == 2 and store.latest_version("A") == 2
    assert rec.wait_seconds == 5.0
    assert rec.step_seconds == pytest.approx(0.5 * 40) and rec.finished == pytest.approx(25.0)
    assert rec.sparsity == pytest.approx(0.99)
    assert rec.fresh_count == 4 and rec.member_policies == ("A",)
    assert downtime_trace(tr.log) == [(2, 5.0)]


def test_poll_while_busy_is_an_error():
    store, tr, df = setup()
    df.ingest_trajectory_group(make_group([0, 1, 1, 0]), 0.0)
    assert tr.poll(df, 0.0)
    with pytest.raises(RuntimeError):
        tr.poll(df, 1.0)
    tr.commit(df, 1.0)
    assert not tr.busy and tr.version == 2

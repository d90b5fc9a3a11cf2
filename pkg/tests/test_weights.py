import struct

import numpy as np
import pytest

from rlflow.errors import (
    BadMagic,
    BadMode,
    IndexOutOfRange,
    LengthMismatch,
    NonMonotoneVersion,
    Truncated,
    TrailingBytes,
    UnsortedIndices,
    VersionMismatch,
)
from rlflow.weights import (
    UP_TO_DATE,
    LinkModel,
    SyncPolicy,
    WeightDelta,
    WeightSnapshot,
    WeightStore,
    apply_delta,
    apply_update,
    compute_delta,
    decode_update,
    encode_update,
    encoded_size,
    header_size,
    transfer_time,
)


def snap(words, version=1, policy="A"):
    return WeightSnapshot(policy, version, np.asarray(words, dtype=np.uint16))


def brute_force_diff(a, b):
    return [(i, int(y)) for i, (x, y) in enumerate(zip(a, b)) if x != y]


def test_delta_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 300))
        a = rng.integers(0, 4, size=n)
        b = a.copy()
        flip = rng.random(n) < rng.random()
        b[flip] = rng.integers(0, 4, size=int(flip.sum()))
        d = compute_delta(snap(a, 3), snap(b, 4))
        assert d.changes == brute_force_diff(a, b)
        assert apply_delta(snap(a, 3), d) == snap(b, 4)


def test_identical_snapshots_give_empty_delta():
    d = compute_delta(snap([1, 2, 3], 1), snap([1, 2, 3], 2))
    assert d.changes == [] and d.sparsity == 1.0


def test_delta_preconditions():
    with pytest.raises(LengthMismatch):
        compute_delta(snap([1, 2], 1), snap([1, 2, 3], 2))
    with pytest.raises(VersionMismatch):
        compute_delta(snap([1], 1), snap([1], 3))
    d = compute_delta(snap([1, 2], 1), snap([1, 3], 2))
    with pytest.raises(VersionMismatch):
        apply_delta(snap([1, 2], 5), d)
    bad = WeightDelta("A", 1, 2, 2, np.array([7], dtype=np.uint32), np.array([1], dtype=np.uint16))
    with pytest.raises(IndexOutOfRange):
        apply_delta(snap([1, 2], 1), bad)


def test_empty_delta_wire_size_is_header_plus_count():
    d = compute_delta(snap(np.zeros(8), 1), snap(np.zeros(8), 2))
    blob = encode_update(d)
    # magic 4 + mode 1 + len 2 + "A" 1 + three u64 + change count u64
    assert len(blob) == 4 + 1 + 2 + 1 + 24 + 8 == 40
    assert header_size("A") == 32


def test_codec_layout_is_little_endian():
    d = WeightDelta("pi", 6, 7, 10, np.array([1, 9], dtype=np.uint32), np.array([0xABCD, 2], dtype=np.uint16))
    blob = encode_update(d)
    assert blob[:4] == b"AWT1" and blob[4] == 1
    assert struct.unpack_from("<H", blob, 5)[0] == 2 and blob[7:9] == b"pi"
    assert struct.unpack_from("<QQQQ", blob, 9) == (6, 7, 10, 2)
    assert struct.unpack_from("<IHIH", blob, 41) == (1, 0xABCD, 9, 2)
    full = encode_update(snap([1, 0x0201], 4))
    assert full[4] == 0 and struct.unpack_from("<QQQ", full, 8) == (4, 4, 2)
    assert full[-4:] == b"\x01\x00\x01\x02"


def test_codec_round_trip_random():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(1, 200))
        a = snap(rng.integers(0, 2**16, n), 10, policy="pol-" + "é" * int(rng.integers(0, 3)))
        b = WeightSnapshot(a.policy, 11, np.where(rng.random(n) < 0.1, rng.integers(0, 2**16, n), a.elements))
        for upd in (a, compute_delta(a, b)):
            blob = encode_update(upd)
            assert len(blob) == encoded_size(upd)
            assert decode_update(blob) == upd


def test_decode_rejects_mutations():
    d = compute_delta(snap([1, 2, 3, 4], 1), snap([9, 2, 8, 4], 2))
    blob = encode_update(d)
    with pytest.raises(BadMagic):
        decode_update(b"XXXX" + blob[4:])
    with pytest.raises(BadMode):
        decode_update(blob[:4] + b"\x07" + blob[5:])
    with pytest.raises(Truncated):
        decode_update(blob[:-1])
    with pytest.raises(Truncated):
        decode_update(blob[:10])
    with pytest.raises(TrailingBytes):
        decode_update(blob + b"\x00")
    # swap the two change records -> unsorted
    head, body = blob[:-12], blob[-12:]
    with pytest.raises(UnsortedIndices):
        decode_update(head + body[6:] + body[:6])
    bad_index = head + struct.pack("<IH", 0, 9) + struct.pack("<IH", 99, 8)
    with pytest.raises(IndexOutOfRange):
        decode_update(bad_index)


def test_decode_random_garbage_never_crashes_uncontrolled():
    from rlflow.errors import CodecError, WeightError

    rng = np.random.default_rng(2)
    blob = encode_update(compute_delta(snap(np.arange(50), 1), snap(np.arange(50) * 3, 2)))
    for _ in range(500):
        b = bytearray(blob)
        for _ in range(int(rng.integers(1, 4))):
            b[int(rng.integers(0, len(b)))] = int(rng.integers(0, 256))
        try:
            decode_update(bytes(b))
        except (CodecError, WeightError):
            pass


def test_transfer_time_model():
    link = LinkModel(4e9, 0.3)
    assert transfer_time(0, link) == pytest.approx(0.3)
    assert transfer_time(1.5e9, link) == pytest.approx(0.3 + 3.0, abs=1e-9)
    assert transfer_time(28e9, link) == pytest.approx(0.3 + 56.0, abs=1e-9)


class TestStore:
    def publish_chain(self, store, n, size=16, policy="A"):
        rng = np.random.default_rng(5)
        cur = rng.integers(0, 2**16, size)
        snaps = []
        for v in range(1, n + 1):
            if v > 1:
                cur = cur.copy()
                cur[int(rng.integers(0, size))] ^= 1
            s = WeightSnapshot(policy, v, cur)
            store.publish(s, float(v))
            snaps.append(s)
        return snaps

    def test_pull_modes(self):
        store = WeightStore(SyncPolicy(full_sync_interval=20, max_delta_chain=4))
        snaps = self.publish_chain(store, 7)
        assert isinstance(store.pull_update("A", 0), WeightSnapshot)
        assert store.pull_update("A", 7) is UP_TO_DATE
        chain = store.pull_update("A", 4)
        assert [d.to_version for d in chain] == [5, 6, 7]
        assert apply_update(snaps[3], chain) == snaps[6]
        assert isinstance(store.pull_update("A", 2), WeightSnapshot)  # gap 5 > chain limit

    def test_full_sync_version_forces_full(self):
        store = WeightStore(SyncPolicy(full_sync_interval=5, max_delta_chain=4))
        self.publish_chain(store, 5)
        assert isinstance(store.pull_update("A", 4), WeightSnapshot)

    def test_monotone_and_errors(self):
        store = WeightStore()
        self.publish_chain(store, 3)
        with pytest.raises(NonMonotoneVersion):
            store.publish(snap(np.zeros(16), 3), 0.0)
        with pytest.raises(VersionMismatch):
            store.pull_update("A", 9)
        from rlflow.errors import UnknownPolicy

        with pytest.raises(UnknownPolicy):
            store.pull_update("nope", 0)

    def test_retention(self):
        store = WeightStore(SyncPolicy(full_sync_interval=6, max_delta_chain=3))
        self.publish_chain(store, 30)
        assert store.record("A", 24) is None and store.record("A", 25) is not None
        assert store.record("A", 30).full_sync
        assert store.retained_deltas == 6


def test_random_publish_pull_schedules_converge():
    rng = np.random.default_rng(3)
    for trial in range(300):
        store = WeightStore(SyncPolicy(int(rng.integers(1, 8)), int(rng.integers(1, 6))))
        n = int(rng.integers(1, 40))
        cur = rng.integers(0, 2**16, n)
        store.publish(WeightSnapshot("A", 1, cur), 0.0)
        clients = [None] * 3
        for v in range(2, int(rng.integers(2, 30))):
            cur = cur.copy()
            k = int(rng.integers(0, n + 1))
            cur[rng.choice(n, size=k, replace=False)] = rng.integers(0, 2**16, k)
            store.publish(WeightSnapshot("A", v, cur), float(v))
            for i in range(3):
                if rng.random() < 0.4:
                    have = clients[i].version if clients[i] else 0
                    clients[i] = apply_update(clients[i], store.pull_update("A", have))
        for i in range(3):
            have = clients[i].version if clients[i] else 0
            clients[i] = apply_update(clients[i], store.pull_update("A", have))
            assert clients[i] == store.latest("A")

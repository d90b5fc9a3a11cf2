"""Versioned weight store, bit-exact sparse deltas and the ``AWT1`` wire codec.

Weights are opaque 16-bit words (the bit patterns of bf16 values). Two
words are "equal" only if their bits are; nothing here interprets them
numerically, so every operation is exact.

Wire format (all integers little-endian)::

    magic        4 bytes  b"AWT1"
    mode         u8       0 = full snapshot, 1 = delta
    policy_len   u16      followed by policy_len bytes of UTF-8
    from_version u64      (equals to_version for a full snapshot)
    to_version   u64
    element_cnt  u64
    full:  element_cnt x u16 words
    delta: change_cnt u64, then change_cnt x (u32 index, u16 word)
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import (
    BadMagic,
    BadMode,
    IndexOutOfRange,
    InvalidArgument,
    LengthMismatch,
    NonMonotoneVersion,
    TrailingBytes,
    Truncated,
    UnsortedIndices,
    VersionMismatch,
)

MAGIC = b"AWT1"
MODE_FULL = 0
MODE_DELTA = 1
MAX_INDEX = 2**32 - 1

_HEAD = struct.Struct("<4sBH")
_VERSIONS = struct.Struct("<QQQ")
_COUNT = struct.Struct("<Q")
_CHANGE_DTYPE = np.dtype([("index", "<u4"), ("word", "<u2")])


@dataclass(frozen=True, eq=False)
class WeightSnapshot:
    policy: str
    version: int
    elements: np.ndarray  # uint16, treated as read-only

    def __post_init__(self):
        arr = np.ascontiguousarray(self.elements, dtype=np.uint16)
        arr.setflags(write=False)
        object.__setattr__(self, "elements", arr)
        if self.version < 0:
            raise InvalidArgument("negative version")

    def __len__(self):
        return len(self.elements)

    def __eq__(self, other):
        if not isinstance(other, WeightSnapshot):
            return NotImplemented
        return (
            self.policy == other.policy
            and self.version == other.version
            and np.array_equal(self.elements, other.elements)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class WeightDelta:
    policy: str
    from_version: int
    to_version: int
    element_count: int
    indices: np.ndarray  # uint32, strictly ascending
    words: np.ndarray  # uint16, same length as indices

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.uint32)
        w = np.ascontiguousarray(self.words, dtype=np.uint16)
        if idx.shape != w.shape:
            raise InvalidArgument("indices and words differ in length")
        idx.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "words", w)

    @property
    def changes(self) -> list[tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.words.tolist()))

    @property
    def sparsity(self) -> float:
        return 1.0 - len(self.indices) / self.element_count

    def __eq__(self, other):
        if not isinstance(other, WeightDelta):
            return NotImplemented
        return (
            self.policy == other.policy
            and self.from_version == other.from_version
            and self.to_version == other.to_version
            and self.element_count == other.element_count
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.words, other.words)
        )

    __hash__ = None


Update = Union[WeightSnapshot, WeightDelta]


@dataclass(frozen=True)
class SyncPolicy:
    full_sync_interval: int = 20
    max_delta_chain: int = 4

    def __post_init__(self):
        if self.full_sync_interval < 1 or self.max_delta_chain < 1:
            raise InvalidArgument("full_sync_interval and max_delta_chain must be >= 1")


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bits_per_sec: float
    rtt_seconds: float = 0.0

    def __post_init__(self):
        if not self.bandwidth_bits_per_sec > 0:
            raise InvalidArgument("bandwidth must be positive")
        if self.rtt_seconds < 0:
            raise InvalidArgument("rtt must be non-negative")


def transfer_time(nbytes: float, link: LinkModel) -> float:
    """Single-stream model: one round trip plus serialisation time."""
    if nbytes < 0:
        raise InvalidArgument("negative byte count")
    return link.rtt_seconds + 8.0 * nbytes / link.bandwidth_bits_per_sec


# -- deltas ---------------------------------------------------------------


def compute_delta(prev: WeightSnapshot, next: WeightSnapshot) -> WeightDelta:
    if prev.policy != next.policy:
        raise VersionMismatch(f"policy {prev.policy!r} != {next.policy!r}")
    if len(prev) != len(next):
        raise LengthMismatch(f"{len(prev)} != {len(next)} elements")
    if next.version != prev.version + 1:
        raise VersionMismatch(f"expected version {prev.version + 1}, got {next.version}")
    if len(prev) > MAX_INDEX + 1:
        raise IndexOutOfRange("snapshot too large for 32-bit change indices")
    idx = np.flatnonzero(prev.elements != next.elements).astype(np.uint32)
    return WeightDelta(prev.policy, prev.version, next.version, len(prev), idx, next.elements[idx])


def apply_delta(base: WeightSnapshot, delta: WeightDelta) -> WeightSnapshot:
    if base.policy != delta.policy or base.version != delta.from_version:
        raise VersionMismatch(
            f"delta {delta.from_version}->{delta.to_version} does not apply to version {base.version}"
        )
    if len(base) != delta.element_count:
        raise LengthMismatch(f"{len(base)} != {delta.element_count} elements")
    if len(delta.indices) and int(delta.indices[-1]) >= len(base):
        raise IndexOutOfRange(f"index {int(delta.indices[-1])} >= {len(base)}")
    out = base.elements.copy()
    out[delta.indices] = delta.words
    return WeightSnapshot(base.policy, delta.to_version, out)


# -- codec ----------------------------------------------------------------


def header_size(policy: str) -> int:
    return _HEAD.size + len(policy.encode("utf-8")) + _VERSIONS.size


def encoded_size(update: Update) -> int:
    """Byte length of ``encode_update(update)`` without building it."""
    if isinstance(update, WeightSnapshot):
        return header_size(update.policy) + 2 * len(update)
    return header_size(update.policy) + _COUNT.size + 6 * len(update.indices)


def encode_update(update: Update) -> bytes:
    if isinstance(update, WeightSnapshot):
        mode, from_v, to_v, n = MODE_FULL, update.version, update.version, len(update)
    elif isinstance(update, WeightDelta):
        mode, from_v, to_v, n = MODE_DELTA, update.from_version, update.to_version, update.element_count
    else:
        raise InvalidArgument(f"cannot encode {type(update).__name__}")
    pol = update.policy.encode("utf-8")
    if len(pol) > 0xFFFF:
        raise InvalidArgument("policy id too long")
    parts = [_HEAD.pack(MAGIC, mode, len(pol)), pol, _VERSIONS.pack(from_v, to_v, n)]
    if mode == MODE_FULL:
        parts.append(update.elements.astype("<u2", copy=False).tobytes())
    else:
        if len(update.indices) > 1 and not np.all(np.diff(update.indices.astype(np.int64)) > 0):
            raise UnsortedIndices("delta indices must be strictly ascending")
        rec = np.empty(len(update.indices), dtype=_CHANGE_DTYPE)
        rec["index"] = update.indices
        rec["word"] = update.words
        parts.append(_COUNT.pack(len(rec)))
        parts.append(rec.tobytes())
    return b"".join(parts)


def _take(buf: memoryview, pos: int, n: int) -> memoryview:
    if pos + n > len(buf):
        raise Truncated(f"need {n} bytes at offset {pos}, have {len(buf) - pos}")
    return buf[pos : pos + n]


def decode_update(data: bytes) -> Update:
    buf = memoryview(data)
    magic, mode, plen = _HEAD.unpack(_take(buf, 0, _HEAD.size))
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if mode not in (MODE_FULL, MODE_DELTA):
        raise BadMode(f"unknown mode {mode}")
    pos = _HEAD.size
    try:
        policy = bytes(_take(buf, pos, plen)).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadMagic(f"policy id is not UTF-8: {exc}") from None
    pos += plen
    from_v, to_v, n = _VERSIONS.unpack(_take(buf, pos, _VERSIONS.size))
    pos += _VERSIONS.size

    if mode == MODE_FULL:
        if from_v != to_v:
            raise VersionMismatch("full snapshot with from_version != to_version")
        if 2 * n > len(buf) - pos:
            raise Truncated(f"full payload needs {2 * n} bytes, have {len(buf) - pos}")
        words = np.frombuffer(_take(buf, pos, 2 * n), dtype="<u2").astype(np.uint16)
        pos += 2 * n
        result: Update = WeightSnapshot(policy, to_v, words)
    else:
        (count,) = _COUNT.unpack(_take(buf, pos, _COUNT.size))
        pos += _COUNT.size
        if count > n:
            raise Truncated(f"change count {count} exceeds element count {n}")
        if 6 * count > len(buf) - pos:
            raise Truncated(f"delta payload needs {6 * count} bytes, have {len(buf) - pos}")
        rec = np.frombuffer(_take(buf, pos, 6 * count), dtype=_CHANGE_DTYPE)
        pos += 6 * count
        idx = rec["index"].astype(np.uint32)
        if count > 1 and not np.all(np.diff(idx.astype(np.int64)) > 0):
            raise UnsortedIndices("delta indices are not strictly ascending")
        if count and int(idx[-1]) >= n:
            raise IndexOutOfRange(f"index {int(idx[-1])} >= element count {n}")
        result = WeightDelta(policy, from_v, to_v, n, idx, rec["word"].astype(np.uint16))
    if pos != len(buf):
        raise TrailingBytes(f"{len(buf) - pos} trailing bytes")
    return result


# -- store ----------------------------------------------------------------


@dataclass
class StoredVersion:
    version: int
    full_sync: bool
    published_at: float
    delta: WeightDelta | None  # from version - 1; None for the first publish
    delta_bytes: int
    full_bytes: int


class UpToDate:
    """Sentinel result of :meth:`WeightStore.pull_update`."""

    def __repr__(self):
        return "UP_TO_DATE"


UP_TO_DATE = UpToDate()


@dataclass
class _PolicyState:
    records: "OrderedDict[int, StoredVersion]" = field(default_factory=OrderedDict)
    snapshots: "OrderedDict[int, WeightSnapshot]" = field(default_factory=OrderedDict)
    latest: int = 0


class WeightStore:
    """Trainer-side publication target that RaaS nodes pull from.

    Retains the deltas for the last ``max(full_sync_interval,
    max_delta_chain)`` versions and the two most recent full snapshots.
    One publisher per policy; any number of concurrent pullers.
    """

    def __init__(self, sync: SyncPolicy | None = None):
        self.sync = sync or SyncPolicy()
        self._lock = threading.Lock()
        self._policies: dict[str, _PolicyState] = {}

    @property
    def retained_deltas(self) -> int:
        return max(self.sync.full_sync_interval, self.sync.max_delta_chain)

    def publish(self, snapshot: WeightSnapshot, now: float = 0.0) -> StoredVersion:
        with self._lock:
            st = self._policies.setdefault(snapshot.policy, _PolicyState())
            if snapshot.version <= st.latest:
                raise NonMonotoneVersion(
                    f"{snapshot.policy}: version {snapshot.version} after {st.latest}"
                )
            delta = None
            prev = st.snapshots.get(snapshot.version - 1)
            if prev is not None:
                delta = compute_delta(prev, snapshot)
            rec = StoredVersion(
                version=snapshot.version,
                full_sync=snapshot.version % self.sync.full_sync_interval == 0,
                published_at=now,
                delta=delta,
                delta_bytes=encoded_size(delta) if delta is not None else 0,
                full_bytes=encoded_size(snapshot),
            )
            st.records[snapshot.version] = rec
            st.snapshots[snapshot.version] = snapshot
            st.latest = snapshot.version
            while len(st.snapshots) > 2:
                st.snapshots.popitem(last=False)
            while len(st.records) > self.retained_deltas:
                st.records.popitem(last=False)
            return rec

    def latest_version(self, policy: str) -> int:
        with self._lock:
            st = self._policies.get(policy)
            return st.latest if st else 0

    def latest(self, policy: str) -> WeightSnapshot:
        with self._lock:
            st = self._state(policy)
            return st.snapshots[st.latest]

    def record(self, policy: str, version: int) -> StoredVersion | None:
        with self._lock:
            return self._state(policy).records.get(version)

    def policies(self) -> list[str]:
        with self._lock:
            return list(self._policies)

    def _state(self, policy: str) -> _PolicyState:
        try:
            return self._policies[policy]
        except KeyError:
            from .errors import UnknownPolicy

            raise UnknownPolicy(policy, policy) from None

    def pull_update(self, policy: str, client_version: int):
        """Return ``UP_TO_DATE``, an ordered list of deltas, or a full snapshot."""
        with self._lock:
            st = self._state(policy)
            latest = st.latest
            if client_version == latest:
                return UP_TO_DATE
            if client_version > latest:
                raise VersionMismatch(f"client at {client_version} is ahead of latest {latest}")
            gap = latest - client_version
            if client_version >= 1 and gap <= self.sync.max_delta_chain and not st.records[latest].full_sync:
                chain = []
                for v in range(client_version + 1, latest + 1):
                    rec = st.records.get(v)
                    if rec is None or rec.delta is None:
                        break
                    chain.append(rec.delta)
                else:
                    return chain
            return st.snapshots[latest]


def update_bytes(update) -> int:
    """Wire bytes for a pull result (sum over a delta chain)."""
    if update is UP_TO_DATE:
        return 0
    if isinstance(update, list):
        return sum(encoded_size(d) for d in update)
    return encoded_size(update)


def apply_update(current: WeightSnapshot | None, update) -> WeightSnapshot:
    """Client-side application of a :meth:`WeightStore.pull_update` result."""
    if update is UP_TO_DATE:
        if current is None:
            raise VersionMismatch("client holds no weights")
        return current
    if isinstance(update, WeightSnapshot):
        return update
    if current is None:
        raise VersionMismatch("delta chain needs a base snapshot")
    for d in update:
        current = apply_delta(current, d)
    return current

"""Concurrent connection table: 2-choice cuckoo hashing, 4 slots per bucket.

Reads are lock-free.  A reader samples the slot's version counter, reads the
(key, value, ttl) triple, performs the blind TTL refresh, then re-checks the
version: an odd or changed version means a writer touched the slot and the
read retries.  Writers (insert, relocation moves, remove, sweep eviction)
serialize on striped bucket locks and bump the version to odd for the
duration of the slot mutation.  Relocation chains are discovered without any
locks and executed in reverse, one version-guarded move at a time; a move
that fails verification is abandoned and the chain is re-discovered.
Completed moves are never rolled back — a key sitting in either of its two
candidate buckets keeps the cuckoo invariant.

Two storages back the same algorithm:

  ListStorage        plain Python lists + threading locks; values are
                     arbitrary objects.  Used by the simulator and by
                     thread-based tests.
  SharedMemStorage   an anonymous shared mmap + multiprocessing locks;
                     values are u64 ints (callers keep a side registry).
                     Fork-inherited, so genuinely parallel worker processes
                     can hammer one table; used by the stress suite and the
                     table bench.
"""

from __future__ import annotations

import mmap
import multiprocessing as mp
import threading
from dataclasses import dataclass
from typing import Any, Iterator, Optional

from .packet import FlowKey

_M64 = (1 << 64) - 1
_OCCUPIED = 1 << 63
_SLOT_WORDS = 5  # version, key_hi, key_lo, value, ttl


class TableFullError(RuntimeError):
    """No relocation path exists within the configured depth bound."""


@dataclass(frozen=True)
class TableConfig:
    bucket_count: int = 4096
    slots_per_bucket: int = 4
    max_relocation_path: int = 5
    ttl_delta: float = 60.0
    lock_stripes: int = 64

    def __post_init__(self):
        if self.bucket_count < 2 or self.bucket_count & (self.bucket_count - 1):
            raise ValueError("bucket_count must be a power of two >= 2")
        if self.slots_per_bucket < 1:
            raise ValueError("slots_per_bucket must be >= 1")
        if self.lock_stripes & (self.lock_stripes - 1):
            raise ValueError("lock_stripes must be a power of two")


def mix64(x: int) -> int:
    """splitmix64 finalizer; stable across runs (unlike builtin hash)."""
    x &= _M64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _M64
    x ^= x >> 31
    return x


def _hash_pair(kp: int) -> tuple[int, int]:
    hi = kp >> 40
    lo = kp & ((1 << 40) - 1)
    h1 = mix64(hi ^ mix64(lo ^ 0x9E3779B97F4A7C15))
    h2 = mix64(hi ^ mix64(lo ^ 0xC2B2AE3D27D4EB4F))
    return h1, h2


class ListStorage:
    """In-process slot arrays.  Single-element list reads/writes are atomic
    under the GIL; multi-field consistency comes from the version protocol."""

    values_are_ints = False

    def __init__(self, n_slots: int, n_stripes: int):
        self.versions = [0] * n_slots
        self.keys = [0] * n_slots
        self.values: list[Any] = [None] * n_slots
        self.ttls = [0.0] * n_slots
        self._locks = [threading.Lock() for _ in range(n_stripes)]

    def version(self, i: int) -> int:
        return self.versions[i]

    def key_at(self, i: int) -> int:
        return self.keys[i]

    def value_at(self, i: int) -> Any:
        return self.values[i]

    def ttl_at(self, i: int) -> float:
        return self.ttls[i]

    def set_ttl(self, i: int, ttl: float) -> None:
        self.ttls[i] = ttl

    def begin_write(self, i: int) -> None:
        self.versions[i] += 1

    def end_write(self, i: int) -> None:
        self.versions[i] += 1

    def set_fields(self, i: int, key: int, value: Any, ttl: float) -> None:
        self.keys[i] = key
        self.values[i] = value
        self.ttls[i] = ttl

    def clear_fields(self, i: int) -> None:
        self.keys[i] = 0
        self.values[i] = None
        self.ttls[i] = 0.0

    def lock(self, stripe: int):
        return self._locks[stripe]


class SharedMemStorage:
    """Slots in an anonymous shared mmap (fork-inherited, no name tracking).

    Slot layout: 5 aligned u64 words — version, key_hi, key_lo | occupied
    bit, value, ttl (float64 bits).  Aligned 8-byte loads are atomic on the
    platforms we care about; writers additionally serialize on striped
    multiprocessing locks.  Values must be u64 ints.
    """

    values_are_ints = True

    def __init__(self, n_slots: int, n_stripes: int):
        self._mm = mmap.mmap(-1, n_slots * _SLOT_WORDS * 8)
        self._q = memoryview(self._mm).cast("Q")
        self._d = memoryview(self._mm).cast("d")
        ctx = mp.get_context("fork")
        self._locks = [ctx.Lock() for _ in range(n_stripes)]

    def version(self, i: int) -> int:
        return self._q[i * _SLOT_WORDS]

    def key_at(self, i: int) -> int:
        base = i * _SLOT_WORDS
        lo = self._q[base + 2]
        if not lo & _OCCUPIED:
            return 0
        return (self._q[base + 1] << 40) | (lo & ~_OCCUPIED)

    def value_at(self, i: int) -> int:
        return self._q[i * _SLOT_WORDS + 3]

    def ttl_at(self, i: int) -> float:
        return self._d[i * _SLOT_WORDS + 4]

    def set_ttl(self, i: int, ttl: float) -> None:
        self._d[i * _SLOT_WORDS + 4] = ttl

    def begin_write(self, i: int) -> None:
        self._q[i * _SLOT_WORDS] += 1

    def end_write(self, i: int) -> None:
        self._q[i * _SLOT_WORDS] += 1

    def set_fields(self, i: int, key: int, value: int, ttl: float) -> None:
        base = i * _SLOT_WORDS
        self._q[base + 1] = key >> 40
        self._q[base + 2] = (key & ((1 << 40) - 1)) | _OCCUPIED
        self._q[base + 3] = value
        self._d[base + 4] = ttl

    def clear_fields(self, i: int) -> None:
        base = i * _SLOT_WORDS
        self._q[base + 1] = 0
        self._q[base + 2] = 0
        self._q[base + 3] = 0
        self._d[base + 4] = 0.0

    def lock(self, stripe: int):
        return self._locks[stripe]


@dataclass
class TableStats:
    lookups: int = 0
    hits: int = 0
    inserts: int = 0
    relocations: int = 0
    removes: int = 0
    sweep_evictions: int = 0
    read_retries: int = 0
    insert_failures: int = 0


class CuckooTable:
    """The connection table.  Thread-safe per the protocol above; with
    SharedMemStorage it is additionally safe across forked processes."""

    # Optimistic read retries before falling back to an authoritative
    # locked scan (prevents reader livelock under heavy relocation churn).
    _READ_RETRIES = 64
    _INSERT_RETRIES = 128

    def __init__(self, config: TableConfig = TableConfig(), shared: bool = False):
        self.config = config
        n_slots = config.bucket_count * config.slots_per_bucket
        cls = SharedMemStorage if shared else ListStorage
        self.storage = cls(n_slots, config.lock_stripes)
        self._mask = config.bucket_count - 1
        self._spb = config.slots_per_bucket
        self._stripe_mask = config.lock_stripes - 1
        self.stats = TableStats()

    # -- bucket helpers ----------------------------------------------------

    def _buckets(self, kp: int) -> tuple[int, int]:
        h1, h2 = _hash_pair(kp)
        return h1 & self._mask, h2 & self._mask

    def _alt_bucket(self, kp: int, b: int) -> int:
        b1, b2 = self._buckets(kp)
        return b2 if b == b1 else b1

    def _stripe(self, bucket: int) -> int:
        return bucket & self._stripe_mask

    def _acquire(self, *buckets: int) -> list:
        stripes = sorted({self._stripe(b) for b in buckets})
        locks = [self.storage.lock(s) for s in stripes]
        for lk in locks:
            lk.acquire()
        return locks

    @staticmethod
    def _release(locks: list) -> None:
        for lk in reversed(locks):
            lk.release()

    # -- read path ----------------------------------------------------------

    def lookup(self, key: FlowKey, now: float) -> Optional[Any]:
        """Find key and blind-refresh its TTL to now + delta.

        The TTL store happens before the final version check; if the check
        fails the (possibly spurious) refresh stands and the lookup retries.
        """
        kp = key.pack()
        b1, b2 = self._buckets(kp)
        st = self.storage
        delta = self.config.ttl_delta
        self.stats.lookups += 1
        slot_ids = [b1 * self._spb + s for s in range(self._spb)]
        if b2 != b1:
            slot_ids += [b2 * self._spb + s for s in range(self._spb)]

        for _ in range(self._READ_RETRIES):
            snapshot = [st.version(i) for i in slot_ids]
            retry = False
            for n, i in enumerate(slot_ids):
                v1 = snapshot[n]
                if v1 & 1:
                    retry = True
                    continue
                if st.key_at(i) != kp:
                    continue
                value = st.value_at(i)
                st.set_ttl(i, now + delta)
                if st.version(i) != v1:
                    retry = True
                    break
                self.stats.hits += 1
                return value
            if not retry:
                # A concurrent move could have hopped the key between the
                # two buckets mid-scan; only a quiet re-read proves a miss.
                if [st.version(i) for i in slot_ids] == snapshot:
                    return None
            self.stats.read_retries += 1
        return self._locked_lookup(kp, b1, b2, now)

    def _locked_lookup(self, kp: int, b1: int, b2: int, now: float) -> Optional[Any]:
        locks = self._acquire(b1, b2)
        try:
            i = self._find_slot(kp, b1, b2)
            if i is None:
                return None
            value = self.storage.value_at(i)
            self.storage.set_ttl(i, now + self.config.ttl_delta)
            self.stats.hits += 1
            return value
        finally:
            self._release(locks)

    def _find_slot(self, kp: int, b1: int, b2: int) -> Optional[int]:
        for b in (b1, b2) if b1 != b2 else (b1,):
            base = b * self._spb
            for s in range(self._spb):
                if self.storage.key_at(base + s) == kp:
                    return base + s
        return None

    # -- write path ----------------------------------------------------------

    def insert(self, key: FlowKey, value: Any, now: float = 0.0) -> None:
        """Insert or replace.  Raises TableFullError when no relocation path
        of length <= max_relocation_path frees a candidate slot."""
        kp = key.pack()
        if kp == 0:
            raise ValueError("all-zero key is reserved for empty slots")
        if self.storage.values_are_ints and not isinstance(value, int):
            raise TypeError("shared-memory table stores int handles only")
        b1, b2 = self._buckets(kp)
        ttl = now + self.config.ttl_delta
        st = self.storage

        for _ in range(self._INSERT_RETRIES):
            locks = self._acquire(b1, b2)
            try:
                existing = self._find_slot(kp, b1, b2)
                if existing is not None:
                    st.begin_write(existing)
                    st.set_fields(existing, kp, value, ttl)
                    st.end_write(existing)
                    self.stats.inserts += 1
                    return
                i = self._empty_slot(b1)
                if i is None:
                    i = self._empty_slot(b2)
                if i is not None:
                    st.begin_write(i)
                    st.set_fields(i, kp, value, ttl)
                    st.end_write(i)
                    self.stats.inserts += 1
                    return
            finally:
                self._release(locks)

            path = self._find_path(b1, b2)
            if path is None:
                self.stats.insert_failures += 1
                raise TableFullError(
                    f"no relocation path within {self.config.max_relocation_path} moves")
            if self._execute_path(path):
                continue  # a candidate slot should now be free; retry placement
        raise TableFullError("insert livelock: relocation kept failing verification")

    def _empty_slot(self, b: int) -> Optional[int]:
        base = b * self._spb
        for s in range(self._spb):
            if self.storage.key_at(base + s) == 0:
                return base + s
        return None

    def _find_path(self, b1: int, b2: int) -> Optional[list[tuple[int, int]]]:
        """BFS for a displacement chain ending at a bucket with a free slot.

        Returns [(slot_index, expected_key), ...] ordered from the first
        displaced slot to the last; executed in reverse.  Lock-free: every
        expectation is re-verified under locks at execution time.
        """
        st = self.storage
        depth_limit = self.config.max_relocation_path
        frontier: list[tuple[int, list[tuple[int, int]]]] = [(b1, [])]
        if b2 != b1:
            frontier.append((b2, []))
        seen = {b1, b2}
        for _ in range(depth_limit):
            nxt: list[tuple[int, list[tuple[int, int]]]] = []
            for b, chain in frontier:
                base = b * self._spb
                for s in range(self._spb):
                    i = base + s
                    kp = st.key_at(i)
                    if kp == 0:
                        continue
                    alt = self._alt_bucket(kp, b)
                    if alt == b:
                        continue  # both hashes map here; immovable
                    step = chain + [(i, kp)]
                    if self._empty_slot(alt) is not None:
                        return step
                    if alt not in seen:
                        seen.add(alt)
                        nxt.append((alt, step))
            frontier = nxt
            if not frontier:
                break
        return None

    def _execute_path(self, path: list[tuple[int, int]]) -> bool:
        """Run moves deepest-first.  Each move re-verifies its source slot and
        needs an actually-empty destination; any mismatch aborts the chain
        (already-completed moves are legal and stand)."""
        st = self.storage
        for i, expected_kp in reversed(path):
            b_from = i // self._spb
            b_to = self._alt_bucket(expected_kp, b_from)
            locks = self._acquire(b_from, b_to)
            try:
                if st.key_at(i) != expected_kp:
                    return False
                j = self._empty_slot(b_to)
                if j is None:
                    return False
                value = st.value_at(i)
                ttl = st.ttl_at(i)
                st.begin_write(j)
                st.set_fields(j, expected_kp, value, ttl)
                st.end_write(j)
                st.begin_write(i)
                st.clear_fields(i)
                st.end_write(i)
                self.stats.relocations += 1
            finally:
                self._release(locks)
        return True

    def remove(self, key: FlowKey) -> bool:
        kp = key.pack()
        b1, b2 = self._buckets(kp)
        locks = self._acquire(b1, b2)
        try:
            i = self._find_slot(kp, b1, b2)
            if i is None:
                return False
            self.storage.begin_write(i)
            self.storage.clear_fields(i)
            self.storage.end_write(i)
            self.stats.removes += 1
            return True
        finally:
            self._release(locks)

    def sweep_expired(self, now: float) -> list[tuple[FlowKey, Any]]:
        """Remove and return entries whose ttl_expiry < now at scan time.
        Entries refreshed concurrently (including spurious blind-write
        refreshes) are retained; the expiry is re-checked under the lock."""
        st = self.storage
        evicted: list[tuple[FlowKey, Any]] = []
        for b in range(self.config.bucket_count):
            base = b * self._spb
            candidates = []
            for s in range(self._spb):
                i = base + s
                v = st.version(i)
                if v & 1:
                    continue
                kp = st.key_at(i)
                if kp != 0 and st.ttl_at(i) < now and st.version(i) == v:
                    candidates.append((i, kp))
            if not candidates:
                continue
            locks = self._acquire(b)
            try:
                for i, kp in candidates:
                    if st.key_at(i) != kp or st.ttl_at(i) >= now:
                        continue
                    value = st.value_at(i)
                    st.begin_write(i)
                    st.clear_fields(i)
                    st.end_write(i)
                    evicted.append((FlowKey.unpack(kp), value))
                    self.stats.sweep_evictions += 1
            finally:
                self._release(locks)
        return evicted

    # -- introspection -------------------------------------------------------

    def __len__(self) -> int:
        st = self.storage
        return sum(1 for i in range(self.config.bucket_count * self._spb)
                   if st.key_at(i) != 0)

    def items(self) -> Iterator[tuple[FlowKey, Any]]:
        st = self.storage
        for i in range(self.config.bucket_count * self._spb):
            kp = st.key_at(i)
            if kp != 0:
                yield FlowKey.unpack(kp), st.value_at(i)

    def load_factor(self) -> float:
        return len(self) / (self.config.bucket_count * self._spb)

    def ttl_of(self, key: FlowKey) -> Optional[float]:
        """Test hook: current ttl_expiry of key's slot (no refresh)."""
        kp = key.pack()
        i = self._find_slot(kp, *self._buckets(kp))
        return None if i is None else self.storage.ttl_at(i)

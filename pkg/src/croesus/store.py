"""Per-partition key-value storage and a shared/exclusive lock manager.

Locking serves two drivers.  The blocking API (``acquire_locks``) waits on
wall-clock timeouts and is safe for multi-threaded callers.  The non-blocking
primitives (``try_lock`` / ``enqueue`` / ``cancel`` / ``unlock``) let a
single-threaded event scheduler run the same FIFO grant discipline under
logical time.

Batch acquisition walks keys in ascending order, which rules out deadlocks
among callers that each issue one batch.  Callers that issue two batches
(initial-section locks, then final-section locks) can still deadlock across
batches; that is handled by timeout-and-abort, never by blocking forever.
"""

from __future__ import annotations

import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping


class ProtocolViolation(Exception):
    """A caller broke a locking or access contract (programming error)."""


class LockMode(Enum):
    SHARED = "S"
    EXCLUSIVE = "X"


@dataclass
class Value:
    payload: object
    writer: str
    version: int


@dataclass
class _Waiter:
    txn_id: str
    key: str
    mode: LockMode
    wake: Callable[[], None]
    granted: bool = False
    cancelled: bool = False


class _KeyLock:
    __slots__ = ("holders", "queue")

    def __init__(self):
        self.holders: dict[str, LockMode] = {}
        self.queue: deque[_Waiter] = deque()

    def compatible(self, txn_id: str, mode: LockMode) -> bool:
        for holder, held in self.holders.items():
            if holder == txn_id:
                continue
            if held is LockMode.EXCLUSIVE or mode is LockMode.EXCLUSIVE:
                return False
        return True


def coalesce_requests(
    requests: Iterable[tuple[str, LockMode]],
) -> list[tuple[str, LockMode]]:
    """Deduplicate a request batch, keeping the strongest mode per key, sorted."""
    strongest: dict[str, LockMode] = {}
    for key, mode in requests:
        cur = strongest.get(key)
        if cur is None or (cur is LockMode.SHARED and mode is LockMode.EXCLUSIVE):
            strongest[key] = mode
    return sorted(strongest.items())


class LockTable:
    """S/X lock table with FIFO waiters and all-or-nothing batch acquisition."""

    def __init__(self):
        self._mu = threading.RLock()
        self._keys: dict[str, _KeyLock] = {}

    # -- non-blocking core --------------------------------------------------

    def holds(self, txn_id: str, key: str) -> LockMode | None:
        with self._mu:
            kl = self._keys.get(key)
            return kl.holders.get(txn_id) if kl else None

    def try_lock(self, txn_id: str, key: str, mode: LockMode) -> str:
        """Attempt an immediate grant.

        Returns one of:
          "noop"          already held at an equal or stronger mode
          "granted"       newly granted
          "upgraded"      S->X upgrade succeeded (sole holder)
          "wait"          must queue behind current holders/waiters
          "upgrade-busy"  S->X requested while other holders exist (fail fast)
        """
        with self._mu:
            kl = self._keys.setdefault(key, _KeyLock())
            held = kl.holders.get(txn_id)
            if held is not None:
                if held is LockMode.EXCLUSIVE or mode is held or mode is LockMode.SHARED:
                    return "noop"
                # upgrade allowed only for the sole holder, else fail fast
                if len(kl.holders) == 1:
                    kl.holders[txn_id] = LockMode.EXCLUSIVE
                    return "upgraded"
                return "upgrade-busy"
            if kl.queue or not kl.compatible(txn_id, mode):
                return "wait"
            kl.holders[txn_id] = mode
            return "granted"

    def enqueue(self, txn_id: str, key: str, mode: LockMode, wake: Callable[[], None]) -> _Waiter:
        waiter = _Waiter(txn_id, key, mode, wake)
        with self._mu:
            self._keys.setdefault(key, _KeyLock()).queue.append(waiter)
        return waiter

    def cancel(self, waiter: _Waiter) -> bool:
        """Remove a queued waiter; returns False if it was already granted."""
        with self._mu:
            if waiter.granted:
                return False
            waiter.cancelled = True
            kl = self._keys.get(waiter.key)
            if kl is not None:
                try:
                    kl.queue.remove(waiter)
                except ValueError:
                    pass
            return True

    def unlock(self, txn_id: str, key: str) -> list[_Waiter]:
        """Release one key and grant the longest-waiting compatible waiters."""
        with self._mu:
            kl = self._keys.get(key)
            if kl is None or txn_id not in kl.holders:
                raise ProtocolViolation(f"{txn_id} releases {key!r} it does not hold")
            del kl.holders[txn_id]
            granted = self._grant_from_queue(kl)
            if not kl.holders and not kl.queue:
                del self._keys[key]
        for waiter in granted:
            waiter.wake()
        return granted

    def downgrade(self, txn_id: str, key: str) -> list[_Waiter]:
        """Roll an upgrade back to SHARED (used when a batch acquisition fails)."""
        with self._mu:
            kl = self._keys.get(key)
            if kl is None or kl.holders.get(txn_id) is not LockMode.EXCLUSIVE:
                raise ProtocolViolation(f"{txn_id} downgrades {key!r} it does not hold exclusively")
            kl.holders[txn_id] = LockMode.SHARED
            granted = self._grant_from_queue(kl)
        for waiter in granted:
            waiter.wake()
        return granted

    def _grant_from_queue(self, kl: _KeyLock) -> list[_Waiter]:
        # FIFO, no barging: grant the head run of compatible waiters and stop
        # at the first incompatible one.
        granted = []
        while kl.queue:
            waiter = kl.queue[0]
            if not kl.compatible(waiter.txn_id, waiter.mode):
                break
            kl.queue.popleft()
            kl.holders[waiter.txn_id] = waiter.mode
            waiter.granted = True
            granted.append(waiter)
        return granted

    def held_keys(self, txn_id: str) -> list[str]:
        with self._mu:
            return sorted(k for k, kl in self._keys.items() if txn_id in kl.holders)

    def waiters(self, key: str) -> list[tuple[str, LockMode]]:
        with self._mu:
            kl = self._keys.get(key)
            return [(w.txn_id, w.mode) for w in kl.queue] if kl else []

    def holders(self, key: str) -> dict[str, LockMode]:
        with self._mu:
            kl = self._keys.get(key)
            return dict(kl.holders) if kl else {}

    def audit(self) -> None:
        """Assert lock-table invariants; raises AssertionError on corruption."""
        with self._mu:
            for key, kl in self._keys.items():
                exclusive = [t for t, m in kl.holders.items() if m is LockMode.EXCLUSIVE]
                if len(exclusive) > 1:
                    raise AssertionError(f"two exclusive holders on {key!r}")
                if exclusive and len(kl.holders) != 1:
                    raise AssertionError(f"exclusive lock on {key!r} coexists with other holders")
                for waiter in kl.queue:
                    if waiter.txn_id in kl.holders:
                        raise AssertionError(f"{waiter.txn_id} queued on {key!r} while holding it")

    # -- blocking driver ------------------------------------------------------

    def acquire_locks(
        self, txn_id: str, requests: Iterable[tuple[str, LockMode]], timeout_ms: float = 50.0
    ) -> bool:
        """Acquire a batch atomically; on timeout nothing from this call stays held."""
        return _acquire_blocking(lambda _key: self, txn_id, requests, timeout_ms)

    def release_locks(self, txn_id: str, keys: Iterable[str] | None = None) -> None:
        targets = self.held_keys(txn_id) if keys is None else sorted(keys)
        for key in targets:
            self.unlock(txn_id, key)


def _acquire_blocking(
    table_for: Callable[[str], LockTable],
    txn_id: str,
    requests: Iterable[tuple[str, LockMode]],
    timeout_ms: float,
) -> bool:
    if timeout_ms < 0:
        raise ValueError("timeout must be >= 0")
    reqs = coalesce_requests(requests)
    deadline = time.monotonic() + timeout_ms / 1000.0
    undo: list[tuple[str, LockMode | None]] = []

    def rollback() -> None:
        for key, prior in reversed(undo):
            table = table_for(key)
            if prior is LockMode.SHARED:
                table.downgrade(txn_id, key)
            else:
                table.unlock(txn_id, key)

    for key, mode in reqs:
        table = table_for(key)
        prior = table.holds(txn_id, key)
        status = table.try_lock(txn_id, key, mode)
        if status == "noop":
            continue
        if status in ("granted", "upgraded"):
            undo.append((key, prior))
            continue
        if status == "upgrade-busy":
            rollback()
            return False
        event = threading.Event()
        waiter = table.enqueue(txn_id, key, mode, event.set)
        remaining = deadline - time.monotonic()
        if remaining <= 0 or not event.wait(remaining):
            if table.cancel(waiter):
                rollback()
                return False
            # granted concurrently with the timeout: keep it and move on
        undo.append((key, None))
    return True


def partition_id(key: str, n_partitions: int) -> int:
    # crc32 rather than hash(): stable across processes, which determinism needs
    return zlib.crc32(key.encode("utf-8")) % n_partitions


class Partition:
    """One partition's committed values plus its lock table."""

    def __init__(self, pid: int, *, enforce: bool = True):
        self.pid = pid
        self.locks = LockTable()
        self._data: dict[str, Value] = {}
        self._enforce = enforce

    def read(self, key: str, *, txn_id: str | None = None) -> Value | None:
        if self._enforce:
            if txn_id is None or self.locks.holds(txn_id, key) is None:
                raise ProtocolViolation(f"read of {key!r} without a lock (txn {txn_id})")
        return self._data.get(key)

    def write(self, key: str, payload: object, txn_id: str, *, require_lock: bool = True) -> int:
        if self._enforce and require_lock:
            if self.locks.holds(txn_id, key) is not LockMode.EXCLUSIVE:
                raise ProtocolViolation(f"write of {key!r} without an exclusive lock (txn {txn_id})")
        prev = self._data.get(key)
        version = 1 if prev is None else prev.version + 1
        self._data[key] = Value(payload, txn_id, version)
        return version

    def seed(self, key: str, payload: object) -> None:
        self._data[key] = Value(payload, "seed", 1)

    def keys(self) -> list[str]:
        return sorted(self._data)


class Store:
    """A fixed set of partitions with keys assigned by stable hash."""

    def __init__(self, n_partitions: int = 1, *, enforce: bool = True):
        if n_partitions < 1:
            raise ValueError("need at least one partition")
        self.partitions = [Partition(i, enforce=enforce) for i in range(n_partitions)]

    @property
    def n_partitions(self) -> int:
        return len(self.partitions)

    def partition_of(self, key: str) -> Partition:
        return self.partitions[partition_id(key, len(self.partitions))]

    def table_for(self, key: str) -> LockTable:
        return self.partition_of(key).locks

    def read(self, key: str, *, txn_id: str | None = None) -> Value | None:
        return self.partition_of(key).read(key, txn_id=txn_id)

    def write(self, key: str, payload: object, txn_id: str, *, require_lock: bool = True) -> int:
        return self.partition_of(key).write(key, payload, txn_id, require_lock=require_lock)

    def seed(self, data: Mapping[str, object]) -> None:
        for key, payload in data.items():
            self.partition_of(key).seed(key, payload)

    def acquire_locks(
        self, txn_id: str, requests: Iterable[tuple[str, LockMode]], timeout_ms: float = 50.0
    ) -> bool:
        return _acquire_blocking(self.table_for, txn_id, requests, timeout_ms)

    def release_locks(self, txn_id: str, keys: Iterable[str] | None = None) -> None:
        if keys is None:
            keys = self.held_keys(txn_id)
        for key in sorted(keys):
            self.table_for(key).unlock(txn_id, key)

    def held_keys(self, txn_id: str) -> list[str]:
        held: list[str] = []
        for part in self.partitions:
            held.extend(part.locks.held_keys(txn_id))
        return sorted(held)

    def audit(self) -> None:
        for part in self.partitions:
            part.locks.audit()

    def snapshot(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for part in self.partitions:
            for key in part.keys():
                out[key] = part._data[key].payload
        return dict(sorted(out.items()))

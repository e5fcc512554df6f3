"""Process-wide table of which lock each thread is currently trying to acquire.

Lock wrappers start disabled and use this table to notice contention without
touching any shared counter on the uncontended path: each thread announces
the lock it is entering in its own slot and, after a release, occasionally
counts how many slots name that same lock.
"""

import threading
import weakref

from ._atomic import AtomicCell

__all__ = ["ContentionTable", "ThreadRecord", "default_table"]

DEFAULT_CAPACITY = 1024
DEFAULT_SCAN_CAP = 1024


class ThreadRecord:
    """Per-thread scan schedule plus the thread's slot index (None on overflow)."""

    __slots__ = ("slot", "period", "countdown", "scans", "__weakref__")

    def __init__(self, slot):
        self.slot = slot
        self.period = 1
        self.countdown = 1
        self.scans = 0


class ContentionTable:
    def __init__(self, capacity=DEFAULT_CAPACITY, scan_cap=DEFAULT_SCAN_CAP):
        self.capacity = capacity
        self.scan_cap = scan_cap
        self.slots = [None] * capacity
        self._free = list(range(capacity - 1, -1, -1))
        self._free_lock = threading.Lock()
        self._local = threading.local()
        self.registered = AtomicCell(0)

    def record(self):
        """The calling thread's record, registering it on first use."""
        try:
            return self._local.rec
        except AttributeError:
            pass
        with self._free_lock:
            slot = self._free.pop() if self._free else None
        rec = ThreadRecord(slot)
        if slot is not None:
            self.registered.fetch_add(1)
            # The slot goes back to the pool when the thread's locals die.
            weakref.finalize(rec, self._recycle, slot)
        self._local.rec = rec
        return rec

    def _recycle(self, slot):
        self.slots[slot] = None
        with self._free_lock:
            self._free.append(slot)
        self.registered.fetch_add(-1)

    def announce(self, rec, lock):
        if rec.slot is not None:
            self.slots[rec.slot] = lock

    def clear(self, rec):
        if rec.slot is not None:
            self.slots[rec.slot] = None

    def count(self, lock):
        n = 0
        for entry in self.slots:
            if entry is lock:
                n += 1
        return n

    def due(self, rec):
        """Tick the thread's schedule; True when a scan is due now."""
        rec.countdown -= 1
        return rec.countdown <= 0

    def scan(self, rec, lock, enable_count):
        """Count announcers of `lock`, advance the schedule, and report whether to enable."""
        rec.scans += 1
        rec.period = min(rec.period * 2, self.scan_cap)
        rec.countdown = rec.period
        return self.count(lock) >= enable_count


_default = None
_default_lock = threading.Lock()


def default_table():
    global _default
    if _default is None:
        with _default_lock:
            if _default is None:
                _default = ContentionTable()
    return _default

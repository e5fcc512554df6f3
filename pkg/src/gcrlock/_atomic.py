"""Word-sized atomic cells and the spin-loop relax hint.

CPython exposes no compare-and-swap, so each read-modify-write runs under a
tiny private lock.  Plain loads and stores are single attribute accesses and
are already atomic under the interpreter lock.
"""

import os
import threading
import time

__all__ = ["AtomicCell", "cpu_relax"]

if hasattr(os, "sched_yield"):
    # Releases the GIL and offers the CPU to another runnable thread, which is
    # the closest Python gets to a PAUSE inside a spin loop.
    cpu_relax = os.sched_yield
else:  # pragma: no cover
    def cpu_relax():
        time.sleep(0)


class AtomicCell:
    __slots__ = ("value", "_lock")

    def __init__(self, value=None):
        self.value = value
        self._lock = threading.Lock()

    def __repr__(self):
        return f"AtomicCell({self.value!r})"

    def load(self):
        return self.value

    def store(self, value):
        self.value = value

    def swap(self, value):
        with self._lock:
            old = self.value
            self.value = value
        return old

    def compare_and_swap(self, expected, new):
        """Install `new` iff the cell holds `expected` (identity for objects)."""
        with self._lock:
            cur = self.value
            if cur is expected or (type(cur) is int and cur == expected):
                self.value = new
                return True
            return False

    def fetch_add(self, delta=1):
        with self._lock:
            old = self.value
            self.value = old + delta
        return old

"""Waiting policies: spin, park, and spin-then-park on a one-shot flag."""

import threading

from ._atomic import cpu_relax

__all__ = ["WaitFlag", "DEFAULT_SPIN_BUDGET", "UNSET", "SET", "PARKED"]

UNSET, SET, PARKED = 0, 1, 2

DEFAULT_SPIN_BUDGET = 1000


class WaitFlag:
    """A binary event with exactly one waiter and any number of setters.

    `wait` spins for up to `spin_budget` relax iterations and then parks the
    calling thread until `set_and_wake` is called.  `spin_budget=None` means
    spin forever, `0` means park immediately.  Once set, the flag stays set
    until the waiter calls `rearm`.

    The counters are probes for tests: `blocks` counts parks, `wakes` counts
    wakeups delivered to a parked waiter, `last_spins` is the number of relax
    iterations the most recent `wait` performed before returning or parking.
    """

    __slots__ = ("_state", "_guard", "_park", "blocks", "wakes", "last_spins")

    def __init__(self, is_set=False):
        self._state = SET if is_set else UNSET
        self._guard = threading.Lock()
        # Binary semaphore: held while nobody has been woken.
        self._park = threading.Lock()
        self._park.acquire()
        self.blocks = 0
        self.wakes = 0
        self.last_spins = 0

    def __repr__(self):
        return f"WaitFlag({('unset', 'set', 'parked')[self._state]})"

    def is_set(self):
        return self._state == SET

    def rearm(self):
        # Only the waiter calls this, and only after a completed wait.
        self._state = UNSET

    def set(self):
        """Set without waking; for flags known to have no parked waiter."""
        self._state = SET

    def wait(self, spin_budget=DEFAULT_SPIN_BUDGET):
        spins = 0
        while self._state != SET:
            if spin_budget is not None and spins >= spin_budget:
                with self._guard:
                    if self._state == SET:
                        break
                    self._state = PARKED
                self.last_spins = spins
                self.blocks += 1
                self._park.acquire()
                continue
            cpu_relax()
            spins += 1
        self.last_spins = spins

    def set_and_wake(self):
        with self._guard:
            prev = self._state
            self._state = SET
        if prev == PARKED:
            self.wakes += 1
            self._park.release()

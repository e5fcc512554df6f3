"""Underlying mutual-exclusion locks that the concurrency-restriction wrapper sits on.

Every lock here implements the same two-method protocol (`acquire`,
`release`) and is usable on its own.  None of them is reentrant.
"""

import threading

from ._atomic import AtomicCell, cpu_relax
from .waiting import DEFAULT_SPIN_BUDGET, WaitFlag

__all__ = [
    "LockCore",
    "TTASLock",
    "BackoffLock",
    "TicketLock",
    "MCSLock",
    "PlatformMutex",
    "LOCK_NAMES",
    "make_lock",
]


class LockCore:
    """Base for the wrapped locks.

    With ``debug=True`` the lock remembers its holder and raises
    `RuntimeError` on a release by any other thread.
    """

    name = "abstract"

    def __init__(self, debug=False):
        self.debug = debug
        self._owner = None

    def acquire(self):
        raise NotImplementedError

    def release(self):
        raise NotImplementedError

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()

    def _took(self):
        if self.debug:
            self._owner = threading.get_ident()

    def _check_holder(self):
        if self.debug:
            if self._owner != threading.get_ident():
                raise RuntimeError(f"{self.name}: release by a thread that does not hold the lock")
            self._owner = None


class TTASLock(LockCore):
    """Test-test-and-set: read the word until it looks free, then swap."""

    name = "ttas"

    def __init__(self, debug=False):
        super().__init__(debug)
        self._word = AtomicCell(0)

    def acquire(self):
        word = self._word
        while True:
            while word.value:
                cpu_relax()
            if word.swap(1) == 0:
                break
        self._took()

    def release(self):
        self._check_holder()
        self._word.value = 0


class BackoffLock(LockCore):
    """Test-and-set with bounded exponential back-off between attempts.

    `attempt_log`, when a list, receives the delay (in relax iterations)
    applied after each failed attempt.
    """

    name = "backoff"

    def __init__(self, min_delay=1 << 4, max_delay=1 << 16, debug=False, attempt_log=None):
        super().__init__(debug)
        if not 0 < min_delay <= max_delay:
            raise ValueError("need 0 < min_delay <= max_delay")
        self.min_delay = min_delay
        self.max_delay = max_delay
        self.attempt_log = attempt_log
        self._word = AtomicCell(0)

    def acquire(self):
        word = self._word
        delay = self.min_delay
        while word.swap(1) != 0:
            if self.attempt_log is not None:
                self.attempt_log.append(delay)
            for _ in range(delay):
                cpu_relax()
                if not word.value:
                    break
            delay = min(delay * 2, self.max_delay)
        self._took()

    def release(self):
        self._check_holder()
        self._word.value = 0


class TicketLock(LockCore):
    """FIFO ticket lock.  `order_log`, when a list, records served tickets."""

    name = "ticket"

    def __init__(self, debug=False, order_log=None):
        super().__init__(debug)
        self._next = AtomicCell(0)
        self._serving = 0
        self.order_log = order_log
        self._local = threading.local()

    def acquire(self):
        ticket = self._next.fetch_add(1)
        while self._serving != ticket:
            cpu_relax()
        self._took()
        if self.order_log is not None:
            self.order_log.append(ticket)

    def take_ticket(self):
        """Split acquire, first half: draw a ticket without waiting."""
        return self._next.fetch_add(1)

    def wait_turn(self, ticket):
        """Split acquire, second half."""
        while self._serving != ticket:
            cpu_relax()
        self._took()
        if self.order_log is not None:
            self.order_log.append(ticket)

    def release(self):
        self._check_holder()
        # Only the holder writes now-serving.
        self._serving += 1


class _MCSNode:
    __slots__ = ("next", "flag")

    def __init__(self):
        self.next = None
        self.flag = WaitFlag()


class MCSLock(LockCore):
    """MCS queue lock; each waiter spins (or spins then parks) on its own node.

    `policy` is ``"spin"`` or ``"stp"`` (spin-then-park).  Nodes come from a
    per-thread, per-lock pool so the acquire path never allocates after the
    first use.  `swap_log` and `order_log`, when lists, record thread idents
    in tail-swap order and in acquisition order respectively.
    """

    def __init__(self, policy="spin", spin_budget=DEFAULT_SPIN_BUDGET, debug=False,
                 order_log=None, swap_log=None):
        super().__init__(debug)
        if policy not in ("spin", "stp"):
            raise ValueError(f"unknown MCS waiting policy {policy!r}")
        self.policy = policy
        self.name = f"mcs_{policy}"
        self._budget = None if policy == "spin" else spin_budget
        self._tail = AtomicCell(None)
        self._local = threading.local()
        self.order_log = order_log
        self.swap_log = swap_log
        self._log_lock = threading.Lock()

    def _node(self):
        try:
            return self._local.node
        except AttributeError:
            node = self._local.node = _MCSNode()
            return node

    def acquire(self):
        node = self._node()
        node.next = None
        node.flag.rearm()
        if self.swap_log is None:
            pred = self._tail.swap(node)
        else:
            with self._log_lock:
                pred = self._tail.swap(node)
                self.swap_log.append(threading.get_ident())
        if pred is not None:
            pred.next = node
            node.flag.wait(self._budget)
        self._took()
        if self.order_log is not None:
            self.order_log.append(threading.get_ident())

    def release(self):
        self._check_holder()
        node = self._local.node
        succ = node.next
        if succ is None:
            if self._tail.compare_and_swap(node, None):
                return
            while node.next is None:
                cpu_relax()
            succ = node.next
        succ.flag.set_and_wake()

    @property
    def wakes(self):
        """Total wakeups this thread's node has received (probe)."""
        return self._node().flag.wakes


class PlatformMutex(LockCore):
    """The interpreter's OS-backed mutex (pthread mutex or semaphore on POSIX)."""

    name = "pthread"

    def __init__(self, debug=False):
        super().__init__(debug)
        self._lock = threading.Lock()

    def acquire(self):
        self._lock.acquire()
        self._took()

    def release(self):
        self._check_holder()
        self._lock.release()


_FACTORIES = {
    "ttas": TTASLock,
    "backoff": BackoffLock,
    "ticket": TicketLock,
    "mcs_spin": lambda **kw: MCSLock("spin", **kw),
    "mcs_stp": lambda **kw: MCSLock("stp", **kw),
    "pthread": PlatformMutex,
}

LOCK_NAMES = tuple(_FACTORIES)


def make_lock(name, **kwargs):
    """Build an underlying lock by name (ttas | backoff | ticket | mcs_spin | mcs_stp | pthread)."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown lock {name!r}; choose from {', '.join(LOCK_NAMES)}") from None
    return factory(**kwargs)

"""Generic concurrency restriction (GCR) around an arbitrary lock.

A `GcrLock` lets a handful of *active* threads call the wrapped lock and
holds every other contender in a FIFO queue of *passive* threads.  The queue
head spins until either an unlocking thread grants it admission (once per
fairness epoch) or it sees the active set drain; every other passive thread
spins briefly and then parks.

The wrapper is only switched on while the lock is contended: threads
announce themselves in a shared `ContentionTable`, and a releasing thread
periodically counts how many others are waiting on the same lock.
"""

import contextlib
import enum
import os
import threading
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

from ._atomic import AtomicCell, cpu_relax
from .contention import default_table
from .waiting import DEFAULT_SPIN_BUDGET, WaitFlag

__all__ = [
    "GcrConfig",
    "GcrLock",
    "QueueNode",
    "PassiveQueue",
    "AdmissionReason",
    "Admission",
    "Tracer",
]

_ENV_KNOBS = {
    "GCR_PASSIVE_THRESHOLD": "passive_threshold",
    "GCR_FAIRNESS_THRESHOLD": "fairness_threshold",
    "GCR_ENABLE_COUNT": "contention_enable_count",
    "GCR_BACKOFF_CAP": "backoff_cap",
    "GCR_NUMA_EPOCH": "numa_epoch",
    "GCR_SPIN_BUDGET": "spin_budget",
    "GCR_ADAPTIVE": "adaptive",
}


@dataclass(frozen=True)
class GcrConfig:
    """Tuning knobs.  Defaults are the values the algorithm was evaluated with."""

    passive_threshold: int = 4
    active_rejoin_threshold: int = 2
    fairness_threshold: int = 0x4000
    backoff_cap: int = 1 << 20
    contention_enable_count: int = 4
    disable_active_max: int = 2
    # False pins the wrapper on and skips the contention table entirely.
    adaptive: bool = True
    spin_budget: int = DEFAULT_SPIN_BUDGET
    numa_epoch: int = 0x4000
    socket_refresh: int = 64

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise TypeError(f"{f.name} must be an int, got {v!r}")
        if self.passive_threshold < 1:
            raise ValueError("passive_threshold must be >= 1")
        if self.active_rejoin_threshold < 0:
            raise ValueError("active_rejoin_threshold must be >= 0")
        if self.fairness_threshold < 1 or self.numa_epoch < 1 or self.socket_refresh < 1:
            raise ValueError("epoch lengths must be >= 1")
        cap = self.backoff_cap
        if cap < 1 or cap & (cap - 1):
            raise ValueError("backoff_cap must be a power of two")

    @classmethod
    def from_env(cls, environ=None, **overrides):
        """Defaults, overridden by GCR_* environment variables, then by `overrides`."""
        environ = os.environ if environ is None else environ
        values = {}
        for var, field in _ENV_KNOBS.items():
            raw = environ.get(var)
            if raw is not None and raw.strip():
                try:
                    value = int(raw, 0)
                except ValueError:
                    raise ValueError(f"{var}={raw!r} is not an integer") from None
                values[field] = bool(value) if field == "adaptive" else value
        values.update(overrides)
        return cls(**values)

    def with_(self, **changes):
        return replace(self, **changes)


class AdmissionReason(enum.Enum):
    SIGNALED = "signaled"
    ACTIVE_SET_EMPTY = "active_set_empty"


class QueueNode:
    """One passive thread's place in the queue."""

    __slots__ = ("next", "event", "owner", "socket")

    def __init__(self, owner=None):
        self.next = None
        self.event = WaitFlag()
        self.owner = owner
        self.socket = 0

    def __repr__(self):
        return f"QueueNode(owner={self.owner}, event={int(self.event.is_set())})"

    def reset(self):
        self.next = None
        self.event.rearm()


class Admission(NamedTuple):
    owner: int
    reason: AdmissionReason
    num_acqs: int
    estimate: int
    socket: int
    # NUMA only: preferred socket, whether its queue held anyone, rotation count.
    preferred: int = None
    preferred_busy: bool = None
    epoch: int = None


class Tracer:
    """Instrumentation for invariant checks.

    When a lock carries a tracer, every individual queue mutation (and the
    NUMA admission decision) runs under `tracer.lock`.  Holding that lock
    therefore pauses all queue traffic, so structural checks observe a
    state between steps.  Logs are appended in the order the steps took
    effect: `enqueued` holds node owners, `admitted` holds `Admission`
    records, `polls` holds (iteration, interval) for every read of the
    active-set estimate by a queue head (only while `record_polls` is true).
    """

    def __init__(self):
        self.lock = threading.RLock()
        self.enqueued = []
        self.admitted = []
        self.polls = []
        self.record_polls = False

    def on_enqueue(self, node):
        self.enqueued.append(node.owner)

    def on_admit(self, gcr, node, reason):
        pref = getattr(gcr, "preferred_socket", None)
        busy = None if pref is None else not gcr.queues[pref].is_empty()
        self.admitted.append(Admission(
            node.owner, reason, gcr.num_acqs, gcr.active_estimate(), node.socket,
            pref, busy, getattr(gcr, "rotations", None)))


_NULL = contextlib.nullcontext()


class PassiveQueue:
    """MCS-style queue of passive threads: swap onto `tail`, hand off via `top`."""

    __slots__ = ("_top", "_tail", "_tracer")

    def __init__(self, tracer=None):
        self._top = AtomicCell(None)
        self._tail = AtomicCell(None)
        self._tracer = tracer

    @property
    def top(self):
        return self._top.value

    def _set_top(self, node):
        # Plain stores must not interleave with the emulated compare-and-swap.
        with self._top._lock:
            self._top.value = node

    @property
    def tail(self):
        return self._tail.value

    def is_empty(self):
        return self._tail.value is None

    def _step(self):
        return self._tracer.lock if self._tracer is not None else _NULL

    def push(self, node):
        node.next = None
        node.event.rearm()
        with self._step():
            prv = self._tail.swap(node)
            if self._tracer is not None:
                self._tracer.on_enqueue(node)
        if prv is not None:
            with self._step():
                prv.next = node
        else:
            with self._step():
                self._set_top(node)
            with self._step():
                # Nobody else can be waiting on our event yet.
                node.event.set()
        return node

    def pop(self, node):
        succ = node.next
        if succ is None:
            with self._step():
                emptied = self._tail.compare_and_swap(node, None)
            if emptied:
                with self._step():
                    # One shot: failure means a new head already installed itself.
                    self._top.compare_and_swap(node, None)
                return
            while True:
                succ = node.next
                if succ is not None:
                    break
                cpu_relax()
        with self._step():
            self._set_top(succ)
        with self._step():
            succ.event.set_and_wake()

    def walk(self):
        """Nodes reachable from `top`.  Meaningful only while traffic is paused."""
        out = []
        n = self.top
        seen = set()
        while n is not None and id(n) not in seen:
            seen.add(id(n))
            out.append(n)
            n = n.next
        return out

    def structural_violations(self):
        """Queue-shape invariant breaches visible right now (call under the tracer lock)."""
        problems = []
        tail = self._tail.value
        if tail is not None and tail.next is not None:
            problems.append("tail node has a successor")
        nodes = self.walk()
        flagged = [i for i, n in enumerate(nodes) if n.event.is_set()]
        if len(flagged) > 1:
            problems.append(f"{len(flagged)} reachable nodes have event set")
        elif flagged and flagged[0] != 0:
            problems.append("event set on a node other than top")
        return problems


class _PerThread:
    __slots__ = ("node", "counted", "holding", "rec", "socket", "socket_age")

    def __init__(self):
        self.node = None
        self.counted = False
        self.holding = False
        self.rec = None
        self.socket = 0
        self.socket_age = 0


class GcrLock:
    """Concurrency-restricting wrapper around any object with acquire/release.

    `ingress` counts entries by active threads and `egress` their exits, so
    `ingress - egress` estimates the active set.  `num_acqs` counts every
    acquisition and drives the fairness epoch.
    """

    def __init__(self, inner, config=None, *, table=None, tracer=None, debug=False):
        self.inner = inner
        self.config = config if config is not None else GcrConfig.from_env()
        self.tracer = tracer
        self.debug = debug
        self.queue = PassiveQueue(tracer)
        self.top_approved = 0
        self._ingress = AtomicCell(0)
        self.egress = 0
        self.num_acqs = 0
        self.next_check_active = 1
        self.enabled = not self.config.adaptive
        self.table = table if table is not None else default_table()
        self._local = threading.local()
        self.stats = {"slow": 0, "signals": 0, "enables": 0, "disables": 0}
        # The config is frozen, so the hot paths read these copies.
        self._adaptive = self.config.adaptive
        self._fairness = self.config.fairness_threshold
        self._slots = self.table.slots
        hook = type(self)._after_count
        self._hook = None if hook is GcrLock._after_count else self._after_count

    def __repr__(self):
        return f"{type(self).__name__}({self.inner!r}, enabled={self.enabled})"

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()

    @property
    def ingress(self):
        return self._ingress.value

    def active_estimate(self):
        ingress = self._ingress.value
        egress = self.egress
        d = ingress - egress
        return d if d > 0 else 0

    def _me(self):
        try:
            return self._local.me
        except AttributeError:
            me = self._local.me = _PerThread()
            return me

    def _new_node(self):
        return QueueNode(threading.get_ident())

    # -- acquire side ---------------------------------------------------

    def acquire(self):
        try:
            me = self._local.me
        except AttributeError:
            me = self._me()
        if self.debug:
            if me.holding:
                raise RuntimeError("GcrLock is not reentrant")
            me.holding = True
        if self._adaptive:
            rec = me.rec
            if rec is None:
                rec = me.rec = self.table.record()
            slot = rec.slot
            # Threads without a table slot always go through restriction.
            if slot is not None:
                self._slots[slot] = self
                if not self.enabled:
                    me.counted = False
                    self.inner.acquire()
                    return
        self._enter(me)
        me.counted = True
        self.inner.acquire()

    def _enter(self, me):
        """Become active: fast path while the active set is small, else queue up."""
        if self.active_estimate() >= self.config.passive_threshold:
            self._slow_path(me)
        else:
            self._ingress.fetch_add(1)

    def _slow_path(self, me):
        self.stats["slow"] += 1
        node = self.push_self(me)
        if not node.event.is_set():
            node.event.wait(self.config.spin_budget)
        self.admission_wait(node)
        self.pop_self(node)

    def push_self(self, me=None):
        me = me if me is not None else self._me()
        node = me.node
        if node is None:
            node = me.node = self._new_node()
        return self.queue.push(node)

    def pop_self(self, node):
        self.queue.pop(node)

    def admission_wait(self, node):
        """Spin at the head of the queue until admitted; returns why.

        The admission flag is read every iteration; the active-set estimate
        only when the iteration count is a multiple of `next_check_active`,
        which doubles (up to `backoff_cap`) each time the set is still busy.
        """
        cfg = self.config
        tracer = self.tracer
        record = tracer is not None and tracer.record_polls
        rejoin = cfg.active_rejoin_threshold
        cap = cfg.backoff_cap
        cnt = 0
        reason = None
        while not self.top_approved:
            cpu_relax()
            cnt += 1
            if cnt % self.next_check_active == 0:
                if record:
                    tracer.polls.append((cnt, self.next_check_active))
                if self.active_estimate() <= rejoin:
                    self.next_check_active = 1
                    reason = AdmissionReason.ACTIVE_SET_EMPTY
                    break
                if self.next_check_active < cap:
                    self.next_check_active *= 2
        if reason is None:
            reason = AdmissionReason.SIGNALED
        if self.top_approved:
            self.top_approved = 0
        self._ingress.fetch_add(1)
        if tracer is not None:
            with tracer.lock:
                tracer.on_admit(self, node, reason)
        return reason

    # -- release side ---------------------------------------------------

    def release(self):
        me = self._local.me
        if self.debug:
            if not me.holding:
                raise RuntimeError("GcrLock released by a thread that does not hold it")
            me.holding = False
        n = self.num_acqs + 1
        self.num_acqs = n
        if n % self._fairness == 0:
            self._epoch_crossed()
        if self._hook is not None:
            self._hook()
        if me.counted:
            self.egress += 1
        self.inner.release()
        if self._adaptive:
            rec = me.rec
            if rec.slot is not None:
                self._slots[rec.slot] = None
            rec.countdown -= 1
            if rec.countdown <= 0 and self.table.scan(rec, self, self.config.contention_enable_count):
                self.contention_detected()

    def _after_count(self):
        """Hook for subclasses; runs under the lock right after `num_acqs` moves."""

    def _epoch_crossed(self):
        """Fairness epoch boundary; returns True if a passive thread was signalled."""
        if self.queue.top is not None:
            self.top_approved = 1
            self.stats["signals"] += 1
            return True
        if self.config.adaptive:
            self.maybe_disable()
        return False

    def contention_detected(self):
        if not self.enabled:
            self.enabled = True
            self.stats["enables"] += 1

    def contention_scan(self, rec=None):
        """Count threads announced on this lock; enable restriction if enough."""
        rec = rec if rec is not None else self.table.record()
        hit = self.table.scan(rec, self, self.config.contention_enable_count)
        if hit:
            self.contention_detected()
        return hit

    def maybe_disable(self):
        if (self.enabled and self.queue.top is None
                and self.active_estimate() <= self.config.disable_active_max):
            self.enabled = False
            self.stats["disables"] += 1

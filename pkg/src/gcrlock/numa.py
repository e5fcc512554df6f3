"""NUMA-aware concurrency restriction.

One passive queue per socket and a preferred socket that rotates
round-robin every `numa_epoch` acquisitions.  A thread is *eligible* when it
runs on the preferred socket or the preferred socket has no passive
threads.  Only eligible threads may take the fast path or, from the head of
their queue, poll the active-set estimate; everyone else queues up on their
own socket and waits.
"""

import glob
import re
import threading

from ._atomic import cpu_relax
from .core import AdmissionReason, GcrLock, PassiveQueue

__all__ = ["NumaGcrLock", "platform_socket_of", "platform_socket_count"]


def _parse_cpulist(text):
    cpus = set()
    for part in text.strip().split(","):
        if not part:
            continue
        lo, _, hi = part.partition("-")
        cpus.update(range(int(lo), int(hi or lo) + 1))
    return cpus


def _node_map():
    mapping = {}
    for path in glob.glob("/sys/devices/system/node/node[0-9]*/cpulist"):
        node = int(re.search(r"node(\d+)", path).group(1))
        try:
            with open(path) as fh:
                for cpu in _parse_cpulist(fh.read()):
                    mapping[cpu] = node
        except OSError:
            continue
    return mapping


_CPU_TO_NODE = None


def platform_socket_count():
    global _CPU_TO_NODE
    if _CPU_TO_NODE is None:
        _CPU_TO_NODE = _node_map()
    return max(_CPU_TO_NODE.values(), default=0) + 1


def platform_socket_of(_ident=None):
    """NUMA node of the CPU the calling thread last ran on; 0 when unknown."""
    global _CPU_TO_NODE
    if _CPU_TO_NODE is None:
        _CPU_TO_NODE = _node_map()
    if not _CPU_TO_NODE:
        return 0
    try:
        with open(f"/proc/self/task/{threading.get_native_id()}/stat") as fh:
            stat = fh.read()
        # Field 39 is the last CPU; skip past the parenthesised comm first.
        cpu = int(stat.rsplit(")", 1)[1].split()[36])
    except (OSError, ValueError, IndexError):
        return 0
    return _CPU_TO_NODE.get(cpu, 0)


class NumaGcrLock(GcrLock):
    """`GcrLock` with per-socket passive queues and a rotating preferred socket.

    `socket_of` maps a thread ident to a socket index and defaults to the
    platform query; tests inject their own map.  `socket_count` defaults to
    the number of NUMA nodes the platform reports.
    """

    def __init__(self, inner, config=None, *, socket_count=None, socket_of=None, **kw):
        super().__init__(inner, config, **kw)
        if socket_of is None:
            socket_of = platform_socket_of
            if socket_count is None:
                socket_count = platform_socket_count()
        self.socket_count = socket_count or 1
        self.socket_of = socket_of
        self.queues = [PassiveQueue(self.tracer) for _ in range(self.socket_count)]
        self.queue = self.queues[0]
        self.preferred_socket = 0
        self.acq_since_rotation = 0
        self.rotations = 0

    @property
    def epoch_length(self):
        return self.config.numa_epoch

    def socket_of_self(self, me=None):
        """Calling thread's socket, cached and re-queried every `socket_refresh` calls."""
        me = me if me is not None else self._me()
        if me.socket_age <= 0:
            try:
                sock = int(self.socket_of(threading.get_ident()))
            except Exception:
                sock = 0
            me.socket = sock if 0 <= sock < self.socket_count else 0
            me.socket_age = self.config.socket_refresh
        me.socket_age -= 1
        return me.socket

    def eligible(self, thread_socket):
        pref = self.preferred_socket
        return thread_socket == pref or self.queues[pref].is_empty()

    def passive_count(self):
        return sum(len(q.walk()) for q in self.queues)

    # -- acquire side ---------------------------------------------------

    def _enter(self, me):
        sock = self.socket_of_self(me)
        if self.eligible(sock) and self.active_estimate() < self.config.passive_threshold:
            self._ingress.fetch_add(1)
        else:
            self._numa_slow_path(me, sock)

    def _numa_slow_path(self, me, sock):
        self.stats["slow"] += 1
        node = me.node
        if node is None:
            node = me.node = self._new_node()
        node.socket = sock
        q = self.queues[sock]
        q.push(node)
        if not node.event.is_set():
            node.event.wait(self.config.spin_budget)
        self.admission_wait(node, sock)
        q.pop(node)

    def admission_wait(self, node, sock=None):
        """Head-of-queue wait that only looks at shared state while eligible."""
        sock = node.socket if sock is None else sock
        cfg = self.config
        tracer = self.tracer
        rejoin = cfg.active_rejoin_threshold
        cap = cfg.backoff_cap
        cnt = 0
        reason = None
        while True:
            if tracer is not None:
                tracer.lock.acquire()
            if self.eligible(sock):
                if self.top_approved:
                    reason = AdmissionReason.SIGNALED
                else:
                    cnt += 1
                    if cnt % self.next_check_active == 0:
                        if self.active_estimate() <= rejoin:
                            self.next_check_active = 1
                            reason = AdmissionReason.ACTIVE_SET_EMPTY
                        elif self.next_check_active < cap:
                            self.next_check_active *= 2
            if reason is not None:
                break
            if tracer is not None:
                tracer.lock.release()
            cpu_relax()
        # When tracing, the tracer lock is still held: the decision and its
        # log entry see the same preferred socket and queue states.
        if self.top_approved:
            self.top_approved = 0
        self._ingress.fetch_add(1)
        if tracer is not None:
            tracer.on_admit(self, node, reason)
            tracer.lock.release()
        return reason

    # -- release side ---------------------------------------------------

    def _after_count(self):
        self.acq_since_rotation += 1
        if self.acq_since_rotation >= self.config.numa_epoch:
            self.rotate_preferred()

    def rotate_preferred(self):
        """Advance the preferred socket once its epoch is used up (caller holds the lock)."""
        if self.acq_since_rotation < self.config.numa_epoch:
            return
        tracer = self.tracer
        if tracer is not None:
            with tracer.lock:
                self._rotate()
        else:
            self._rotate()

    def _rotate(self):
        self.preferred_socket = (self.preferred_socket + 1) % self.socket_count
        self.acq_since_rotation = 0
        self.rotations += 1

    def _epoch_crossed(self):
        if any(q.top is not None for q in self.queues):
            self.top_approved = 1
            self.stats["signals"] += 1
            return True
        if self.config.adaptive:
            self.maybe_disable()
        return False

    def maybe_disable(self):
        if (self.enabled and all(q.top is None for q in self.queues)
                and self.active_estimate() <= self.config.disable_active_max):
            self.enabled = False
            self.stats["disables"] += 1


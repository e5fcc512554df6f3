import os
import threading
import time

import pytest

from gcrlock import GcrConfig, NumaGcrLock, QueueNode, Tracer, make_lock
from gcrlock.numa import _parse_cpulist, platform_socket_count, platform_socket_of

from _stress import hammer


class SocketMap:
    """Injected thread -> socket map; unknown threads go to `default`."""

    def __init__(self, default=0):
        self.map = {}
        self.default = default
        self.queries = 0

    def __call__(self, ident):
        self.queries += 1
        return self.map.get(ident, self.default)


def numa(sockets=2, socket_of=None, **cfg):
    cfg.setdefault("adaptive", False)
    return NumaGcrLock(make_lock("ttas"), GcrConfig(**cfg), socket_count=sockets,
                       socket_of=socket_of or SocketMap())


def wait_until(pred, timeout=10.0):
    deadline = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached")
        time.sleep(0.0005)


def test_parse_cpulist():
    assert _parse_cpulist("0-3,8,10-11\n") == {0, 1, 2, 3, 8, 10, 11}
    assert _parse_cpulist("") == set()


def test_platform_queries_are_in_range():
    n = platform_socket_count()
    assert n >= 1
    assert 0 <= platform_socket_of() < n


def test_eligibility():
    g = numa()
    g.preferred_socket = 0
    assert g.eligible(0)
    assert g.eligible(1)  # preferred queue empty
    g.queues[0].push(QueueNode("w"))
    assert g.eligible(0)
    assert not g.eligible(1)


def test_rotation_two_sockets():
    g = numa(numa_epoch=4)
    for _ in range(3):
        g.acquire()
        g.release()
    assert g.preferred_socket == 0
    g.acquire()
    g.release()
    assert g.preferred_socket == 1 and g.acq_since_rotation == 0 and g.rotations == 1


def test_rotation_single_socket_stays_put():
    g = numa(sockets=1, numa_epoch=2)
    for _ in range(10):
        g.acquire()
        g.release()
    assert g.preferred_socket == 0 and g.rotations == 5


def test_rotate_before_epoch_is_noop():
    g = numa(numa_epoch=100)
    g.acq_since_rotation = 99
    g.rotate_preferred()
    assert g.preferred_socket == 0


def test_socket_of_self_uses_injected_map():
    smap = SocketMap()
    smap.map[threading.get_ident()] = 1
    g = numa(socket_of=smap)
    assert g.socket_of_self() == 1


def test_single_socket_is_always_zero():
    g = numa(sockets=1, socket_of=lambda ident: 0)
    assert {g.socket_of_self() for _ in range(200)} == {0}


def test_out_of_range_or_failing_map_falls_back_to_zero():
    g = numa(sockets=2, socket_of=lambda ident: 7)
    assert g.socket_of_self() == 0

    def broken(ident):
        raise OSError("no topology")

    g = numa(sockets=2, socket_of=broken)
    assert g.socket_of_self() == 0


def test_socket_cache_refreshes_within_r_acquisitions():
    smap = SocketMap()
    me = threading.get_ident()
    smap.map[me] = 0
    g = numa(socket_of=smap, socket_refresh=64)
    g.acquire()
    g.release()
    smap.map[me] = 1  # the thread "migrates"
    seen = []
    for _ in range(64):
        g.acquire()
        g.release()
        seen.append(g._me().socket)
    assert seen[-1] == 1
    assert seen.index(1) < 64
    assert smap.queries == 2


def test_ineligible_thread_queues_without_reading_estimate():
    smap = SocketMap(default=1)
    g = numa(socket_of=smap)
    blocker = QueueNode("socket0-waiter")
    g.queues[0].push(blocker)
    reads = [0]
    real = g.active_estimate

    def counting():
        reads[0] += 1
        return real()

    g.active_estimate = counting
    done = threading.Event()

    def contender():
        g.acquire()
        done.set()
        g.release()

    t = threading.Thread(target=contender)
    t.start()
    wait_until(lambda: g.queues[1].top is not None)
    time.sleep(0.05)
    assert not done.is_set() and reads[0] == 0
    # Socket 0's queue drains: the socket-1 head becomes eligible and polls.
    g.queues[0].pop(blocker)
    t.join(10)
    assert done.is_set() and reads[0] >= 1


def test_rotation_passivates_off_socket_thread():
    smap = SocketMap(default=0)
    g = numa(socket_of=smap, numa_epoch=2)
    g.acquire()
    g.release()
    g.acquire()
    g.release()
    assert g.preferred_socket == 1
    waiter = QueueNode("socket1-waiter")
    g.queues[1].push(waiter)
    result = []

    def again():
        g.acquire()
        result.append(g.stats["slow"])
        g.release()

    t = threading.Thread(target=again)
    t.start()
    wait_until(lambda: g.queues[0].top is not None)
    assert g.stats["slow"] == 1
    g.queues[1].pop(waiter)
    t.join(10)
    assert result == [1]


LOW = dict(passive_threshold=2, fairness_threshold=32, numa_epoch=64)


def _two_socket_map(threads_by_socket):
    smap = SocketMap()
    lock = threading.Lock()
    counter = [0]

    def socket_of(ident):
        with lock:
            if ident not in smap.map:
                smap.map[ident] = counter[0] % threads_by_socket
                counter[0] += 1
            return smap.map[ident]

    return smap, socket_of


@pytest.mark.parametrize("inner", ["ttas", "mcs_spin", "mcs_stp", "ticket", "pthread", "backoff"])
def test_counter_conservation_and_exclusion(inner):
    _, socket_of = _two_socket_map(2)
    g = NumaGcrLock(make_lock(inner), GcrConfig(adaptive=False, **LOW), socket_count=2,
                    socket_of=socket_of)
    oracle, counts = hammer(g, threads=8, iters=1000)
    assert oracle.violations == 0
    assert g.ingress == g.egress == g.num_acqs == sum(counts) == 8000
    assert g.rotations >= 8000 // 64 - 1
    assert min(counts) > 0


def test_fifo_per_socket_queue_and_structure():
    smap, socket_of = _two_socket_map(2)
    tracer = Tracer()
    g = NumaGcrLock(make_lock("mcs_spin"), GcrConfig(adaptive=False, passive_threshold=1,
                                                      fairness_threshold=8, numa_epoch=32),
                    socket_count=2, socket_of=socket_of, tracer=tracer)
    problems, stop = [], threading.Event()

    def sampler():
        while not stop.is_set():
            with tracer.lock:
                for q in g.queues:
                    problems.extend(q.structural_violations())
            os.sched_yield()

    s = threading.Thread(target=sampler)
    s.start()
    try:
        hammer(g, threads=6, iters=600)
    finally:
        stop.set()
        s.join()
    assert problems == []
    for sock in (0, 1):
        enq = [o for o in tracer.enqueued if smap.map[o] == sock]
        adm = [a.owner for a in tracer.admitted if a.socket == sock]
        assert enq == adm and len(adm) > 10


def test_homogeneous_admission_short():
    _, socket_of = _two_socket_map(2)
    tracer = Tracer()
    g = NumaGcrLock(make_lock("mcs_spin"), GcrConfig(adaptive=False, **LOW),
                    socket_count=2, socket_of=socket_of, tracer=tracer)
    hammer(g, threads=8, iters=1500)
    busy = [a for a in tracer.admitted if a.preferred_busy]
    assert busy
    assert all(a.socket == a.preferred for a in busy)

"""The AVL-tree lock microbenchmark and its metrics.

Each worker loops: lock, one map operation, unlock, then a stretch of
non-critical pseudo-random arithmetic.  Handoff time is the gap between a
timestamp taken just before a holder releases the lock and one taken just
after the next holder's acquire returns.
"""

import math
import random
import threading
import time
from array import array
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import GCR_MODES, LOCK_NAMES, GcrConfig, make_lock, wrap
from .avltree import AvlMap

__all__ = [
    "WorkloadConfig",
    "RunMetrics",
    "HandoffClock",
    "run_workload",
    "non_critical_work",
    "unfairness",
    "calibrate_ncs_iters",
    "summarize_handoff",
]

_MASK = (1 << 64) - 1


def non_critical_work(n, seed=0x9E3779B97F4A7C15):
    """Iterate a 64-bit LCG `n` times and return the final state."""
    x = seed & _MASK
    for _ in range(n):
        x = (x * 6364136223846793005 + 1442695040888963407) & _MASK
    return x


def unfairness(counts):
    """Share of all operations done by the busiest ceil(n/2) threads.

    0.5 for a perfectly even split, approaching 1 as work concentrates in
    a few threads.  An empty or all-zero input returns 0.5.
    """
    counts = sorted(counts, reverse=True)
    total = sum(counts)
    if not counts or total <= 0:
        return 0.5
    upper = math.ceil(len(counts) / 2)
    return sum(counts[:upper]) / total


@dataclass
class WorkloadConfig:
    threads: int = 1
    duration: float = 10.0
    key_range: int = 4096
    lookup_pct: int = 80
    insert_pct: int = 10
    remove_pct: int = 10
    # None: calibrate against the critical-section cost on this machine.
    ncs_iters: int = None
    seed: int = 1
    lock: str = "mcs_spin"
    gcr: str = "off"
    warmup: float = 1.0

    def __post_init__(self):
        if self.lookup_pct + self.insert_pct + self.remove_pct != 100:
            raise ValueError("operation percentages must sum to 100")
        if min(self.lookup_pct, self.insert_pct, self.remove_pct) < 0:
            raise ValueError("operation percentages must be non-negative")
        if self.key_range <= 0:
            raise ValueError("key_range must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.duration < 0 or self.warmup < 0:
            raise ValueError("duration and warmup must be non-negative")
        if self.lock not in LOCK_NAMES:
            raise ValueError(f"unknown lock {self.lock!r}")
        if self.gcr not in GCR_MODES:
            raise ValueError(f"unknown gcr mode {self.gcr!r}")

    @classmethod
    def with_read_pct(cls, read_pct, **kw):
        """Reads at `read_pct`, the remainder split between inserts and removes."""
        rest = 100 - read_pct
        return cls(lookup_pct=read_pct, insert_pct=rest - rest // 2, remove_pct=rest // 2, **kw)


@dataclass
class RunMetrics:
    counts: list
    duration: float
    throughput: float
    handoff_count: int = 0
    handoff_mean: float = 0.0
    handoff_p50: float = 0.0
    handoff_p99: float = 0.0
    unfairness: float = 0.5
    op_counts: dict = field(default_factory=dict)
    lock_acquisitions: int = None

    @property
    def total_ops(self):
        return sum(self.counts)

    def as_dict(self):
        return asdict(self)


def summarize_handoff(samples):
    """(count, mean, p50, p99) of handoff samples in nanoseconds."""
    if len(samples) == 0:
        return 0, 0.0, 0.0, 0.0
    arr = np.asarray(samples, dtype=np.float64)
    p50, p99 = np.percentile(arr, [50, 99])
    return int(arr.size), float(arr.mean()), float(p50), float(p99)


class HandoffClock:
    """Shared last-release timestamp, only ever written by the lock holder."""

    __slots__ = ("last_release",)

    def __init__(self):
        self.last_release = None

    def reset(self):
        self.last_release = None

    def released(self):
        self.last_release = time.perf_counter_ns()

    def acquired(self, out):
        now = time.perf_counter_ns()
        prev = self.last_release
        if prev is not None:
            out.append(now - prev)


_calibrated = {}


def calibrate_ncs_iters(ratio=4.0, samples=20000, key_range=4096):
    """Non-critical loop length that costs about `ratio` critical sections.

    With that much private work per operation a lock saturates at roughly
    ratio + 1 threads, so scaling stops at a small thread count.
    """
    key = (ratio, key_range)
    if key in _calibrated:
        return _calibrated[key]
    rng = random.Random(7)
    tree = AvlMap()
    while len(tree) < key_range // 2:
        tree.insert(rng.randrange(key_range), 0)
    keys = [rng.randrange(key_range) for _ in range(samples)]
    t0 = time.perf_counter()
    for k in keys:
        tree.lookup(k)
    cs = (time.perf_counter() - t0) / samples
    probe = 20000
    t0 = time.perf_counter()
    non_critical_work(probe)
    per_iter = (time.perf_counter() - t0) / probe
    iters = max(1, round(ratio * cs / per_iter))
    _calibrated[key] = iters
    return iters


def _gcr_counter(lock):
    return getattr(lock, "num_acqs", None)


def run_workload(cfg, lock=None, gcr_config=None, on_cs=None):
    """Run one benchmark configuration and return its RunMetrics.

    `lock` overrides the lock built from `cfg.lock`/`cfg.gcr`.  `on_cs`, if
    given, is called inside every measured critical section (tests use it to
    inject delays).
    """
    if lock is None:
        base = make_lock(cfg.lock)
        lock = wrap(base, cfg.gcr, gcr_config if gcr_config is not None else GcrConfig.from_env())
    ncs = cfg.ncs_iters if cfg.ncs_iters is not None else calibrate_ncs_iters(key_range=cfg.key_range)
    tree = AvlMap()
    prefill = random.Random(cfg.seed)
    while len(tree) < cfg.key_range // 2:
        tree.insert(prefill.randrange(cfg.key_range), 0)

    n = cfg.threads
    clock = HandoffClock()
    counts = [0] * n
    ops = [[0, 0, 0] for _ in range(n)]
    samples = [array("q") for _ in range(n)]
    stop = threading.Event()
    errors = []
    marks = {}

    def start_measuring():
        clock.reset()
        marks["acqs0"] = _gcr_counter(lock)
        marks["t0"] = time.perf_counter()

    barrier = threading.Barrier(n + 1, action=start_measuring)
    lookup_cut = cfg.lookup_pct
    insert_cut = cfg.lookup_pct + cfg.insert_pct
    key_range = cfg.key_range
    warmup = cfg.warmup

    def worker(idx):
        rng = random.Random(cfg.seed * 1_000_003 + idx)
        rand = rng.random
        krange = rng.randrange
        mine = samples[idx]
        my_ops = ops[idx]
        acquire, release = lock.acquire, lock.release
        state = idx + 1
        try:
            t_end = time.perf_counter() + warmup
            while time.perf_counter() < t_end:
                k = krange(key_range)
                acquire()
                tree.lookup(k)
                release()
                state = non_critical_work(ncs, state)
            barrier.wait()
            done = 0
            while cfg.duration > 0 and not stop.is_set():
                r = rand() * 100.0
                k = krange(key_range)
                acquire()
                clock.acquired(mine)
                if r < lookup_cut:
                    tree.lookup(k)
                    my_ops[0] += 1
                elif r < insert_cut:
                    tree.insert(k, k)
                    my_ops[1] += 1
                else:
                    tree.remove(k)
                    my_ops[2] += 1
                if on_cs is not None:
                    on_cs()
                clock.released()
                release()
                done += 1
                state = non_critical_work(ncs, state)
            counts[idx] = done
        except BaseException as exc:  # surfaced after join
            errors.append(exc)
            stop.set()
            barrier.abort()

    threads = [threading.Thread(target=worker, args=(i,), name=f"bench-{i}", daemon=True)
               for i in range(n)]
    for t in threads:
        t.start()
    try:
        barrier.wait()
    except threading.BrokenBarrierError:
        pass
    else:
        time.sleep(cfg.duration)
    stop.set()
    t1 = time.perf_counter()
    for t in threads:
        t.join()
    if errors:
        raise RuntimeError(f"benchmark worker failed: {errors[0]!r}") from errors[0]

    elapsed = t1 - marks["t0"]
    total = sum(counts)
    merged = array("q")
    for s in samples:
        merged.extend(s)
    hcount, hmean, hp50, hp99 = summarize_handoff(merged)
    acqs = None
    if marks.get("acqs0") is not None:
        acqs = _gcr_counter(lock) - marks["acqs0"]
    return RunMetrics(
        counts=counts,
        duration=elapsed,
        throughput=total / elapsed if elapsed > 0 else 0.0,
        handoff_count=hcount,
        handoff_mean=hmean,
        handoff_p50=hp50,
        handoff_p99=hp99,
        unfairness=unfairness(counts),
        op_counts={
            "lookup": sum(o[0] for o in ops),
            "insert": sum(o[1] for o in ops),
            "remove": sum(o[2] for o in ops),
        },
        lock_acquisitions=acqs,
    )

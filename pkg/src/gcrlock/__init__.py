"""Generic concurrency restriction for arbitrary locks, plus a NUMA-aware variant."""

from .contention import ContentionTable, default_table
from .core import Admission, AdmissionReason, GcrConfig, GcrLock, PassiveQueue, QueueNode, Tracer
from .locks import (
    LOCK_NAMES,
    BackoffLock,
    LockCore,
    MCSLock,
    PlatformMutex,
    TicketLock,
    TTASLock,
    make_lock,
)
from .numa import NumaGcrLock
from .waiting import WaitFlag

GCR_MODES = ("off", "on", "numa")


def wrap(lock, mode="on", config=None, **kwargs):
    """Wrap `lock` for a benchmark mode: "off" returns it unchanged."""
    if mode == "off":
        return lock
    if mode == "on":
        return GcrLock(lock, config, **kwargs)
    if mode == "numa":
        return NumaGcrLock(lock, config, **kwargs)
    raise ValueError(f"unknown gcr mode {mode!r}; choose from {', '.join(GCR_MODES)}")


__all__ = [
    "Admission", "AdmissionReason", "BackoffLock", "ContentionTable", "GCR_MODES", "GcrConfig",
    "GcrLock", "LOCK_NAMES", "LockCore", "MCSLock", "NumaGcrLock", "PassiveQueue",
    "PlatformMutex", "QueueNode", "TTASLock", "TicketLock", "Tracer", "WaitFlag",
    "default_table", "make_lock", "wrap",
]

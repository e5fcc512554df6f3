"""Command-line driver: sweep lock x GCR mode x thread count and write CSV/JSON.

    gcr-bench --lock mcs_spin,ttas --gcr off,on --threads auto --duration 10
    gcr-bench --lock ttas --gcr on --threads 8 --instances 4

Exit status is 0 on success, 2 on a usage error and 1 if any run failed
(failed runs are reported on stderr and the sweep carries on).
"""

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import statistics
import sys
from dataclasses import asdict, dataclass, field, fields

from . import GCR_MODES, LOCK_NAMES
from .bench.workload import WorkloadConfig, run_workload

__all__ = [
    "RunSpec",
    "OutputRecord",
    "parse_args",
    "run_matrix",
    "multi_instance_run",
    "emit_report",
    "read_report",
    "speedup_table",
    "expand_threads",
    "main",
]

log = logging.getLogger("gcrlock.harness")

SUMMARY = "mean"
AGGREGATE = "all"


@dataclass
class OutputRecord:
    lock: str
    gcr_mode: str
    threads: int
    instance_id: object
    repeat_id: object
    throughput: float
    handoff_mean: float
    handoff_p50: float
    handoff_p99: float
    unfairness: float
    duration: float
    throughput_stdev: float = 0.0  # spread of the rows a summary/aggregate row covers


FIELDS = [f.name for f in fields(OutputRecord)]


@dataclass
class RunSpec:
    locks: list = field(default_factory=lambda: ["mcs_spin"])
    modes: list = field(default_factory=lambda: ["off"])
    threads: list = field(default_factory=lambda: [1])
    duration: float = 10.0
    key_range: int = 4096
    read_pct: int = 80
    ncs_iters: int = None
    repeats: int = 3
    instances: int = 1
    seed: int = 1
    warmup: float = 1.0
    format: str = "csv"
    out: str = "-"
    verbose: bool = False

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.instances < 1:
            raise ValueError("instances must be >= 1")

    def workload(self, lock, mode, threads, seed=None):
        return WorkloadConfig.with_read_pct(
            self.read_pct,
            threads=threads,
            duration=self.duration,
            key_range=self.key_range,
            ncs_iters=self.ncs_iters,
            seed=self.seed if seed is None else seed,
            lock=lock,
            gcr=mode,
            warmup=self.warmup,
        )


def expand_threads(text, cpus=None):
    """'auto' -> 1, 2, 4, ... up to and including 2 x CPUs; else a comma list."""
    cpus = cpus or os.cpu_count() or 1
    if text.strip() == "auto":
        top = 2 * cpus
        out, t = [], 1
        while t < top:
            out.append(t)
            t *= 2
        out.append(top)
        return out
    try:
        values = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed thread list {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"thread counts must be positive: {text!r}")
    return values


def _choices(allowed, what):
    def parse(text):
        items = [x.strip() for x in text.split(",") if x.strip()]
        bad = [x for x in items if x not in allowed]
        if bad or not items:
            raise argparse.ArgumentTypeError(
                f"unknown {what} {', '.join(bad) or repr(text)}; choose from {', '.join(allowed)}")
        return items
    return parse


def _pct(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a percentage: {text!r}") from None
    if not 0 <= v <= 100:
        raise argparse.ArgumentTypeError(f"percentage out of range: {v}")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {v}")
    return v


def build_parser():
    p = argparse.ArgumentParser(
        prog="gcr-bench",
        description="AVL-tree lock microbenchmark with optional concurrency restriction.",
        epilog="GCR_* environment variables (e.g. GCR_FAIRNESS_THRESHOLD) tune the wrapper "
               "and are passed through to child processes.",
    )
    p.add_argument("--lock", type=_choices(LOCK_NAMES, "lock"), default=["mcs_spin"],
                   help="lock name or comma list (default mcs_spin)")
    p.add_argument("--gcr", type=_choices(GCR_MODES, "gcr mode"), default=["off"],
                   help="off, on, numa, or a comma list (default off)")
    p.add_argument("--threads", type=expand_threads, default=[1],
                   help="thread count, comma list, or 'auto' (default 1)")
    p.add_argument("--duration", type=float, default=10.0, help="seconds per run (default 10)")
    p.add_argument("--key-range", type=_positive, default=4096)
    p.add_argument("--read-pct", type=_pct, default=80,
                   help="lookup percentage; the rest splits between insert and remove")
    p.add_argument("--ncs-iters", type=int, default=None,
                   help="non-critical loop length (default: calibrated)")
    p.add_argument("--repeats", type=_positive, default=3)
    p.add_argument("--instances", type=_positive, default=1,
                   help="run this many benchmark processes at once")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--warmup", type=float, default=1.0, help="untimed warmup seconds")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default="-", help="output path, '-' for stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_args(argv=None):
    ns = build_parser().parse_args(argv)
    if ns.duration < 0 or ns.warmup < 0:
        build_parser().error("--duration and --warmup must be non-negative")
    spec = RunSpec(
        locks=ns.lock, modes=ns.gcr, threads=ns.threads, duration=ns.duration,
        key_range=ns.key_range, read_pct=ns.read_pct, ncs_iters=ns.ncs_iters,
        repeats=ns.repeats, instances=ns.instances, seed=ns.seed, warmup=ns.warmup,
        format=ns.format, out=ns.out, verbose=ns.verbose,
    )
    return spec


def _record(cfg, metrics, instance_id=0, repeat_id=0):
    return OutputRecord(
        lock=cfg.lock, gcr_mode=cfg.gcr, threads=cfg.threads,
        instance_id=instance_id, repeat_id=repeat_id,
        throughput=metrics.throughput, handoff_mean=metrics.handoff_mean,
        handoff_p50=metrics.handoff_p50, handoff_p99=metrics.handoff_p99,
        unfairness=metrics.unfairness, duration=metrics.duration,
    )


def _mean_record(rows, instance_id=0):
    first = rows[0]
    k = len(rows)
    avg = {name: sum(getattr(r, name) for r in rows) / k
           for name in ("throughput", "handoff_mean", "handoff_p50", "handoff_p99",
                        "unfairness", "duration")}
    avg["throughput_stdev"] = statistics.pstdev(r.throughput for r in rows)
    return OutputRecord(lock=first.lock, gcr_mode=first.gcr_mode, threads=first.threads,
                        instance_id=instance_id, repeat_id=SUMMARY, **avg)


def run_matrix(spec, runner=run_workload):
    """Every lock x mode x thread combination, `repeats` times, plus one mean row each.

    Returns (records, failures).  A failing run is logged and skipped.
    """
    records, failures = [], []
    for lock in spec.locks:
        for mode in spec.modes:
            for threads in spec.threads:
                rows = []
                for rep in range(spec.repeats):
                    cfg = spec.workload(lock, mode, threads)
                    try:
                        m = runner(cfg)
                    except Exception as exc:
                        log.error("run %s/%s/%d #%d failed: %s", lock, mode, threads, rep, exc)
                        failures.append((lock, mode, threads, rep, repr(exc)))
                        continue
                    rows.append(_record(cfg, m, 0, rep))
                    log.info("%s gcr=%s threads=%d rep=%d: %.0f ops/s", lock, mode, threads,
                             rep, m.throughput)
                records.extend(rows)
                if rows:
                    records.append(_mean_record(rows))
    return records, failures


def _child_argv(spec, lock, mode, threads, instance):
    return [
        sys.executable, "-m", "gcrlock",
        "--lock", lock, "--gcr", mode, "--threads", str(threads),
        "--duration", str(spec.duration), "--key-range", str(spec.key_range),
        "--read-pct", str(spec.read_pct), "--repeats", "1", "--instances", "1",
        "--seed", str(spec.seed + instance), "--warmup", str(spec.warmup),
        "--format", "json", "--out", "-",
    ] + (["--ncs-iters", str(spec.ncs_iters)] if spec.ncs_iters is not None else [])


def multi_instance_run(spec, launch=None):
    """Start `spec.instances` benchmark processes together and aggregate them.

    For each lock/mode/thread combination and repeat, emits one record per
    instance plus an aggregate row (instance_id "all") whose throughput is
    the sum over instances.  Returns (records, failures).
    """
    launch = launch or (lambda argv: subprocess.Popen(
        argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=os.environ.copy()))
    records, failures = [], []
    for lock in spec.locks:
        for mode in spec.modes:
            for threads in spec.threads:
                for rep in range(spec.repeats):
                    procs = [launch(_child_argv(spec, lock, mode, threads, i))
                             for i in range(spec.instances)]
                    rows = []
                    for i, proc in enumerate(procs):
                        out, err = proc.communicate()
                        if proc.returncode != 0:
                            failures.append((lock, mode, threads, rep, f"instance {i}: {err.strip()}"))
                            continue
                        try:
                            data = [d for d in json.loads(out) if d["repeat_id"] != SUMMARY]
                        except (ValueError, KeyError) as exc:
                            failures.append((lock, mode, threads, rep, f"instance {i}: {exc!r}"))
                            continue
                        for d in data:
                            d.update(instance_id=i, repeat_id=rep)
                            rows.append(OutputRecord(**d))
                    records.extend(rows)
                    if rows:
                        agg = _mean_record(rows, AGGREGATE)
                        agg.repeat_id = rep
                        agg.throughput = sum(r.throughput for r in rows)
                        records.append(agg)
    return records, failures


def _plain(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(records, fmt="csv", path="-"):
    """Write records as CSV (OutputRecord column order) or a JSON array."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIELDS)
        for r in records:
            w.writerow([_plain(getattr(r, name)) for name in FIELDS])
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps([asdict(r) for r in records], indent=1) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _coerce_id(text):
    try:
        return int(text)
    except ValueError:
        return text


def read_report(text, fmt="csv"):
    """Inverse of `emit_report` on its text output."""
    if fmt == "json":
        return [OutputRecord(**d) for d in json.loads(text)]
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        rows.append(OutputRecord(
            lock=d["lock"], gcr_mode=d["gcr_mode"], threads=int(d["threads"]),
            instance_id=_coerce_id(d["instance_id"]), repeat_id=_coerce_id(d["repeat_id"]),
            **{k: float(d[k]) for k in FIELDS[5:]}))
    return rows


def speedup_table(records, mode="on"):
    """{(lock, threads): throughput(mode) / throughput(off)} over summary rows."""
    base, wrapped = {}, {}
    for r in records:
        if r.repeat_id != SUMMARY:
            continue
        key = (r.lock, r.threads)
        if r.gcr_mode == "off":
            base[key] = r.throughput
        elif r.gcr_mode == mode:
            wrapped[key] = r.throughput
    return {k: wrapped[k] / base[k] for k in sorted(wrapped) if k in base and base[k] > 0}


def main(argv=None):
    spec = parse_args(argv)
    logging.basicConfig(level=logging.INFO if spec.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if spec.instances > 1:
        records, failures = multi_instance_run(spec)
    else:
        records, failures = run_matrix(spec)
    try:
        emit_report(records, spec.format, spec.out)
    except OSError as exc:
        print(f"gcr-bench: cannot write report: {exc}", file=sys.stderr)
        return 1
    for f in failures:
        print(f"gcr-bench: run failed: {f}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Print the GCR/bare throughput ratio per lock and thread count from a report.

    python3 scripts/speedup_table.py sweep.csv [--mode numa]
"""

import argparse
from pathlib import Path

from gcrlock.harness import read_report, speedup_table


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("report")
    p.add_argument("--mode", default="on", choices=("on", "numa"))
    a = p.parse_args(argv)
    fmt = "json" if a.report.endswith(".json") else "csv"
    table = speedup_table(read_report(Path(a.report).read_text(), fmt), a.mode)
    if not table:
        print("no matching summary rows")
        return 1
    locks = sorted({lock for lock, _ in table})
    threads = sorted({t for _, t in table})
    print("lock".ljust(10) + "".join(f"{t:>9}" for t in threads))
    for lock in locks:
        cells = (f"{table[lock, t]:9.2f}" if (lock, t) in table else " " * 9 for t in threads)
        print(lock.ljust(10) + "".join(cells))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

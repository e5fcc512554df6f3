#!/usr/bin/env python3
"""Oversubscribe the machine with several benchmark processes at once.

Each instance runs as many threads as there are CPUs, so N instances put N
times the CPU count of threads on the machine.  The "all" rows in the output
carry the summed throughput.

    python3 scripts/multi_instance.py --instances 1,2,4 --lock ttas
"""

import argparse
import os
import sys

from gcrlock import harness


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--instances", default="1,2,4")
    p.add_argument("--lock", default="mcs_spin")
    p.add_argument("--gcr", default="off,on")
    p.add_argument("--threads", default=str(os.cpu_count() or 1))
    p.add_argument("--duration", default="5")
    p.add_argument("--repeats", default="1")
    p.add_argument("--out-dir", default=".")
    a = p.parse_args(argv)
    rc = 0
    for n in a.instances.split(","):
        out = os.path.join(a.out_dir, f"multi_{a.lock}_{n}.csv")
        rc |= harness.main(["--lock", a.lock, "--gcr", a.gcr, "--threads", a.threads,
                            "--instances", n, "--duration", a.duration,
                            "--repeats", a.repeats, "--out", out])
        print(out)
    return rc


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Thread sweep for one or more locks with GCR off and on, written as CSV.

    python3 scripts/sweep.py --lock ttas,mcs_spin --duration 5 --out sweep.csv

Thread counts default to powers of two up to twice the CPU count.
"""

import argparse
import sys

from gcrlock import harness


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lock", default="ttas,mcs_spin")
    p.add_argument("--gcr", default="off,on")
    p.add_argument("--threads", default="auto")
    p.add_argument("--duration", default="5")
    p.add_argument("--repeats", default="3")
    p.add_argument("--out", default="sweep.csv")
    a = p.parse_args(argv)
    return harness.main(["--lock", a.lock, "--gcr", a.gcr, "--threads", a.threads,
                         "--duration", a.duration, "--repeats", a.repeats,
                         "--out", a.out, "-v"])


if __name__ == "__main__":
    sys.exit(main())

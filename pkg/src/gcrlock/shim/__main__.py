import sys

from . import ShimBuildError, build_shim

try:
    print(build_shim(force="--rebuild" in sys.argv[1:]))
except ShimBuildError as exc:
    print(exc, file=sys.stderr)
    sys.exit(1)

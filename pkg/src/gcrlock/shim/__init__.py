"""Build and locate the LD_PRELOAD library that puts GCR under pthread mutexes.

    $ LD_PRELOAD=$(python -m gcrlock.shim) ./some_program

The library is compiled on first use with the system C compiler and cached
under ``$XDG_CACHE_HOME/gcrlock`` keyed by a hash of the source.
"""

import hashlib
import os
import shutil
import subprocess
import tempfile
from pathlib import Path

__all__ = ["SOURCE", "ShimBuildError", "build_shim", "preload_env", "cache_dir"]

SOURCE = Path(__file__).with_name("gcr_shim.c")
CFLAGS = ("-shared", "-fPIC", "-O2", "-Wall")
LIBS = ("-ldl", "-pthread")


class ShimBuildError(RuntimeError):
    pass


def cache_dir():
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "gcrlock"


def _compiler(cc):
    cc = cc or os.environ.get("CC") or "cc"
    if shutil.which(cc) is None:
        raise ShimBuildError(f"C compiler {cc!r} not found")
    return cc


def build_shim(out_dir=None, cc=None, force=False):
    """Compile the shim if needed and return the path of the shared object."""
    src = SOURCE.read_bytes()
    digest = hashlib.sha256(src + " ".join(CFLAGS + LIBS).encode()).hexdigest()[:16]
    out_dir = Path(out_dir) if out_dir is not None else cache_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / f"libgcrshim-{digest}.so"
    if target.exists() and not force:
        return target
    cc = _compiler(cc)
    # Build next to the target and rename, so concurrent builders never see a torn file.
    fd, tmp = tempfile.mkstemp(suffix=".so", dir=out_dir)
    os.close(fd)
    cmd = [cc, *CFLAGS, "-o", tmp, str(SOURCE), *LIBS]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        os.unlink(tmp)
        raise ShimBuildError(f"{' '.join(cmd)} failed:\n{proc.stderr}")
    os.replace(tmp, target)
    return target


def preload_env(lib=None, env=None, **knobs):
    """Copy of `env` (default os.environ) with the shim preloaded.

    Keyword knobs become GCR_* variables: ``preload_env(passive_threshold=1)``
    sets ``GCR_PASSIVE_THRESHOLD=1``.
    """
    lib = str(lib if lib is not None else build_shim())
    out = dict(os.environ if env is None else env)
    prior = out.get("LD_PRELOAD")
    out["LD_PRELOAD"] = f"{lib}:{prior}" if prior else lib
    for name, value in knobs.items():
        out[f"GCR_{name.upper()}"] = str(int(value))
    return out

import os
import re
import shutil
import subprocess
from pathlib import Path

import pytest

from gcrlock.shim import SOURCE, build_shim, preload_env

DATA = Path(__file__).parent / "data"

pytestmark = pytest.mark.skipif(shutil.which(os.environ.get("CC", "cc")) is None,
                                reason="no C compiler")


@pytest.fixture(scope="session")
def shim(tmp_path_factory):
    return build_shim(out_dir=tmp_path_factory.mktemp("shim"))


@pytest.fixture(scope="session")
def probe(tmp_path_factory):
    out = tmp_path_factory.mktemp("probe") / "shim_probe"
    subprocess.run([os.environ.get("CC", "cc"), "-O2", "-pthread", "-o", str(out),
                    str(DATA / "shim_probe.c"), "-ldl"], check=True)
    return out


def run(probe, *args, env=None):
    return subprocess.run([str(probe), *map(str, args)], capture_output=True, text=True,
                          env=env, timeout=300)


def functional(stdout):
    return [line for line in stdout.splitlines() if not line.startswith("shim:")]


def shim_stats(stdout):
    found = {}
    for key, value in re.findall(r"(\w+)=(\d+)", "\n".join(
            line for line in stdout.splitlines() if line.startswith("shim:"))):
        found[key] = int(value)
    return found


def test_build_is_cached(shim, tmp_path):
    again = build_shim(out_dir=shim.parent)
    assert again == shim and shim.stat().st_size > 0
    assert SOURCE.name == "gcr_shim.c"


def test_preload_env_prepends_and_sets_knobs(shim):
    env = preload_env(shim, env={"LD_PRELOAD": "/x.so"}, passive_threshold=1, adaptive=0)
    assert env["LD_PRELOAD"] == f"{shim}:/x.so"
    assert env["GCR_PASSIVE_THRESHOLD"] == "1" and env["GCR_ADAPTIVE"] == "0"


def test_exports_the_mutex_symbols(shim):
    nm = shutil.which("nm")
    if nm is None:
        pytest.skip("nm not available")
    out = subprocess.run([nm, "-D", "--defined-only", str(shim)], capture_output=True,
                         text=True).stdout
    for sym in ("pthread_mutex_init", "pthread_mutex_lock", "pthread_mutex_unlock",
                "pthread_mutex_trylock", "pthread_mutex_destroy", "pthread_cond_wait",
                "pthread_cond_timedwait", "gcr_shim_registry_size"):
        assert re.search(rf"\bT {sym}$", out, re.M), sym


def test_single_threaded_run_is_identical(shim, probe):
    plain = run(probe, "single")
    loaded = run(probe, "single", env=preload_env(shim))
    assert plain.returncode == loaded.returncode == 0
    assert loaded.stdout == plain.stdout
    assert "unlock_unowned=EPERM" in plain.stdout and "relock=EDEADLK" in plain.stdout


def test_first_lock_creates_one_entry_and_cycles_keep_it_at_one(shim, probe):
    p = run(probe, "cycles", 10_000, env=preload_env(shim))
    assert p.returncode == 0
    sizes = re.findall(r"registry=(\d+)", p.stdout)
    # One entry while in use, none after destroy.
    assert sizes == ["1", "0"]


def test_concurrent_first_use_creates_exactly_once(shim, probe):
    for _ in range(20):
        p = run(probe, "firstuse", 16, env=preload_env(shim))
        assert p.returncode == 0 and "touched=16" in p.stdout
        assert shim_stats(p.stdout)["registry"] == 1


@pytest.mark.parametrize("knobs", [
    {},
    {"adaptive": 0, "passive_threshold": 1, "fairness_threshold": 64},
    {"adaptive": 0, "passive_threshold": 2, "fairness_threshold": 0x4000, "spin_budget": 0},
])
def test_contended_exclusion(shim, probe, knobs):
    p = run(probe, "contend", 8, 100_000, env=preload_env(shim, **knobs))
    assert p.returncode == 0, p.stdout + p.stderr
    assert "violations=0" in p.stdout and "total=800000" in p.stdout
    if knobs:
        assert shim_stats(p.stdout)["slow"] > 0


def test_adaptive_mode_engages_under_contention(shim, probe):
    p = run(probe, "contend", 8, 200_000, env=preload_env(shim, enable_count=2))
    assert p.returncode == 0
    assert shim_stats(p.stdout)["enables"] >= 1


def test_condition_wait_cycles(shim, probe):
    for knobs in ({}, {"adaptive": 0, "passive_threshold": 1}):
        p = run(probe, "condvar", 20_000, env=preload_env(shim, **knobs))
        assert p.returncode == 0, p.stdout + p.stderr
        plain = run(probe, "condvar", 20_000)
        assert functional(p.stdout) == functional(plain.stdout)


def test_python_runs_under_the_shim(shim):
    code = ("import threading\n"
            "n=[0]\nl=threading.Lock()\n"
            "def f():\n"
            "    for _ in range(20000):\n"
            "        with l: n[0]+=1\n"
            "ts=[threading.Thread(target=f) for _ in range(4)]\n"
            "[t.start() for t in ts]; [t.join() for t in ts]\nprint(n[0])\n")
    p = subprocess.run(["python3", "-c", code], capture_output=True, text=True, timeout=120,
                       env=preload_env(shim, adaptive=0, passive_threshold=1))
    assert p.returncode == 0 and p.stdout.strip() == "80000"

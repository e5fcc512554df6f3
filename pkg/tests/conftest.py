import os

import pytest

# criterion id -> {"title", "outcome", "details"}
_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion check")


def accept_cpus():
    """C in the acceptance criteria; GCR_ACCEPT_CPUS overrides the detected count."""
    raw = os.environ.get("GCR_ACCEPT_CPUS")
    return int(raw) if raw else (os.cpu_count() or 1)


@pytest.fixture
def report(request):
    """Attach a free-form detail line to the current acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")
    num = marker.args[0]

    def note(text):
        entry = _ACCEPTANCE.setdefault(num, {"title": marker.args[1], "outcome": None, "details": []})
        entry["details"].append(text)
        print(f"[criterion {num}] {text}")

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    num, title = marker.args
    entry = _ACCEPTANCE.setdefault(num, {"title": title, "outcome": None, "details": []})
    if rep.failed:
        entry["outcome"] = "FAIL"
    elif rep.skipped:
        entry["outcome"] = entry["outcome"] or "SKIP"
    elif entry["outcome"] is None:
        entry["outcome"] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section(f"acceptance criteria (C = {accept_cpus()})")
    for num in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[num]
        outcome = entry["outcome"] or "NOT RUN"
        tr.write_line(f"criterion {num:>2}  {outcome:<4}  {entry['title']}")
        for d in entry["details"]:
            tr.write_line(f"               {d}")

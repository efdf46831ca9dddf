from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

from gpupm import corpus
from gpupm.memsim import desk_config

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("thorough", deadline=None, max_examples=400,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def desk():
    return desk_config()


@pytest.fixture(params=sorted(corpus.CORPUS))
def entry(request):
    return corpus.get(request.param)


def lbm_entry():
    return corpus.get("mini-lbm")


# Acceptance verdicts, one entry per test part: (criterion, title, passed, note)
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted({a[0] for a in ACCEPTANCE}):
        parts = [a for a in ACCEPTANCE if a[0] == n]
        ok = all(p[2] for p in parts)
        notes = "; ".join(p[3] for p in parts if p[3])
        tr.write_line(f"criterion {n} {parts[0][1]}: {'PASS' if ok else 'FAIL'}"
                      + (f" ({notes})" if notes else ""))

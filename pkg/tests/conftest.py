"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import re

import numpy as np
import pytest

from pulsepair.config import desk_config
from pulsepair.diagnostics import parse_variants
from pulsepair.pipeline import run_pipeline
from pulsepair.scenario import preset


@pytest.fixture(scope="session")
def cfg():
    return desk_config()


@pytest.fixture(scope="session")
def short_null(cfg):
    """A tenth of a day of pure noise through every stage."""
    sc = preset("null", cfg, seed=3, days=0.1)
    return run_pipeline(sc, parse_variants("baseline,phase_noise:1..2,tau_zero,modified_filter"))


@pytest.fixture(scope="session")
def short_source(cfg):
    """The coherent test source over its default transit arcs."""
    sc = preset("single-doi", cfg, seed=2)
    return run_pipeline(sc, parse_variants("baseline,phase_noise:1,tau_zero,modified_filter"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


_CRIT = re.compile(r"test_criterion_(\d+)_?(\w*)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    parts: dict[int, list] = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in rep.nodeid or rep.when not in ("setup", "call"):
                continue
            m = _CRIT.search(rep.nodeid.split("::")[-1])
            if m:
                parts.setdefault(int(m.group(1)), []).append((m.group(2) or "all", outcome == "passed"))
    if not parts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(parts):
        ok = all(p[1] for p in parts[n])
        detail = ", ".join(f"{name} {'pass' if good else 'FAIL'}" for name, good in sorted(parts[n]))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} [{detail}]")

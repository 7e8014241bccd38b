"""Acceptance suite: one printed PASS/FAIL line per criterion.

Runs the full-size suite by default; set HIERCOULOMB_QUICK=1 for the reduced sizes.
"""
import os

import pytest

from hiercoulomb.acceptance import c14_determinism, report_bytes, run_core

SEED = 0
QUICK = os.environ.get("HIERCOULOMB_QUICK", "") not in ("", "0")


@pytest.fixture(scope="module")
def results():
    core = run_core(SEED, QUICK)
    first = report_bytes(core, SEED, True) if QUICK else None
    by_id = {r.id: r for r in core}
    by_id[14] = c14_determinism(SEED, first)
    return by_id


@pytest.mark.parametrize("cid", range(1, 15))
def test_criterion(results, cid, capsys):
    r = results[cid]
    with capsys.disabled():
        print("\n" + r.line())
    assert r.passed, r.details

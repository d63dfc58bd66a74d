import time

import pytest

from supra.selftest import CHECKS, FAULTS, run_selftest

# each fault and the invariant that must catch it
EXPECTED = {
    "recurrent-no-decay": "formulation-equivalence",
    "matmul-grad": "gradient-integrity",
    "adam-no-bias-correction": "adam-reference",
}


def test_clean_build_passes_within_budget():
    t0 = time.perf_counter()
    lines = []
    results = run_selftest(echo=lines.append)
    assert all(results.values()), lines
    assert set(results) == set(CHECKS)
    assert time.perf_counter() - t0 < 300


@pytest.mark.parametrize("fault", sorted(FAULTS))
def test_injected_fault_is_caught_by_name(fault):
    lines = []
    results = run_selftest(fault=fault, only=[EXPECTED[fault]], echo=lines.append)
    assert results == {EXPECTED[fault]: False}
    assert lines[0].startswith(f"FAIL {EXPECTED[fault]}")


def test_fault_is_removed_afterwards():
    run_selftest(fault="recurrent-no-decay", only=["formulation-equivalence"], echo=lambda s: None)
    assert run_selftest(only=["formulation-equivalence"], echo=lambda s: None) == {"formulation-equivalence": True}


def test_unknown_fault():
    with pytest.raises(ValueError):
        run_selftest(fault="nope")

import time

import numpy as np
import pytest

from heliopress import engine as E
from heliopress.cli import main
from heliopress.engine.tensor import _record, as_tensor
from heliopress.selftest import GRAD_TOL, GRADIENT_CASES, gradient_error, run_selftest


def test_selftest_passes_quickly():
    t0 = time.perf_counter()
    results = run_selftest()
    elapsed = time.perf_counter() - t0
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert not failed
    assert elapsed < 120
    assert {r.name for r in results} >= {f"grad:{n}" for n in GRADIENT_CASES}


def test_cli_selftest_exit_code(capsys):
    assert main(["selftest"]) == 0
    assert "selftest passed" in capsys.readouterr().out


def _bad_abs(x):
    x = as_tensor(x)
    # wrong backward: drops the sign
    return _record(np.abs(x.data), (x,), lambda g: (g,), "abs")


def _bad_sigmoid(x):
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _record(out, (x,), lambda g: (g * out,), "sigmoid")


@pytest.mark.parametrize("target, fake, case", [("abs_", _bad_abs, "gdn"), ("abs_", _bad_abs, "igdn"),
                                                ("sigmoid", _bad_sigmoid, "wcbam"),
                                                ("sigmoid", _bad_sigmoid, "discriminator")])
def test_injected_fault_is_caught(monkeypatch, target, fake, case):
    assert gradient_error(case, 0) < GRAD_TOL
    monkeypatch.setattr(E, target, fake)
    assert gradient_error(case, 0) > GRAD_TOL


def test_injected_fault_fails_cli(monkeypatch, capsys):
    monkeypatch.setattr(E, "abs_", _bad_abs)
    assert main(["selftest"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "selftest FAILED" in out

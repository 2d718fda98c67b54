from __future__ import annotations

import numpy as np
import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, p: int, eta: float | None = None) -> np.ndarray:
    """Random SPD matrix; with ``eta`` its spectrum lies in ``[1/eta, eta]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    if eta is None:
        w = rng.uniform(0.2, 5.0, p)
    else:
        w = np.exp(rng.uniform(-np.log(eta), np.log(eta), p))
    S = (Q * w) @ Q.T
    return 0.5 * (S + S.T)

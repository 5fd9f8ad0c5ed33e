import numpy as np
import pytest

from oblivdsp.ckks import CkksClient, CkksEvaluator, CkksParams, keygen


@pytest.fixture(scope="session")
def small_params():
    return CkksParams.desk(n=256, depth=4)


@pytest.fixture(scope="session")
def small_keys(small_params):
    return keygen(small_params, rotations=[1, 2, 5, -1, 64], seed=11)


@pytest.fixture()
def small_ckks(small_params, small_keys):
    client = CkksClient(small_keys, seed=3)
    ev = CkksEvaluator(small_params, small_keys.evaluation_keys())
    return client, ev


@pytest.fixture(scope="session")
def desk_params():
    return CkksParams.desk()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion, printed at the end."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])

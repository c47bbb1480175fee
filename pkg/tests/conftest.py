import numpy as np
import pytest

from ynet.data import generate_synthetic


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(root, 40, size=64, rng_seed=3, split_counts={"val": 10, "test": 10})
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = ("A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9")


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.STARTED:
        return
    results = module.RESULTS
    terminalreporter.section("acceptance criteria")
    for tag in ACCEPTANCE:
        if tag in results:
            ok, detail = results[tag]
            terminalreporter.write_line(f"{tag} {'PASS' if ok else 'FAIL'}: {detail}")
        elif tag in module.STARTED:
            terminalreporter.write_line(f"{tag} FAIL: did not complete (error before verdict)")

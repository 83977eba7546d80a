import numpy as np
import pytest

from histoscore.synth import DatasetSpec, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Twelve 64x64 scenes on disk with their manifest."""
    out = tmp_path_factory.mktemp("synth12")
    rows = generate_dataset(12, DatasetSpec(), seed=5, out_dir=out)
    return out / "manifest.csv", rows


_ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 11


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def record_criterion(request):
    """Record a criterion outcome; the terminal summary lists them all."""
    results = request.config.stash[_ACCEPTANCE]

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        print(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            passed, detail = results[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: NOT RUN  (deselected, or errored before reporting)")

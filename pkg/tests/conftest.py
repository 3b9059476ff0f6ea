import numpy as np
import pytest

from brainstate.io import SynthSpec, subject_matrices, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    """Four subjects, short runs, small volumes."""
    spec = SynthSpec(n_subjects=4, runs_per_subject=1, timepoints_per_run=40, n_voxels_latent=20, dims=(6, 6, 5), seed=3)
    series, mask, truth = synth_generate(spec)
    return spec, series, mask, truth


@pytest.fixture(scope="session")
def small_subjects(small_synth):
    _, series, mask, _ = small_synth
    return subject_matrices(series, mask)


# one summary line per acceptance criterion, printed at the end of the run
_VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line

    return record


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" and report.failed and name.startswith("test_criterion_"):
        number = int(name.split("_")[2])
        _VERDICTS.setdefault(number, f"criterion {number:2d}: FAIL  raised before reaching its check")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])

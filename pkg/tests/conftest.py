import numpy as np
import pytest

from eprkit.midi_io import NoteSequence
from eprkit.model import ModelConfig


def seq(onsets, offsets=None, pitches=None, velocities=None, name=""):
    n = len(onsets)
    if offsets is None:
        offsets = [o + 0.25 for o in onsets]
    if pitches is None:
        pitches = [60 + (k * 5) % 24 for k in range(n)]
    if velocities is None:
        velocities = [80] * n
    return NoteSequence.from_arrays(onsets, offsets, pitches, velocities, name)


def random_seq(rng, n, span=10.0, distinct=True):
    onsets = np.sort(rng.uniform(0, span, n))
    if distinct:
        onsets = np.round(onsets, 3) + np.arange(n) * 1e-3
    offsets = onsets + rng.uniform(0.05, 1.0, n)
    pitches = rng.integers(21, 109, n)
    velocities = rng.integers(1, 128, n)
    return NoteSequence.from_arrays(onsets, offsets, pitches, velocities)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(d_model=8, d_ff=16, n_heads=2, n_blocks=2,
                       dropout=0.0, max_seq_len=32)


# acceptance summary ------------------------------------------------------------

_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_")[1]
    if report.when == "call" or (report.when == "setup" and report.failed):
        _criteria[name] = "PASS" if report.passed else "FAIL"
    elif report.skipped:
        _criteria[name] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        number, _, label = name.partition("_")
        terminalreporter.write_line(
            f"criterion {int(number):2d} {_criteria[name]}  "
            f"{label.replace('_', ' ')}")

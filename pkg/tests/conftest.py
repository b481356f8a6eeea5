import warnings

import pytest

from lidarplace.bow import train_from_features
from lidarplace.orb import OrbExtractor
from lidarplace.pipeline import Config, Recognizer
from lidarplace.projection import project
from lidarplace.synth import figure_eight_sequence, training_scans

# criterion number -> (passed, detail); filled in by test_acceptance.py
CRITERIA = {}
N_CRITERIA = 11


@pytest.fixture(scope="session")
def trained_vocab():
    ex = OrbExtractor()
    feats = [ex.extract(project(s)) for s in training_scans(seed=0)]
    return train_from_features(feats, k=10, L=6, seed=0)


@pytest.fixture(scope="session")
def figure_eight():
    return figure_eight_sequence(seed=0, n=200)


@pytest.fixture(scope="session")
def benchmark_run(trained_vocab, figure_eight):
    """The default pipeline over the figure-eight sequence: (recognizer, detections)."""
    rec = Recognizer(trained_vocab, Config())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dets = rec.run(figure_eight[0])
    return rec, dets


@pytest.fixture(scope="session")
def positions(figure_eight):
    return {k: p.translation for k, p in enumerate(figure_eight[1])}


@pytest.fixture
def criterion():
    def record(number, passed, detail=""):
        CRITERIA[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in CRITERIA:
            ok, detail = CRITERIA[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: FAIL  (not run)")

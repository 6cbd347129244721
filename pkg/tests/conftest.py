import numpy as np
import pytest

from skqvc import toy
from skqvc.codebook import fit_codebook
from skqvc.dataset import load_corpus
from skqvc.features import PseudoEncoder


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    toy.make_toy_corpus(d, n_speakers=4, clips_per_speaker=10, seed=0)
    return d


@pytest.fixture(scope="session")
def toy_utts(toy_dir):
    return load_corpus(toy_dir, PseudoEncoder(0))


@pytest.fixture(scope="session")
def toy_codebook(toy_utts):
    return fit_codebook([u.features for u in toy_utts], K=64, seed=0, max_iters=30)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE_DETAILS = {}


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::" not in getattr(rep, "nodeid", "") or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = rep.nodeid.split("::", 1)[1]
            rows.append((rep.location[1], name, "PASS" if outcome == "passed" else "FAIL"))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for _, name, status in sorted(rows):
        title, detail = ACCEPTANCE_DETAILS.get(name, (name, ""))
        terminalreporter.write_line(f"{status}  {title}: {detail}".rstrip(": "))


@pytest.fixture
def criterion(request):
    """``criterion(title, detail)`` names the acceptance line printed for this test."""

    def record(title, detail=""):
        ACCEPTANCE_DETAILS[request.node.name] = (title, detail)

    return record

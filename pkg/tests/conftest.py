import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from thfem.synth import Corpus, make_corpus  # noqa: E402

ACCEPT_EMOTIONS = ("angry", "happy", "sad", "surprised")


@pytest.fixture(scope="session", autouse=True)
def _one_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    make_corpus(2, 1, ("happy", "sad"), seed=3, out_dir=root, duration=2.0)
    return Corpus.load(root)


@pytest.fixture(scope="session")
def accept_corpus(tmp_path_factory):
    """5 identities x 2 utterances x (1 neutral + 4 emotions) = 50 utterances."""
    root = tmp_path_factory.mktemp("accept_train")
    make_corpus(5, 2, ACCEPT_EMOTIONS, seed=1, out_dir=root, duration=2.0)
    return Corpus.load(root)


@pytest.fixture(scope="session")
def heldout_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_heldout")
    make_corpus(2, 1, ACCEPT_EMOTIONS, seed=1001, out_dir=root, duration=2.0)
    return Corpus.load(root)


@pytest.fixture(scope="session")
def trained_expert(accept_corpus):
    import time

    from thfem.training import train_sync_expert

    start = time.perf_counter()
    expert = train_sync_expert(accept_corpus, epochs=6, seed=0)
    expert.train_seconds = time.perf_counter() - start
    return expert


_ACCEPTANCE: dict[int, str] = {}


class _Criterion:
    def __init__(self, number: int, title: str, budget: float | None):
        self.number, self.title, self.budget = number, title, budget
        self.detail = ""

    def __enter__(self):
        import time

        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        secs = time.perf_counter() - self._start
        ok = exc_type is None and (self.budget is None or secs < self.budget)
        budget = f" (budget {self.budget:.0f}s)" if self.budget else ""
        line = (f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}: {self.detail}"
                f"  [{secs:.1f}s{budget}]")
        _ACCEPTANCE[self.number] = line
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} exceeded its {self.budget}s budget")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])

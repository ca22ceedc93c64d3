import pytest

from voiceshield.corpus import generate_corpus, split
from voiceshield.pipeline import train_artifacts


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 speakers x 5 short utterances, split 0.4/0.2/0.4 (2/1/2 per speaker)."""
    root = tmp_path_factory.mktemp("small_corpus")
    m = generate_corpus(str(root), seed=3, n_speakers=4, utts_per_speaker=5, duration_s=1.0)
    return split(m, (0.4, 0.2, 0.4), seed=3)


@pytest.fixture(scope="session")
def small_artifacts(small_corpus):
    art, summary = train_artifacts(small_corpus, seed=3, epochs=200, gl_iters=16)
    return art, summary


@pytest.fixture(scope="session")
def small_waves(small_corpus):
    from voiceshield.pipeline import WaveCache

    return WaveCache(small_corpus)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

import math
import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import noise, sine
from voiceshield.errors import IntegrityError, PreconditionError, TooShortError
from voiceshield.evaluation import (
    EMBEDDING_LEVEL,
    NO_ENHANCEMENT,
    RAW,
    SIGNAL_LEVEL,
    SUMMARY_FILE,
    TRIALS_FILE,
    CampaignSpec,
    EvalReport,
    TrialOutcome,
    aggregate,
    cell_dsr,
    dsr,
    dump_spectrogram,
    emit_report,
    load_report,
    log_spectral_distance,
    read_pgm,
    run_campaign,
    waveform_snr,
)
from voiceshield.signal import FrameSpec, Waveform, stft
from voiceshield.speaker import VerifierConfig


def _outcome(accept, score=None, defense=RAW, verifier="v", victim="a", snr=10.0):
    score = (0.9 if accept else 0.1) if score is None else score
    return TrialOutcome(victim, "c", defense, "-", NO_ENHANCEMENT, verifier, verifier, score, accept, 0.5, snr, 1.0, math.nan)


# ---------------------------------------------------------------- metrics

def test_dsr_examples():
    assert dsr([_outcome(False)] * 3) == 100.0
    assert dsr([_outcome(False)] * 3 + [_outcome(True)]) == 75.0
    assert dsr([_outcome(True)] * 2) == 0.0
    with pytest.raises(PreconditionError):
        dsr([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_dsr_order_invariant(flags, rnd):
    rows = [_outcome(f) for f in flags]
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    assert dsr(rows) == dsr(shuffled)


def test_outcome_invariants():
    with pytest.raises(PreconditionError):
        _outcome(True, score=1.5)
    with pytest.raises(PreconditionError):
        _outcome(True, score=0.2)  # verdict disagrees with threshold 0.5
    with pytest.raises(PreconditionError):
        _outcome(True, snr=math.inf)
    with pytest.raises(PreconditionError):
        _outcome(True, defense="magic")


def test_waveform_snr_examples():
    x = noise(3000, seed=1)
    assert waveform_snr(x, x) == 120.0
    assert waveform_snr(x, Waveform(np.zeros(3000))) == pytest.approx(0.0, abs=1e-12)
    y = noise(3200, seed=2)
    r, t = x.samples, y.samples[:3000]
    assert waveform_snr(x, y) == pytest.approx(10 * np.log10(np.sum(r**2) / np.sum((r - t) ** 2)), rel=1e-12)
    with pytest.raises(PreconditionError):
        waveform_snr(Waveform(np.zeros(100)), x)


def test_lsd_examples():
    x = noise(4000, seed=3)
    assert log_spectral_distance(x, x) == 0.0
    assert log_spectral_distance(x, Waveform(2 * x.samples)) == pytest.approx(20 * np.log10(2), abs=1e-9)
    with pytest.raises(TooShortError):
        log_spectral_distance(Waveform(np.ones(100)), Waveform(np.ones(100)))


def test_lsd_brute_force_loop():
    x, y = noise(3000, seed=4), noise(3000, seed=5)
    fs = FrameSpec()
    win = np.hanning(fs.n_fft + 1)[:-1] if fs.window == "hann" else np.ones(fs.n_fft)
    total, count = 0.0, 0
    for start in range(0, 3000 - fs.n_fft + 1, fs.hop):
        a = np.abs(np.fft.rfft(x.samples[start:start + fs.n_fft] * win))
        b = np.abs(np.fft.rfft(y.samples[start:start + fs.n_fft] * win))
        for va, vb in zip(a, b):
            d = 20 * (math.log10(max(vb, 1e-8)) - math.log10(max(va, 1e-8)))
            total += d * d
            count += 1
    assert count == stft(x).magnitude.size
    assert log_spectral_distance(x, y) == pytest.approx(math.sqrt(total / count), rel=1e-6)


# ---------------------------------------------------------------- spectrogram images

def test_silence_gives_uniform_image(tmp_path):
    w, h = dump_spectrogram(Waveform(np.zeros(4096)), tmp_path / "s.pgm")
    img = read_pgm(tmp_path / "s.pgm")
    assert img.shape == (h, w) == (257, 1 + (4096 - 512) // 128)
    assert np.all(img == img[0, 0])


def test_sine_gives_one_bright_row(tmp_path):
    k = 64
    x = sine(k * 16000 / 512, 8192)
    dump_spectrogram(x, tmp_path / "t.pgm")
    img = read_pgm(tmp_path / "t.pgm")
    rows = img.mean(axis=1)
    # low frequencies at the bottom: bin k sits at row (bins - 1 - k)
    assert np.argmax(rows) == 256 - k
    assert np.all(img[256 - k] == 255)
    assert rows[256 - k] > 2 * np.median(rows)


def test_spectrogram_too_short(tmp_path):
    with pytest.raises(TooShortError):
        dump_spectrogram(Waveform(np.ones(10)), tmp_path / "x.pgm")


# ---------------------------------------------------------------- reports

def _report(n=2):
    rows = [_outcome(i % 2 == 0, victim=f"v{i}") for i in range(n)]
    return EvalReport("seed = 1\n", 1, rows, [])


def test_report_rows_and_roundtrip(tmp_path):
    rep = _report(2)
    emit_report(rep, tmp_path, figures=False)
    lines = (tmp_path / TRIALS_FILE).read_text().splitlines()
    assert len(lines) == 3
    back = load_report(tmp_path)
    assert back.aggregates == rep.aggregates or all(
        {k: v for k, v in a.items() if k != "mean_removal_efficacy"} == {k: v for k, v in b.items() if k != "mean_removal_efficacy"}
        for a, b in zip(back.aggregates, rep.aggregates))
    assert back.seed == 1 and back.config == "seed = 1\n"
    assert [o.victim for o in back.outcomes] == ["v0", "v1"]


def test_tampered_summary_is_rejected(tmp_path):
    emit_report(_report(4), tmp_path, figures=False)
    p = tmp_path / SUMMARY_FILE
    lines = p.read_text().splitlines()
    fields = lines[1].split(",")
    fields[5] = "12.5"
    lines[1] = ",".join(fields)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(IntegrityError):
        load_report(tmp_path)


def test_bad_trial_row_is_rejected(tmp_path):
    emit_report(_report(2), tmp_path, figures=False)
    p = tmp_path / TRIALS_FILE
    p.write_text(p.read_text().replace(",1,0.5,", ",0,0.5,", 1))
    with pytest.raises(IntegrityError):
        load_report(tmp_path)


def test_aggregate_cells_and_cell_dsr():
    rows = [_outcome(True, verifier="a"), _outcome(False, verifier="b"), _outcome(False, verifier="a")]
    agg = aggregate(rows)
    assert [(r["verifier"], r["n"], r["dsr"]) for r in agg] == [("a", 2, 50.0), ("b", 1, 100.0)]
    assert cell_dsr(rows, RAW, NO_ENHANCEMENT, "a") == 50.0


def test_figures_are_written(tmp_path):
    rep = _report(4)
    rep.examples = {"v0:raw": noise(4096, seed=1), "v0:protected": noise(4096, seed=2)}
    paths = emit_report(rep, tmp_path)
    assert os.path.getsize(tmp_path / "dsr.png") > 0
    assert os.path.getsize(tmp_path / "spectrograms.png") > 0
    assert len([p for p in paths if p.endswith(".pgm")]) == 2


# ---------------------------------------------------------------- campaigns

@pytest.fixture(scope="module")
def small_spec():
    return CampaignSpec(defenses=(RAW, EMBEDDING_LEVEL, SIGNAL_LEVEL), enhancements=(NO_ENHANCEMENT, "wiener"),
                        max_victims=2, defense_overrides=(("max_iters", 30),), seed=5)


@pytest.fixture(scope="module")
def small_report(small_artifacts, small_corpus, small_spec):
    return run_campaign(small_artifacts[0], small_corpus, small_spec)


def test_campaign_grid_shape(small_report, small_artifacts):
    art = small_artifacts[0]
    n_verifiers = len(art.verifiers)
    # raw pairs with every verifier; matched protections pair with their own verifier only
    per_victim = n_verifiers * 2 * 3
    assert len(small_report.outcomes) == 2 * per_victim
    assert {o.defense for o in small_report.outcomes} == {RAW, EMBEDDING_LEVEL, SIGNAL_LEVEL}
    for o in small_report.outcomes:
        if o.defense != RAW:
            assert o.protect == o.verifier
        assert o.content.split("_")[0] != o.victim.split("_")[0]
        assert (o.enhancement == NO_ENHANCEMENT or o.defense == RAW) == math.isnan(o.removal_efficacy)


def test_campaign_deterministic_across_workers(small_artifacts, small_corpus, small_spec, small_report, tmp_path):
    again = run_campaign(small_artifacts[0], small_corpus, replace(small_spec, workers=2))
    assert again.outcomes == small_report.outcomes or [repr(o) for o in again.outcomes] == [repr(o) for o in small_report.outcomes]
    emit_report(small_report, tmp_path / "a", figures=False)
    emit_report(again, tmp_path / "b", figures=False)
    for name in (TRIALS_FILE, SUMMARY_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("threshold,expected", [(-1.0, 0.0), (1.0, 100.0)])
def test_threshold_extremes(small_artifacts, small_corpus, threshold, expected):
    art = small_artifacts[0]
    forced = replace(art, verifiers={k: VerifierConfig(k, threshold, v.eer) for k, v in art.verifiers.items()})
    spec = CampaignSpec(defenses=(RAW,), enhancements=(NO_ENHANCEMENT,), max_victims=2)
    rep = run_campaign(forced, small_corpus, spec)
    for row in rep.aggregates:
        assert row["dsr"] == expected
    assert all(o.score < 1.0 for o in rep.outcomes)


def test_campaign_rejects_unknown_names():
    with pytest.raises(PreconditionError):
        CampaignSpec(defenses=("magic",))
    with pytest.raises(PreconditionError):
        CampaignSpec(enhancements=("dnn",))
    with pytest.raises(PreconditionError):
        CampaignSpec(workers=0)


def test_unknown_verifier_is_an_error(small_artifacts, small_corpus):
    with pytest.raises(Exception):
        run_campaign(small_artifacts[0], small_corpus, CampaignSpec(verifiers=("nope",), max_victims=1))


def test_embedding_protection_lowers_scores_on_small_corpus(small_artifacts, small_corpus):
    # four victims are too few for DSR to move reliably; the mean verifier score must still drop
    spec = CampaignSpec(defenses=(RAW, EMBEDDING_LEVEL), enhancements=(NO_ENHANCEMENT,))
    rep = run_campaign(small_artifacts[0], small_corpus, spec)
    scores = {(r["defense"], r["verifier"]): r["mean_score"] for r in rep.aggregates}
    for v in small_artifacts[0].verifiers:
        assert scores[(EMBEDDING_LEVEL, v)] < scores[(RAW, v)]

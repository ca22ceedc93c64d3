import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import noise, sine
from voiceshield.attack import (
    METHODS,
    SMOOTHING,
    SPECTRAL_MASKING,
    WIENER,
    EnhanceConfig,
    enhance,
    enhance_magnitude,
    load_toy_synth,
    noise_estimate,
    removal_efficacy,
    save_toy_synth,
    synthesize_vc,
    train_toy_synth,
)
from voiceshield.errors import ConfigError, PreconditionError, ShapeError
from voiceshield.signal import FrameSpec, Waveform, stft, waveform_log_mel
from voiceshield.speaker import MEL_STATS, MFCC_STATS, SpeakerEmbedding, embed_speaker, similarity, verify


@pytest.fixture(scope="module")
def art(small_artifacts):
    return small_artifacts[0]


@pytest.fixture(scope="module")
def enroll_pairs(small_corpus, small_waves):
    return [(r.speaker, small_waves(r)) for r in small_corpus.select(split="train")]


def _cos(a, b):
    return float(np.sum(a * b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------- synthesizer

@pytest.mark.parametrize("variant", [MEL_STATS, MFCC_STATS])
def test_predicted_profile_matches_speaker_mean(art, enroll_pairs, variant):
    synth = art.synths[variant]
    for spk in sorted({s for s, _ in enroll_pairs}):
        waves = [w for s, w in enroll_pairs if s == spk]
        mu = np.concatenate([waveform_log_mel(w, synth.frame_spec, synth.mel).data for w in waves]).mean(axis=0)
        pred = synth.predicted_mean(art.profiles[variant][spk].embedding())
        assert np.linalg.norm(pred - mu) / np.linalg.norm(mu) < 0.1


def test_training_is_deterministic(art, enroll_pairs):
    enc = art.encoders[MEL_STATS]
    a = train_toy_synth(enroll_pairs, enc, seed=5, gl_iters=8)
    b = train_toy_synth(enroll_pairs, enc, seed=5, gl_iters=8)
    assert a.network.same_parameters(b.network)
    np.testing.assert_array_equal(a.reference_mean, b.reference_mean)


def test_single_speaker_is_an_error(art, enroll_pairs):
    one = [(s, w) for s, w in enroll_pairs if s == enroll_pairs[0][0]]
    with pytest.raises(PreconditionError):
        train_toy_synth(one, art.encoders[MEL_STATS])


def test_raw_attack_is_accepted(art, small_corpus, small_waves):
    content = [small_waves(r) for r in small_corpus.select(split="test")]
    for variant in (MEL_STATS, MFCC_STATS):
        enc, synth, ver = art.encoders[variant], art.synths[variant], art.verifiers[variant]
        accepted = []
        for r in small_corpus.select(split="victim"):
            stolen = embed_speaker(enc, small_waves(r))
            for i, c in enumerate(content):
                out = synthesize_vc(synth, c, stolen, seed=i)
                accepted.append(verify(art.profiles[variant][r.speaker], embed_speaker(enc, out), ver).accept)
        assert np.mean(accepted) >= 0.7, variant


def test_zero_embedding_gives_neutral_profile(art):
    synth = art.synths[MEL_STATS]
    gain, offset = synth.profile(SpeakerEmbedding(np.zeros(synth.network.input_dim), MEL_STATS))
    bias = synth.network.layers[0].bias
    n = synth.mel.n_mels
    np.testing.assert_array_equal(gain, bias[:n])
    np.testing.assert_array_equal(offset, bias[n:])


def test_synthesis_deterministic_and_sized(art, small_waves, small_corpus):
    rec = small_corpus.select(split="test")[0]
    c = small_waves(rec)
    stolen = art.profiles[MEL_STATS][rec.speaker].embedding()
    a = synthesize_vc(art.synths[MEL_STATS], c, stolen, seed=3)
    b = synthesize_vc(art.synths[MEL_STATS], c, stolen, seed=3)
    assert np.array_equal(a.samples, b.samples)
    assert abs(len(a) - len(c)) < art.synths[MEL_STATS].frame_spec.n_fft


def test_synthesis_errors(art):
    synth = art.synths[MEL_STATS]
    with pytest.raises(PreconditionError):
        synthesize_vc(synth, Waveform(np.zeros(100)), art.profiles[MEL_STATS]["spk00"].embedding())
    with pytest.raises(PreconditionError):
        synthesize_vc(synth, sine(200, 4000), art.profiles[MFCC_STATS]["spk00"].embedding())
    with pytest.raises(ShapeError):
        synth.profile(SpeakerEmbedding(np.ones(3) / np.sqrt(3), ""))


def test_stolen_identity_moves_the_output(art, small_corpus, small_waves):
    enc, synth = art.encoders[MEL_STATS], art.synths[MEL_STATS]
    c = small_waves(small_corpus.select(split="test")[0])
    profiles = art.profiles[MEL_STATS]
    for spk, prof in profiles.items():
        out = embed_speaker(enc, synthesize_vc(synth, c, prof.embedding()))
        own = similarity(prof, out)
        assert all(own > similarity(p, out) for s, p in profiles.items() if s != spk)


def test_save_load(tmp_path, art, small_corpus, small_waves):
    synth = art.synths[MFCC_STATS]
    save_toy_synth(synth, tmp_path / "s")
    back = load_toy_synth(tmp_path / "s")
    c = small_waves(small_corpus.select(split="test")[0])
    e = art.profiles[MFCC_STATS]["spk01"].embedding()
    assert np.array_equal(synthesize_vc(back, c, e).samples, synthesize_vc(synth, c, e).samples)


# ---------------------------------------------------------------- enhancement

def test_clean_sine_is_nearly_untouched():
    x = sine(440, 16000, amp=0.5)
    y = enhance(x, EnhanceConfig(SPECTRAL_MASKING))
    assert _cos(stft(x).magnitude, stft(y).magnitude) >= 0.95


def _snr(ref, test):
    return 10 * np.log10(np.sum(ref**2) / np.sum((ref - test) ** 2))


def test_noisy_sine_gains_five_db():
    # speech-like on/off gating leaves noise-only frames for the estimate
    clean = sine(440, 16000, amp=0.5).samples
    gate = (np.arange(16000) // 2000) % 2 == 0
    clean = clean * gate
    n = noise(16000, seed=1).samples
    n *= np.sqrt(np.mean(clean**2) / np.mean(n**2))  # 0 dB
    noisy = Waveform(clean + n)
    out = enhance(noisy, EnhanceConfig(SPECTRAL_MASKING)).samples
    sl = slice(512, 16000 - 512)
    assert _snr(clean[sl], out[sl]) - _snr(clean[sl], noisy.samples[sl]) >= 5.0


def test_kernel_width_one_is_identity():
    x = noise(6000, seed=2, amp=0.3)
    y = enhance(x, EnhanceConfig(SMOOTHING, kernel_width=1))
    assert np.max(np.abs(y.samples - x.samples)) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([SPECTRAL_MASKING, WIENER]), st.floats(0.01, 0.9), st.floats(0.5, 4.0))
def test_magnitude_floor_per_bin(seed, method, floor, over):
    mag = np.abs(np.random.default_rng(seed).standard_normal((20, 33)))
    out = enhance_magnitude(mag, EnhanceConfig(method, spectral_floor=floor, over_subtraction=over))
    assert np.all(out >= floor * mag - 1e-15)
    assert np.all(out <= mag + 1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_enhance_deterministic_and_length_preserving(method):
    x = noise(5001, seed=4, amp=0.2)
    a, b = enhance(x, EnhanceConfig(method)), enhance(x, EnhanceConfig(method))
    assert len(a) == len(x) and np.array_equal(a.samples, b.samples)


def test_smoothing_is_temporal_median():
    rng = np.random.default_rng(6)
    mag = np.abs(rng.standard_normal((9, 4)))
    out = enhance_magnitude(mag, EnhanceConfig(SMOOTHING, kernel_width=3))
    padded = np.vstack([mag[:1], mag, mag[-1:]])
    expected = np.stack([np.median(padded[t:t + 3], axis=0) for t in range(9)])
    np.testing.assert_array_equal(out, expected)


def test_noise_estimate_lowest_energy_frames():
    mag = np.arange(1, 21, dtype=float)[:, None] * np.ones((1, 3))
    np.testing.assert_array_equal(noise_estimate(mag), [1.5] * 3)  # 10% of 20 frames
    np.testing.assert_array_equal(noise_estimate(mag, 4), [2.5] * 3)


def test_enhance_config_and_length_errors():
    for bad in (dict(method="dnn"), dict(over_subtraction=0), dict(spectral_floor=1.0),
                dict(kernel_width=4), dict(noise_frames=-1)):
        with pytest.raises(ConfigError):
            EnhanceConfig(**bad)
    with pytest.raises(PreconditionError):
        enhance(noise(1000, seed=0), EnhanceConfig(noise_frames=10))


# ---------------------------------------------------------------- removal efficacy

def test_removal_efficacy_endpoints_and_oracle():
    o = noise(4000, seed=1, amp=0.3)
    p = Waveform(o.samples + noise(4000, seed=2, amp=0.05).samples)
    e = Waveform(o.samples + noise(4000, seed=3, amp=0.02).samples)
    assert removal_efficacy(o, p, o) == 0.0
    assert removal_efficacy(o, p, p) == 1.0
    fs = FrameSpec()
    mo, mp, me = (stft(w, fs).magnitude for w in (o, p, e))
    assert removal_efficacy(o, p, e) == pytest.approx(np.linalg.norm(me - mo) / np.linalg.norm(mp - mo), rel=1e-12)


def test_removal_efficacy_trims_and_errors():
    o = noise(4000, seed=1, amp=0.3)
    p = Waveform(np.concatenate([o.samples, np.zeros(300)]) + noise(4300, seed=2, amp=0.05).samples)
    assert removal_efficacy(o, p, p) == 1.0
    with pytest.raises(PreconditionError):
        removal_efficacy(o, o, p)
    with pytest.raises(PreconditionError):
        removal_efficacy(Waveform(np.ones(100)), p, p)

import filecmp
import os

import numpy as np
import pytest

from helpers import central_diff, rel_err, sine
from voiceshield.codec import (
    EmbeddingSeq,
    decode,
    decode_features,
    decode_features_vjp,
    encode,
    fit_codec,
    load_codec,
    magnitude_cosine,
    save_codec,
)
from voiceshield.errors import PreconditionError, ShapeError
from voiceshield.signal import Waveform, waveform_log_mel


@pytest.fixture(scope="module")
def train_waves(small_corpus, small_waves):
    return [small_waves(r) for r in small_corpus.select(split="train")]


@pytest.fixture(scope="module")
def codec(train_waves):
    return fit_codec(train_waves, d=32, seed=0, gl_iters=16)


def _mels(waves):
    return np.concatenate([waveform_log_mel(w).data for w in waves])


def test_full_rank_roundtrip_is_exact(train_waves):
    m = fit_codec(train_waves, d=64, ridge=0.0)
    x = waveform_log_mel(train_waves[0]).data
    y = decode_features(m, encode(m, train_waves[0])).data
    # float32 parameter storage bounds the agreement
    assert np.max(np.abs(y - x)) < 1e-3 * np.max(np.abs(x))


def test_half_rank_matches_least_squares_oracle(train_waves, codec):
    x = _mels(train_waves)
    e = codec.analysis(x)
    z = x - codec.mel.log_floor
    # independent oracle: ridge least squares through an augmented lstsq system
    lam = 1e-4 * np.trace(e.T @ e) / e.shape[1]
    a = np.vstack([e, np.sqrt(lam) * np.eye(e.shape[1])])
    b = np.vstack([z, np.zeros((e.shape[1], z.shape[1]))])
    w, *_ = np.linalg.lstsq(a, b, rcond=None)
    recon_oracle = e @ w + codec.mel.log_floor
    recon = decode_features(codec, e).data
    assert rel_err(recon, recon_oracle) < 1e-5
    rel = np.linalg.norm(recon - x) / np.linalg.norm(x)
    assert rel < 0.15


def test_fit_is_deterministic_on_disk(tmp_path, train_waves):
    for name in ("a", "b"):
        save_codec(fit_codec(train_waves[:3], d=16, seed=4), tmp_path / name)
    files = sorted(os.listdir(tmp_path / "a"))
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == []


def test_fit_errors(train_waves):
    with pytest.raises(PreconditionError):
        fit_codec([], d=8)
    with pytest.raises(PreconditionError):
        fit_codec(train_waves[:1], d=65)
    with pytest.raises(PreconditionError):
        fit_codec(train_waves[:1], d=0)


def test_zero_waveform_encodes_to_constant_rows(codec):
    e = encode(codec, Waveform(np.zeros(2048))).data
    assert np.allclose(e, e[0])
    # the floor maps to the origin
    assert np.max(np.abs(e)) < 1e-3


def test_encode_is_frame_local(codec, train_waves):
    hop = codec.frame_spec.hop
    x = train_waves[0].samples[: 20 * hop]
    y = train_waves[1].samples[: 20 * hop]
    ex = encode(codec, Waveform(x)).data
    ey = encode(codec, Waveform(y)).data
    exy = encode(codec, Waveform(np.concatenate([x, y]))).data
    np.testing.assert_allclose(exy[: ex.shape[0]], ex, atol=1e-9)
    np.testing.assert_allclose(exy[20:20 + ey.shape[0]], ey, atol=1e-9)


def test_encode_matches_direct_projection(codec):
    w = sine(440, 4096)
    mel = waveform_log_mel(w, codec.frame_spec, codec.mel).data
    layer = codec.analysis.layers[0]
    np.testing.assert_allclose(encode(codec, w).data, mel @ layer.weight + layer.bias, rtol=1e-12, atol=1e-12)
    assert encode(codec, w).n_frames == 1 + (4096 - 512) // 128


def test_encode_too_short(codec):
    with pytest.raises(PreconditionError):
        encode(codec, Waveform(np.zeros(100)))


def test_decode_features_gradient(codec):
    rng = np.random.default_rng(0)
    e = rng.standard_normal((4, codec.dim))
    up = rng.standard_normal((4, codec.mel.n_mels))
    _, pull = decode_features_vjp(codec, e)
    num = central_diff(lambda z: float(np.sum(decode_features(codec, z).data * up)), e)
    assert rel_err(pull(up), num) < 1e-4


def test_decode_features_with_refinement_gradient(train_waves):
    m = fit_codec(train_waves[:2], d=8, refinement_stages=2, refinement_epochs=5)
    rng = np.random.default_rng(1)
    e = rng.standard_normal((3, 8))
    up = rng.standard_normal((3, m.mel.n_mels))
    out, pull = decode_features_vjp(m, e)
    assert out.data.shape == (3, m.mel.n_mels)
    num = central_diff(lambda z: float(np.sum(decode_features(m, z).data * up)), e)
    assert rel_err(pull(up), num) < 1e-4


def test_zero_embedding_gives_bias_row(codec):
    out = decode_features(codec, np.zeros((3, codec.dim))).data
    np.testing.assert_array_equal(out, np.tile(codec.synthesis.layers[0].bias, (3, 1)))
    assert np.allclose(out, codec.mel.log_floor, rtol=1e-6)


def test_decode_features_linear_without_refinement(codec):
    rng = np.random.default_rng(3)
    e = rng.standard_normal((5, codec.dim))
    bias = codec.synthesis.layers[0].bias
    for a in (-2.0, 0.5, 3.0):
        lhs = decode_features(codec, a * e).data - bias
        rhs = a * (decode_features(codec, e).data - bias)
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


def test_shape_mismatch(codec):
    with pytest.raises(ShapeError):
        decode_features(codec, np.zeros((3, codec.dim + 1)))


def test_roundtrip_fidelity(codec, small_corpus, small_waves):
    sims = [magnitude_cosine(small_waves(r), decode(codec, encode(codec, small_waves(r)))) for r in small_corpus]
    assert np.mean(np.array(sims) >= 0.90) >= 0.95


def test_zero_embeddings_decode_near_silent(codec, train_waves):
    corpus_rms = np.sqrt(np.mean(np.concatenate([w.samples for w in train_waves]) ** 2))
    out = decode(codec, np.zeros((30, codec.dim)))
    assert out.rms() < 1e-3 * corpus_rms


def test_decode_deterministic(codec, train_waves):
    e = encode(codec, train_waves[0])
    assert np.array_equal(decode(codec, e).samples, decode(codec, e).samples)


def test_save_load_roundtrip(tmp_path, codec, train_waves):
    save_codec(codec, tmp_path / "c")
    back = load_codec(tmp_path / "c")
    assert back.same_parameters(codec)
    assert back.gl_iters == codec.gl_iters and back.mel == codec.mel
    np.testing.assert_array_equal(encode(back, train_waves[0]).data, encode(codec, train_waves[0]).data)


def test_embedding_seq_invariants():
    with pytest.raises(ShapeError):
        EmbeddingSeq(np.zeros(5))
    with pytest.raises(PreconditionError):
        EmbeddingSeq(np.full((2, 3), np.nan))

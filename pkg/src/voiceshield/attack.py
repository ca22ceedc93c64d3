"""Adversary side: a statistics-transfer voice converter and classical enhancement filters."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffnet
from .diffnet import Layer, Network
from .errors import ConfigError, MissingArtifactError, PreconditionError, ShapeError
from .signal import (
    DEFAULT_SAMPLE_RATE,
    ComplexSpectrogram,
    FrameSpec,
    MelConfig,
    MelFrames,
    Waveform,
    griffin_lim,
    istft,
    mel_to_magnitude,
    reliable_mask,
    stft,
    waveform_log_mel,
)
from .speaker import SpeakerEmbedding, SpeakerEncoderModel, embed_speaker

SPECTRAL_MASKING = "spectral-masking"
WIENER = "wiener"
SMOOTHING = "smoothing"
METHODS = (SPECTRAL_MASKING, WIENER, SMOOTHING)


@dataclass
class ToySynthModel:
    network: Network  # affine: embedding -> [gain (n_mels), offset (n_mels)]
    reference_mean: np.ndarray
    reference_std: np.ndarray
    encoder_id: str
    gl_iters: int = 60
    mel: MelConfig = field(default_factory=MelConfig)
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.network.output_dim != 2 * self.mel.n_mels:
            raise ShapeError("toy synthesizer must output 2 * n_mels values")

    def profile(self, stolen: SpeakerEmbedding) -> tuple[np.ndarray, np.ndarray]:
        """Per-band ``(gain, offset)`` predicted from a speaker embedding."""
        if stolen.dim != self.network.input_dim:
            raise ShapeError(f"embedding dimension {stolen.dim} does not match synthesizer input {self.network.input_dim}")
        out = self.network(stolen.vector)
        n = self.mel.n_mels
        return out[:n], out[n:]

    def predicted_mean(self, stolen: SpeakerEmbedding) -> np.ndarray:
        gain, offset = self.profile(stolen)
        return gain * self.reference_mean + offset


def _band_stats(mel_data):
    return mel_data.mean(axis=0), mel_data.std(axis=0) + 1e-6


def train_toy_synth(corpus, encoder: SpeakerEncoderModel, seed: int = 0, ridge: float = 1e-3, gl_iters: int = 60,
                    mel: MelConfig | None = None) -> ToySynthModel:
    """Least-squares map from utterance embeddings to their speaker's per-band renormalisation.

    ``corpus`` holds ``(speaker id, waveform)`` pairs. The neutral reference
    is the pooled per-band mean/std over every frame; a speaker's target is
    the gain and offset carrying the reference onto that speaker's own
    mean/std. The fit is closed-form; ``seed`` only orders the rows.

    The synthesizer analyses audio with ``mel`` (default: the encoder's bands
    at the standard floor), not with the encoder's noise gate, so it models
    the background level as well as the voice.
    """
    items = list(corpus)
    speakers = sorted({spk for spk, _ in items})
    if len(speakers) < 2:
        raise PreconditionError("toy synthesizer training needs at least two speakers")
    mel = mel or replace(encoder.mel, floor=MelConfig().floor)
    mels = [waveform_log_mel(w, encoder.frame_spec, mel).data for _, w in items]
    ref_mean, ref_std = _band_stats(np.concatenate(mels))
    targets = {}
    for spk in speakers:
        mu, sd = _band_stats(np.concatenate([m for (s, _), m in zip(items, mels) if s == spk]))
        gain = sd / ref_std
        targets[spk] = np.concatenate([gain, mu - gain * ref_mean])
    order = np.random.default_rng(seed).permutation(len(items))
    emb = np.stack([embed_speaker(encoder, items[i][1]).vector for i in order])
    y = np.stack([targets[items[i][0]] for i in order])
    a = np.hstack([emb, np.ones((emb.shape[0], 1))])
    reg = ridge * np.eye(a.shape[1])
    reg[-1, -1] = 0.0
    beta = np.linalg.solve(a.T @ a + reg, a.T @ y)
    net = Network([Layer(diffnet.AFFINE, beta[:-1], beta[-1])]).rounded()
    return ToySynthModel(net, ref_mean, ref_std, encoder.encoder_id, gl_iters, mel, encoder.frame_spec, encoder.sample_rate)


def synthesize_vc(model: ToySynthModel, content: Waveform, stolen: SpeakerEmbedding, seed: int = 0) -> Waveform:
    """Re-voice ``content``: normalise its bands to the reference profile, then apply the stolen speaker's profile."""
    if len(content) < model.frame_spec.n_fft:
        raise PreconditionError("content shorter than one frame")
    if stolen.encoder_id and stolen.encoder_id != model.encoder_id:
        raise PreconditionError(f"embedding from {stolen.encoder_id!r} fed to a synthesizer built on {model.encoder_id!r}")
    c = waveform_log_mel(content, model.frame_spec, model.mel).data
    mu, sd = _band_stats(c)
    neutral = (c - mu) / sd * model.reference_std + model.reference_mean
    gain, offset = model.profile(stolen)
    mel = MelFrames(neutral * gain + offset, model.mel, model.frame_spec, model.sample_rate)
    return griffin_lim(mel_to_magnitude(mel), model.frame_spec, model.gl_iters, model.sample_rate, seed=seed)


def save_toy_synth(model: ToySynthModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    diffnet.save_network(model.network, os.path.join(directory, "synth.net"))
    meta = {
        "encoder_id": model.encoder_id,
        "gl_iters": model.gl_iters,
        "reference_mean": [float(v) for v in model.reference_mean],
        "reference_std": [float(v) for v in model.reference_std],
        "mel": asdict(model.mel),
        "frame_spec": asdict(model.frame_spec),
        "sample_rate": model.sample_rate,
    }
    with open(os.path.join(directory, "synth.manifest"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_toy_synth(directory) -> ToySynthModel:
    path = os.path.join(directory, "synth.manifest")
    if not os.path.exists(path):
        raise MissingArtifactError(f"synthesizer manifest not found: {path}")
    with open(path) as fh:
        meta = json.load(fh)
    return ToySynthModel(
        diffnet.load_network(os.path.join(directory, "synth.net")),
        np.array(meta["reference_mean"]),
        np.array(meta["reference_std"]),
        meta["encoder_id"],
        meta["gl_iters"],
        MelConfig(**meta["mel"]),
        FrameSpec(**meta["frame_spec"]),
        meta["sample_rate"],
    )


# ---------------------------------------------------------------- enhancement

@dataclass(frozen=True)
class EnhanceConfig:
    method: str = SPECTRAL_MASKING
    noise_frames: int = 0  # 0: lowest-energy 10% of frames
    over_subtraction: float = 2.0
    spectral_floor: float = 0.05
    kernel_width: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown enhancement method {self.method!r}; expected one of {METHODS}")
        if self.over_subtraction <= 0:
            raise ConfigError("over_subtraction must be > 0")
        if not 0.0 < self.spectral_floor < 1.0:
            raise ConfigError("spectral_floor must lie in (0, 1)")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError("kernel_width must be odd and >= 1")
        if self.noise_frames < 0:
            raise ConfigError("noise_frames must be >= 0")


def noise_estimate(magnitude: np.ndarray, noise_frames: int = 0) -> np.ndarray:
    """Mean magnitude of the lowest-energy frames (10% of them unless ``noise_frames`` is set)."""
    n = noise_frames or max(1, int(np.ceil(0.1 * magnitude.shape[0])))
    energy = np.sum(magnitude**2, axis=1)
    idx = np.argsort(energy, kind="stable")[:n]
    return magnitude[idx].mean(axis=0)


def _median_time(mag, width):
    if width == 1:
        return mag.copy()
    half = width // 2
    padded = np.pad(mag, ((half, half), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=0)
    return np.median(windows, axis=-1)


def enhance_magnitude(mag: np.ndarray, config: EnhanceConfig) -> np.ndarray:
    if config.method == SMOOTHING:
        return _median_time(mag, config.kernel_width)
    noise = noise_estimate(mag, config.noise_frames)
    floor = config.spectral_floor * mag
    if config.method == SPECTRAL_MASKING:
        return np.maximum(mag - config.over_subtraction * noise[None, :], floor)
    # Wiener gain from the maximum-likelihood a priori SNR
    npow = config.over_subtraction * noise[None, :] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.maximum(mag**2 / npow - 1.0, 0.0)
        gain = np.where(npow > 0, xi / (1.0 + xi), 1.0)
    return np.maximum(gain, config.spectral_floor) * mag


def enhance(waveform: Waveform, config: EnhanceConfig = EnhanceConfig(), frame_spec: FrameSpec = FrameSpec()) -> Waveform:
    """Magnitude-domain enhancement with the input phase; output has the input's length."""
    n_frames = frame_spec.n_frames(len(waveform))
    need = max(config.noise_frames, 1)
    if n_frames < need:
        raise PreconditionError(f"waveform yields {n_frames} frames, fewer than the {need} needed for the noise estimate")
    spec = stft(waveform, frame_spec)
    mag = spec.magnitude
    new_mag = enhance_magnitude(mag, config)
    phase = np.where(mag > 0, spec.data / np.where(mag > 0, mag, 1.0), 1.0)
    y = istft(ComplexSpectrogram(new_mag * phase, frame_spec, waveform.sample_rate)).samples
    # edge samples without full window coverage (and any tail shorter than a hop) pass through unchanged
    keep = reliable_mask(n_frames, frame_spec)
    out = waveform.samples.copy()
    out[: keep.shape[0]][keep] = y[keep]
    return Waveform(out, waveform.sample_rate)


def removal_efficacy(original: Waveform, protected: Waveform, enhanced: Waveform, frame_spec: FrameSpec = FrameSpec()) -> float:
    """``|| |E| - |O| || / || |P| - |O| ||`` over magnitude spectrograms: 0 = perturbation removed, >= 1 = kept."""
    n = min(len(original), len(protected), len(enhanced))
    if n < frame_spec.n_fft:
        raise PreconditionError("signals shorter than one frame after trimming")
    mags = [stft(Waveform(w.samples[:n], w.sample_rate), frame_spec).magnitude for w in (original, protected, enhanced)]
    o, p, e = mags
    if o.shape != p.shape or o.shape != e.shape:
        raise ShapeError("magnitude spectrogram shapes differ after trimming")
    den = np.linalg.norm(p - o)
    if den == 0:
        raise PreconditionError("protected equals original: perturbation norm is zero")
    return float(np.linalg.norm(e - o) / den)

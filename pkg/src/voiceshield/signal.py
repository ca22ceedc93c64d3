"""DSP core: WAV exchange, STFT/ISTFT, log-mel analysis and Griffin-Lim."""

from __future__ import annotations

import functools
import os
import struct
import warnings
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MalformedHeaderError,
    PreconditionError,
    ShapeError,
    TooShortError,
    UnsupportedEncodingError,
)

DEFAULT_SAMPLE_RATE = 16000


class ClippingWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise PreconditionError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise PreconditionError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0


@dataclass(frozen=True)
class FrameSpec:
    n_fft: int = 512
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft <= 0 or not 0 < self.hop <= self.n_fft:
            raise PreconditionError(f"invalid framing n_fft={self.n_fft} hop={self.hop}")
        if self.window not in _WINDOWS:
            raise PreconditionError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.n_fft)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.n_fft:
            return 0
        return 1 + (n_samples - self.n_fft) // self.hop

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.n_fft

    def is_cola(self) -> bool:
        w = self.window_array()
        env = np.array([w[n :: self.hop].sum() for n in range(self.hop)])
        return bool(np.ptp(env) <= 1e-10 * max(np.abs(env).max(), 1e-300) and env.min() > 0)


def _hann(n):
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {"hann": _hann, "rect": np.ones}


@functools.lru_cache(maxsize=16)
def _window_cached(name, n):
    w = _WINDOWS[name](n).astype(np.float64)
    w.flags.writeable = False
    return w


def _window(name, n):
    return _window_cached(name, n)


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 7600.0
    floor: float = 1e-10

    @property
    def log_floor(self) -> float:
        return float(np.log(self.floor))


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    data: np.ndarray
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.complex128)
        if d.ndim != 2 or d.shape[1] != self.frame_spec.n_bins:
            raise ShapeError(f"spectrogram shape {d.shape} does not match n_fft={self.frame_spec.n_fft}")
        object.__setattr__(self, "data", d)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class MelFrames:
    data: np.ndarray
    mel: MelConfig = field(default_factory=MelConfig)
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != self.mel.n_mels:
            raise ShapeError(f"mel frames shape {d.shape} does not match n_mels={self.mel.n_mels}")
        object.__setattr__(self, "data", d)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------- WAV I/O

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE


def _parse_wav(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedHeaderError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body = blob[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedHeaderError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16]) + (body,)
        elif cid == b"data":
            data = body
            if len(body) < size:
                raise MalformedHeaderError(f"{path}: truncated data chunk")
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedHeaderError(f"{path}: missing fmt or data chunk")
    return fmt, data


def probe_wav(path) -> tuple[int, int, int]:
    """Return ``(sample_rate, n_channels, n_frames)`` from the header only."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    (tag, channels, rate, _, block_align, bits, body), data = _parse_wav(path)
    if channels < 1 or block_align <= 0:
        raise MalformedHeaderError(f"{path}: invalid channel layout")
    return rate, channels, len(data) // block_align


def read_wav(path) -> Waveform:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    (tag, channels, rate, _, block_align, bits, body), data = _parse_wav(path)
    if channels < 1 or rate <= 0:
        raise MalformedHeaderError(f"{path}: invalid channel count or rate")
    if tag == _FORMAT_EXTENSIBLE:
        if len(body) < 26:
            raise MalformedHeaderError(f"{path}: truncated extensible fmt chunk")
        (tag,) = struct.unpack("<H", body[24:26])
    if tag == _FORMAT_PCM and bits == 16:
        raw = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        raw = np.frombuffer(data[: len(data) - len(data) % 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: format tag {tag} with {bits} bits is not supported")
    n = raw.shape[0] // channels
    if n == 0:
        raise MalformedHeaderError(f"{path}: no complete sample frames")
    samples = raw[: n * channels].reshape(n, channels).mean(axis=1)
    return Waveform(np.clip(samples, -1.0, 1.0), rate)


def write_wav(path, waveform: Waveform) -> None:
    x = waveform.samples
    if x.size == 0:
        raise PreconditionError("cannot write an empty waveform")
    n_clip = int(np.count_nonzero(np.abs(x) > 1.0))
    if n_clip:
        warnings.warn(f"{n_clip} samples clipped to [-1, 1] while writing {path}", ClippingWarning, stacklevel=2)
    q = np.clip(np.round(np.clip(x, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(q.tobytes())


def decimate(waveform: Waveform, target_rate: int) -> Waveform:
    """Integer-factor decimation with a boxcar anti-alias filter."""
    if waveform.sample_rate == target_rate:
        return waveform
    factor = int(round(waveform.sample_rate / target_rate))
    if factor < 1 or waveform.sample_rate != factor * target_rate:
        raise PreconditionError(f"cannot decimate {waveform.sample_rate} Hz to {target_rate} Hz by an integer factor")
    kernel = np.ones(factor) / factor
    smoothed = np.convolve(waveform.samples, kernel, mode="same")
    return Waveform(smoothed[::factor], target_rate)


# ---------------------------------------------------------------- STFT

def stft(waveform: Waveform, spec: FrameSpec = FrameSpec()) -> ComplexSpectrogram:
    x = waveform.samples
    if x.shape[0] < spec.n_fft:
        raise TooShortError(f"waveform of {x.shape[0]} samples is shorter than n_fft={spec.n_fft}")
    frames = np.lib.stride_tricks.sliding_window_view(x, spec.n_fft)[:: spec.hop]
    return ComplexSpectrogram(np.fft.rfft(frames * spec.window_array(), axis=1), spec, waveform.sample_rate)


def _overlap_add(frames, spec):
    n_frames = frames.shape[0]
    out = np.zeros(spec.n_samples(n_frames))
    if spec.n_fft % spec.hop == 0:
        r = spec.n_fft // spec.hop
        blocks = out.reshape(-1, spec.hop)
        parts = frames.reshape(n_frames, r, spec.hop)
        for k in range(r):
            blocks[k : k + n_frames] += parts[:, k, :]
    else:
        for i, fr in enumerate(frames):
            out[i * spec.hop : i * spec.hop + spec.n_fft] += fr
    return out


@functools.lru_cache(maxsize=64)
def _window_norm(n_frames, spec):
    w = spec.window_array()
    den = _overlap_add(np.broadcast_to(w * w, (n_frames, spec.n_fft)), spec)
    den.flags.writeable = False
    return den


# Samples whose summed window power is below this fraction of the interior
# level are attenuated instead of divided out; dividing there amplifies any
# inconsistency in the spectrogram (Griffin-Lim output, edited magnitudes).
NORM_FLOOR = 0.1


def reliable_mask(n_frames: int, spec: FrameSpec) -> np.ndarray:
    """Samples that ``istft`` reconstructs exactly from a consistent spectrogram."""
    den = _window_norm(n_frames, spec)
    return den >= NORM_FLOOR * den.max()


def _istft_array(data, spec):
    w = spec.window_array()
    frames = np.fft.irfft(data, n=spec.n_fft, axis=1) * w
    num = _overlap_add(frames, spec)
    den = _window_norm(data.shape[0], spec)
    return num / np.maximum(den, NORM_FLOOR * den.max())


def istft(spectrogram: ComplexSpectrogram, spec: FrameSpec | None = None) -> Waveform:
    """Least-squares overlap-add inverse; exact on :func:`reliable_mask` samples for COLA framings."""
    spec = spec or spectrogram.frame_spec
    if not spec.is_cola():
        raise PreconditionError(f"window {spec.window!r} with n_fft={spec.n_fft}, hop={spec.hop} is not COLA")
    if spectrogram.n_frames == 0:
        raise TooShortError("spectrogram has no frames")
    return Waveform(_istft_array(spectrogram.data, spec), spectrogram.sample_rate)


# ---------------------------------------------------------------- mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def _filterbank_cached(sample_rate, n_fft, n_mels, fmin, fmax):
    if not (0 <= fmin < fmax <= sample_rate / 2) or n_mels < 1:
        raise PreconditionError(f"invalid mel band edges fmin={fmin}, fmax={fmax} at {sample_rate} Hz")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    for j in np.flatnonzero(fb.sum(axis=1) == 0):
        # band narrower than one bin: fall back to the bin nearest its centre
        fb[j, int(np.argmin(np.abs(freqs - edges[j + 1])))] = 1.0
    fb /= fb.sum(axis=1, keepdims=True)
    fb.flags.writeable = False
    return fb, edges


def mel_filterbank(sample_rate: int, n_fft: int, mel: MelConfig = MelConfig()) -> np.ndarray:
    """``(n_mels, n_bins)`` triangular filterbank with unit row sums."""
    return _filterbank_cached(int(sample_rate), int(n_fft), mel.n_mels, float(mel.fmin), float(mel.fmax))[0]


def mel_band_edges(sample_rate: int, n_fft: int, mel: MelConfig = MelConfig()) -> np.ndarray:
    return _filterbank_cached(int(sample_rate), int(n_fft), mel.n_mels, float(mel.fmin), float(mel.fmax))[1]


@functools.lru_cache(maxsize=16)
def _pinv_cached(sample_rate, n_fft, n_mels, fmin, fmax):
    fb = _filterbank_cached(sample_rate, n_fft, n_mels, fmin, fmax)[0]
    p = np.linalg.pinv(fb)
    p.flags.writeable = False
    return p


def mel_pseudo_inverse(sample_rate: int, n_fft: int, mel: MelConfig = MelConfig()) -> np.ndarray:
    return _pinv_cached(int(sample_rate), int(n_fft), mel.n_mels, float(mel.fmin), float(mel.fmax))


def log_mel_power(power: np.ndarray, sample_rate: int, n_fft: int, mel: MelConfig = MelConfig()) -> np.ndarray:
    fb = mel_filterbank(sample_rate, n_fft, mel)
    return np.log(np.maximum(power @ fb.T, mel.floor))


def log_mel(spectrogram: ComplexSpectrogram, mel: MelConfig = MelConfig()) -> MelFrames:
    fs = spectrogram.frame_spec
    power = spectrogram.data.real**2 + spectrogram.data.imag**2
    data = log_mel_power(power, spectrogram.sample_rate, fs.n_fft, mel)
    return MelFrames(data, mel, fs, spectrogram.sample_rate)


def waveform_log_mel(waveform: Waveform, spec: FrameSpec = FrameSpec(), mel: MelConfig = MelConfig()) -> MelFrames:
    return log_mel(stft(waveform, spec), mel)


def mel_to_magnitude(frames: MelFrames, refine_iters: int = 50) -> np.ndarray:
    """Invert log-mel to linear magnitude.

    Starts from the filterbank pseudo-inverse clipped at zero, then runs
    ``refine_iters`` multiplicative nonnegative least-squares updates so the
    magnitude's mel power matches the target again (clipping alone inflates
    the bands next to the clipped bins). ``refine_iters=0`` gives the plain
    clipped pseudo-inverse.
    """
    if refine_iters < 0:
        raise PreconditionError("refine_iters must be >= 0")
    fb = mel_filterbank(frames.sample_rate, frames.frame_spec.n_fft, frames.mel)
    pinv = mel_pseudo_inverse(frames.sample_rate, frames.frame_spec.n_fft, frames.mel)
    target = np.exp(frames.data)
    power = np.maximum(target @ pinv.T, 0.0)
    if refine_iters:
        # a tiny positive floor lets bins zeroed by the clip grow back
        power = power + 1e-9 * np.maximum(power.mean(axis=1, keepdims=True), frames.mel.floor)
        numer = target @ fb
        for _ in range(refine_iters):
            power *= numer / np.maximum((power @ fb.T) @ fb, 1e-300)
    return np.sqrt(power)


# ---------------------------------------------------------------- Griffin-Lim

def spectral_convergence(magnitude: np.ndarray, estimate: np.ndarray) -> float:
    ref = np.linalg.norm(magnitude)
    if ref == 0:
        return float(np.linalg.norm(estimate))
    return float(np.linalg.norm(estimate - magnitude) / ref)


def _consistent(spec_data, magnitude, spec):
    """Impose ``magnitude`` on the phase of ``spec_data`` and re-analyse."""
    m = np.abs(spec_data)
    phase = np.where(m > 0, spec_data / np.where(m > 0, m, 1.0), 1.0)
    x = _istft_array(magnitude * phase, spec)
    frames = np.lib.stride_tricks.sliding_window_view(x, spec.n_fft)[:: spec.hop]
    return x, np.fft.rfft(frames * spec.window_array(), axis=1)


def griffin_lim(
    magnitude,
    spec: FrameSpec = FrameSpec(),
    iters: int = 60,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    seed: int = 0,
    momentum: float = 0.99,
    return_errors: bool = False,
):
    """Reconstruct a waveform whose STFT magnitude approximates ``magnitude``.

    Runs the accelerated projection scheme (momentum on consistent
    spectrograms) with a restart: any step that would raise the
    spectral-convergence error is replaced by a plain Griffin-Lim step from the
    last accepted estimate, so the error sequence never increases.
    ``momentum=0`` gives the classic algorithm. The initial phase is drawn
    from ``seed``.
    """
    mag = np.asarray(magnitude, dtype=np.float64)
    if iters < 1:
        raise PreconditionError("griffin_lim needs at least one iteration")
    if mag.ndim != 2 or mag.shape[1] != spec.n_bins:
        raise ShapeError(f"magnitude shape {mag.shape} does not match n_fft={spec.n_fft}")
    if np.any(mag < 0) or not np.all(np.isfinite(mag)):
        raise PreconditionError("magnitudes must be finite and nonnegative")
    if not spec.is_cola():
        raise PreconditionError("griffin_lim requires a COLA framing")
    rng = np.random.default_rng(seed)
    start = mag * np.exp(2j * np.pi * rng.random(mag.shape))
    x_prev, t_prev = _consistent(start, mag, spec)
    err_prev = spectral_convergence(mag, np.abs(t_prev))
    c = t_prev
    errors = []
    for _ in range(iters):
        x, t = _consistent(c, mag, spec)
        err = spectral_convergence(mag, np.abs(t))
        if err > err_prev:
            x, t = _consistent(t_prev, mag, spec)
            err = spectral_convergence(mag, np.abs(t))
            c = t
        else:
            c = t + momentum * (t - t_prev)
        x_prev, t_prev, err_prev = x, t, err
        errors.append(err)
    out = Waveform(x_prev, sample_rate)
    return (out, errors) if return_errors else out

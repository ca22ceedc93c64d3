"""Protection: identity and quality losses, the alternating phase controller,
embedding-level sign-gradient protection and a magnitude-domain baseline."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecModel, EmbeddingSeq, decode_features_vjp, encode, mel_to_waveform
from .errors import ConfigError, NumericalError, PreconditionError, ShapeError
from .signal import ComplexSpectrogram, FrameSpec, Waveform, istft, mel_filterbank, reliable_mask, stft
from .speaker import (
    SpeakerEmbedding,
    SpeakerEncoderModel,
    SpeakerProfile,
    embed_speaker,
    embed_vjp,
)

IDENTITY = "identity"
QUALITY = "quality"
DONE = "done"
PHASES = (IDENTITY, QUALITY, DONE)

CONVERGED = "converged"
EXHAUSTED = "iteration-budget-exhausted"

L2 = "l2"
COSINE = "cosine"
DISTANCES = (L2, COSINE)

EPSILON_STAB = 1e-8


@dataclass(frozen=True)
class PercAlConfig:
    tau_identity: float
    alpha: float
    tau_snr_db: float = 15.0
    epsilon_init: float = 0.0
    epsilon_stab: float = EPSILON_STAB
    max_iters: int = 500
    budget_rho: float | None = None  # L-inf radius around the original; None disables projection
    distance: str = L2

    def __post_init__(self):
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise ConfigError("alpha must be a positive finite number")
        if not self.tau_identity > 0:
            raise ConfigError("tau_identity must be > 0")
        if isinstance(self.max_iters, bool) or int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError("max_iters must be an integer >= 1")
        if not self.epsilon_stab > 0:
            raise ConfigError("epsilon_stab must be > 0")
        if self.epsilon_init < 0:
            raise ConfigError("epsilon_init must be >= 0")
        if self.budget_rho is not None and not self.budget_rho > 0:
            raise ConfigError("budget_rho must be > 0 when enabled")
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}; expected one of {DISTANCES}")
        if math.isnan(self.tau_snr_db):
            raise ConfigError("tau_snr_db must not be NaN")


@dataclass(frozen=True)
class PercAlState:
    phase: str
    iteration: int
    l_identity: float
    snr_db: float


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    phase: str
    l_identity: float
    snr_db: float
    grad_norm: float


@dataclass
class DefenseResult:
    protected: Waveform
    embedding: object  # EmbeddingSeq (embedding level) or magnitude frames (signal level)
    trace: list = field(default_factory=list)
    reason: str = EXHAUSTED
    final: PercAlState | None = None  # state of the returned iterate
    reentries: int = 0  # quality -> identity switches seen in the trace

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def converged(self) -> bool:
        return self.reason == CONVERGED


# ---------------------------------------------------------------- losses

def _distance_and_grad(g, t, kind):
    if kind == L2:
        diff = g - t
        d = float(np.linalg.norm(diff))
        return d, (diff / d if d > 0 else np.zeros_like(g))
    ng, nt = np.linalg.norm(g), np.linalg.norm(t)
    if ng == 0 or nt == 0:
        return 1.0, np.zeros_like(g)
    cos = float(g @ t / (ng * nt))
    grad = -(t / (ng * nt) - cos * g / ng**2)
    return 1.0 - cos, grad


def _target_vector(codec, encoder, target):
    if isinstance(target, (SpeakerProfile, SpeakerEmbedding)):
        if target.encoder_id and target.encoder_id != encoder.encoder_id:
            raise PreconditionError(f"target from encoder {target.encoder_id!r} used with {encoder.encoder_id!r}")
        v = target.vector
    elif isinstance(target, EmbeddingSeq):
        mel, _ = decode_features_vjp(codec, target)
        v = embed_speaker(encoder, mel).vector
    elif isinstance(target, Waveform):
        mel, _ = decode_features_vjp(codec, encode(codec, target))
        v = embed_speaker(encoder, mel).vector
    else:
        v = np.asarray(target, dtype=np.float64)
    if v.shape != (encoder.dim,):
        raise ShapeError(f"target embedding shape {v.shape} does not match encoder dimension {encoder.dim}")
    return v


def _identity_terms(mel_data, encoders, targets, distance):
    """Mean distance over encoders and its gradient with respect to the mel frames."""
    total, g_mel = 0.0, np.zeros_like(mel_data)
    for enc, t in zip(encoders, targets):
        v, pull = embed_vjp(enc, mel_data)
        d, g = _distance_and_grad(v, t, distance)
        total += d
        g_mel += pull(g)
    n = len(encoders)
    return total / n, g_mel / n


def identity_loss(codec: CodecModel, encoder: SpeakerEncoderModel, e_perturb, e_target, distance: str = L2) -> float:
    """``D(G(e_perturb), G(e_target))`` with G = speaker encoder applied to the decoded mel frames."""
    return ensemble_identity_loss(codec, [encoder], e_perturb, [e_target], distance)


def ensemble_identity_loss(codec: CodecModel, encoders, e_perturb, targets, distance: str = L2) -> float:
    """Arithmetic mean of the per-encoder identity losses."""
    encoders = list(encoders)
    targets = list(targets)
    if not encoders:
        raise PreconditionError("ensemble needs at least one encoder")
    if len(targets) != len(encoders):
        raise PreconditionError(f"{len(encoders)} encoders but {len(targets)} targets")
    if distance not in DISTANCES:
        raise ConfigError(f"unknown distance {distance!r}")
    data = e_perturb.data if isinstance(e_perturb, EmbeddingSeq) else np.asarray(e_perturb, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != codec.dim:
        raise ShapeError(f"embedding shape {data.shape} does not match codec dimension {codec.dim}")
    mel, _ = decode_features_vjp(codec, data)
    tv = [_target_vector(codec, enc, t) for enc, t in zip(encoders, targets)]
    loss, _ = _identity_terms(mel.data, encoders, tv, distance)
    return loss


def _as_array(x):
    return x.data if isinstance(x, EmbeddingSeq) else np.asarray(x, dtype=np.float64)


def snr_loss(e_orig, e_perturb, epsilon_stab: float = EPSILON_STAB) -> float:
    """``10 log10(|e_orig|^2 / (|e_orig - e_perturb|^2 + epsilon_stab))`` in dB; higher means a smaller perturbation."""
    o, p = _as_array(e_orig), _as_array(e_perturb)
    if o.shape != p.shape:
        raise ShapeError(f"shape mismatch: {o.shape} vs {p.shape}")
    sig = float(np.sum(o * o))
    if sig == 0:
        raise PreconditionError("original embedding is all zero")
    noise = float(np.sum((o - p) ** 2))
    return 10.0 * math.log10(sig / (noise + epsilon_stab))


def _snr_ascent_direction(o, p):
    # d SNR / d p is a positive multiple of (o - p); only its sign is used
    return o - p


def perc_al_select(l_identity: float, snr_db: float, config: PercAlConfig) -> str:
    """Identity while the identity distance is above threshold, then quality until the SNR target is met."""
    if l_identity > config.tau_identity:
        return IDENTITY
    if snr_db < config.tau_snr_db:
        return QUALITY
    return DONE


# ---------------------------------------------------------------- optimisation loop

def _run_loop(x0, evaluate, config: PercAlConfig, rng, project=None):
    """Shared sign-gradient loop. ``evaluate(x)`` returns ``(l_identity, d l_identity / d x)``.

    ``project`` (optional) maps every iterate back onto a feasible set.
    """
    x_orig = x0
    noise = rng.standard_normal(x0.shape) if config.epsilon_init > 0 else np.zeros_like(x0)
    x = x0 + config.epsilon_init * noise
    if project is not None:
        x = project(x)
    trace, reentries, prev = [], 0, None
    best = None  # (key, x, state) of the most protective evaluated iterate
    reason = EXHAUSTED
    for it in range(config.max_iters):
        l_id, g_id = evaluate(x)
        snr = snr_loss(x_orig, x, config.epsilon_stab)
        if not (math.isfinite(l_id) and math.isfinite(snr)) or not np.all(np.isfinite(g_id)):
            raise NumericalError(f"non-finite loss or gradient at iteration {it}")
        phase = perc_al_select(l_id, snr, config)
        state = PercAlState(phase, it, l_id, snr)
        if prev == QUALITY and phase == IDENTITY:
            reentries += 1
        prev = phase
        if phase == IDENTITY:
            step = -np.sign(g_id)
            gnorm = float(np.linalg.norm(g_id))
        elif phase == QUALITY:
            d = _snr_ascent_direction(x_orig, x)
            step = np.sign(d)
            gnorm = float(np.linalg.norm(d) * 20.0 / math.log(10) / (np.sum(d * d) + config.epsilon_stab))
        else:
            gnorm = 0.0
        trace.append(TraceRow(it, phase, l_id, snr, gnorm))
        # prefer iterates that clear the identity threshold, then higher SNR; otherwise lower distance
        key = (0, -snr) if l_id <= config.tau_identity else (1, l_id)
        if best is None or key < best[0]:
            best = (key, x, state)
        if phase == DONE:
            reason = CONVERGED
            best = (key, x, state)
            break
        x = x + config.alpha * step
        if config.budget_rho is not None:
            x = np.clip(x, x_orig - config.budget_rho, x_orig + config.budget_rho)
        if project is not None:
            x = project(x)
    return best[1], trace, reason, best[2], reentries


def _resolve_targets(codec, encoders, target):
    if isinstance(target, dict):
        missing = [e.encoder_id for e in encoders if e.encoder_id not in target]
        if missing:
            raise PreconditionError(f"no target given for encoders {missing}")
        return [_target_vector(codec, e, target[e.encoder_id]) for e in encoders]
    if isinstance(target, (list, tuple)):
        if len(target) != len(encoders):
            raise PreconditionError(f"{len(encoders)} encoders but {len(target)} targets")
        return [_target_vector(codec, e, t) for e, t in zip(encoders, target)]
    if isinstance(target, (SpeakerProfile, SpeakerEmbedding)) and len(encoders) > 1:
        raise PreconditionError("an ensemble needs one target per encoder (pass a dict keyed by encoder id)")
    return [_target_vector(codec, e, target) for e in encoders]


def _as_encoders(encoders):
    if isinstance(encoders, SpeakerEncoderModel):
        return [encoders]
    encoders = list(encoders)
    if not encoders:
        raise PreconditionError("at least one speaker encoder is required")
    return encoders


def pgd_protect(codec: CodecModel, encoders, x_u: Waveform, target, config: PercAlConfig, seed: int = 0) -> DefenseResult:
    """Perturb the codec embeddings of ``x_u`` until the decoded voice reads as ``target``, then restore quality.

    ``target`` is a waveform, a profile or embedding (single encoder), or a
    dict keyed by encoder id. Gradients flow through the decoded mel frames;
    the waveform is synthesised once from the returned embedding.
    """
    encoders = _as_encoders(encoders)
    for enc in encoders:
        if enc.mel.n_mels != codec.mel.n_mels:
            raise ShapeError(f"encoder {enc.encoder_id!r} mel configuration differs from the codec's")
    e_orig = encode(codec, x_u)
    targets = _resolve_targets(codec, encoders, target)

    def evaluate(e):
        mel, pull = decode_features_vjp(codec, e)
        loss, g_mel = _identity_terms(mel.data, encoders, targets, config.distance)
        return loss, pull(g_mel)

    rng = np.random.default_rng(seed)
    e_adv, trace, reason, final, reentries = _run_loop(e_orig.data, evaluate, config, rng)
    emb = e_orig.with_data(e_adv)
    mel, _ = decode_features_vjp(codec, emb)
    protected = mel_to_waveform(codec, mel, seed=seed)
    return DefenseResult(protected, emb, trace, reason, final, reentries)


def _log_mel_vjp(magnitude, fb, floor):
    power = magnitude**2
    mp = power @ fb.T
    live = mp > floor
    data = np.log(np.where(live, mp, floor))

    def pullback(g):
        g_mp = np.where(live, g / np.where(live, mp, 1.0), 0.0)
        return 2.0 * magnitude * (g_mp @ fb)

    return data, pullback


def _resynthesize(spec: ComplexSpectrogram, magnitude, original: Waveform) -> Waveform:
    mag = spec.magnitude
    phase = np.where(mag > 0, spec.data / np.where(mag > 0, mag, 1.0), 1.0)
    y = istft(ComplexSpectrogram(magnitude * phase, spec.frame_spec, spec.sample_rate)).samples
    keep = reliable_mask(mag.shape[0], spec.frame_spec)
    out = original.samples.copy()
    out[: keep.shape[0]][keep] = y[keep]
    return Waveform(out, original.sample_rate)


def signal_level_protect(encoders, x_u: Waveform, target, config: PercAlConfig, seed: int = 0,
                         frame_spec: FrameSpec | None = None) -> DefenseResult:
    """Baseline: the same controller acting on the STFT magnitude frames of ``x_u``.

    Magnitudes are kept nonnegative after every step and the result is
    resynthesised with the original phase. ``target`` may be a waveform
    (embedded directly) or profiles as in :func:`pgd_protect`.
    """
    encoders = _as_encoders(encoders)
    fs = frame_spec or encoders[0].frame_spec
    spec = stft(x_u, fs)
    mag0 = spec.magnitude
    if isinstance(target, Waveform):
        targets = [embed_speaker(e, target).vector for e in encoders]
    else:
        targets = _resolve_targets(None, encoders, target)
    mel_cfg = encoders[0].mel
    fb = mel_filterbank(x_u.sample_rate, fs.n_fft, mel_cfg)

    def evaluate(m):
        data, pull = _log_mel_vjp(m, fb, mel_cfg.floor)
        loss, g_mel = _identity_terms(data, encoders, targets, config.distance)
        return loss, pull(g_mel)

    rng = np.random.default_rng(seed)
    mag, trace, reason, final, reentries = _run_loop(mag0, evaluate, config, rng, project=lambda m: np.maximum(m, 0.0))
    protected = _resynthesize(spec, mag, x_u)
    return DefenseResult(protected, mag, trace, reason, final, reentries)


# ---------------------------------------------------------------- defaults and traces

TAU_FRACTION = 0.8
ALPHA_FRACTION = 2e-3
INIT_FRACTION = 0.01


def mean_different_speaker_distance(encoder: SpeakerEncoderModel, corpus, distance: str = L2) -> float:
    """Mean distance between utterance embeddings of different speakers; ``corpus`` holds ``(speaker, item)`` pairs."""
    items = list(corpus)
    if distance not in DISTANCES:
        raise ConfigError(f"unknown distance {distance!r}")
    labels = np.array([spk for spk, _ in items])
    if np.unique(labels).size < 2:
        raise PreconditionError("need utterances from at least two speakers")
    v = np.stack([embed_speaker(encoder, it).vector for _, it in items])
    n = np.linalg.norm(v, axis=1)
    cos = (v @ v.T) / np.outer(n, n)
    if distance == L2:
        sq = n[:, None] ** 2 + n[None, :] ** 2 - 2.0 * (v @ v.T)
        dist = np.sqrt(np.maximum(sq, 0.0))
    else:
        dist = 1.0 - cos
    mask = labels[:, None] != labels[None, :]
    return float(dist[mask].mean())


def embedding_rms(codec: CodecModel, waveforms) -> float:
    sq, count = 0.0, 0
    for w in waveforms:
        e = encode(codec, w).data
        sq += float(np.sum(e * e))
        count += e.size
    if count == 0:
        raise PreconditionError("no waveforms to measure")
    return math.sqrt(sq / count)


def magnitude_rms(waveforms, frame_spec: FrameSpec = FrameSpec()) -> float:
    sq, count = 0.0, 0
    for w in waveforms:
        m = stft(w, frame_spec).magnitude
        sq += float(np.sum(m * m))
        count += m.size
    if count == 0:
        raise PreconditionError("no waveforms to measure")
    return math.sqrt(sq / count)


def derive_config(encoders, corpus, scale: float, distance: str = L2, **overrides) -> PercAlConfig:
    """Corpus-relative defaults: tau_identity from the different-speaker distance, alpha and init noise from ``scale``.

    ``scale`` is the RMS of the optimised variable (codec embeddings for the
    embedding-level defense, STFT magnitudes for the baseline). Keyword
    overrides replace any derived field.
    """
    encoders = _as_encoders(encoders)
    items = list(corpus)
    tau = TAU_FRACTION * float(np.mean([mean_different_speaker_distance(e, items, distance) for e in encoders]))
    fields = dict(tau_identity=tau, alpha=ALPHA_FRACTION * scale, epsilon_init=INIT_FRACTION * scale, distance=distance)
    fields.update(overrides)
    return PercAlConfig(**fields)


TRACE_COLUMNS = ("iteration", "phase", "l_identity", "snr_db", "grad_norm")


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row.iteration, row.phase, repr(row.l_identity), repr(row.snr_db), repr(row.grad_norm)])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [
            TraceRow(int(d["iteration"]), d["phase"], float(d["l_identity"]), float(d["snr_db"]), float(d["grad_norm"]))
            for d in r
        ]


def select_target(profiles: dict, victim: str) -> str:
    """Speaker whose profile is least similar (lowest cosine) to the victim's.

    ``profiles`` maps encoder id to ``{speaker: SpeakerProfile}``; with several
    encoders the cosine is averaged across them. Ties go to the smaller id.
    """
    if not profiles:
        raise PreconditionError("no enrolled profiles")
    tables = list(profiles.values())
    for table in tables:
        if victim not in table:
            raise PreconditionError(f"victim {victim!r} is not enrolled")
    candidates = sorted(set.intersection(*(set(t) for t in tables)) - {victim})
    if not candidates:
        raise PreconditionError("no other enrolled speaker to use as target")

    def mean_cos(spk):
        return float(np.mean([np.dot(t[victim].vector, t[spk].vector) for t in tables]))

    return min(candidates, key=lambda s: (mean_cos(s), s))

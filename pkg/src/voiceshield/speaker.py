"""Speaker encoders (d-vector style), enrollment, EER calibration and verification.

An encoder turns log-mel frames into per-utterance statistics (mean and
standard deviation over time of either the log-mel bands or their MFCCs),
standardises them and feeds a small network whose hidden layer, L2-normalised,
is the speaker embedding. The statistics front end has its own pullback so
the whole map from mel frames to embedding is differentiable.

Encoders floor mel power at ``GATE_FLOOR``, well above the corpus noise
level, so background noise and its removal both land on the same constant and
do not move the statistics. Mel frames computed with a lower floor (codec
output, for instance) are clamped to the gate on the way in.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffnet
from .diffnet import Layer, Network
from .errors import MissingArtifactError, PreconditionError, ShapeError
from .signal import DEFAULT_SAMPLE_RATE, FrameSpec, MelConfig, MelFrames, Waveform, waveform_log_mel

MEL_STATS = "mel-stats"
MFCC_STATS = "mfcc-stats"
VARIANTS = (MEL_STATS, MFCC_STATS)

# embedding dimension per variant
EMBED_DIMS = {MEL_STATS: 32, MFCC_STATS: 24}
N_MFCC = 20
HIDDEN = 64
STD_EPS = 1e-6
SCALE_FLOOR = 0.1
GATE_FLOOR = 3e-4
ENCODER_MEL = MelConfig(floor=GATE_FLOOR)


def dct_basis(n_in: int, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II as an ``(n_in, n_out)`` matrix."""
    k = np.arange(n_out)[None, :]
    n = np.arange(n_in)[:, None]
    b = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    b[:, 0] /= np.sqrt(2.0)
    return b


def feature_basis(variant: str, n_mels: int) -> np.ndarray:
    if variant == MEL_STATS:
        return np.eye(n_mels)
    if variant == MFCC_STATS:
        return dct_basis(n_mels, N_MFCC)
    raise PreconditionError(f"unknown encoder variant {variant!r}")


@dataclass(frozen=True, eq=False)
class SpeakerEmbedding:
    vector: np.ndarray
    encoder_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ShapeError("speaker embedding must be a finite vector")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: str
    vector: np.ndarray
    count: int
    encoder_id: str

    def embedding(self) -> SpeakerEmbedding:
        return SpeakerEmbedding(self.vector, self.encoder_id)


@dataclass(frozen=True)
class VerifierConfig:
    encoder_id: str
    threshold: float
    eer: float

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise PreconditionError(f"threshold {self.threshold} outside [-1, 1]")
        if not 0.0 <= self.eer <= 0.5:
            raise PreconditionError(f"EER {self.eer} outside [0, 0.5]")


@dataclass
class SpeakerEncoderModel:
    encoder_id: str
    variant: str
    network: Network  # standardisation affine, trunk, l2norm
    speakers: list = field(default_factory=list)
    mel: MelConfig = ENCODER_MEL
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.basis = feature_basis(self.variant, self.mel.n_mels)
        if self.network.input_dim != 2 * self.basis.shape[1]:
            raise ShapeError("encoder network input does not match the feature recipe")
        if self.network.layers[-1].kind != diffnet.L2NORM:
            raise ShapeError("encoder network must end in an L2-normalise layer")

    @property
    def dim(self) -> int:
        return self.network.output_dim


# ---------------------------------------------------------------- features

def stats_features(mel_data: np.ndarray, basis: np.ndarray) -> np.ndarray:
    f = np.asarray(mel_data) @ basis
    mu = f.mean(axis=0)
    sd = np.sqrt(np.mean((f - mu) ** 2, axis=0) + STD_EPS)
    return np.concatenate([mu, sd])


def stats_features_vjp(mel_data: np.ndarray, basis: np.ndarray):
    f = np.asarray(mel_data) @ basis
    t = f.shape[0]
    mu = f.mean(axis=0)
    dev = f - mu
    sd = np.sqrt(np.mean(dev**2, axis=0) + STD_EPS)
    k = basis.shape[1]

    def pullback(g):
        g_mu, g_sd = g[:k], g[k:]
        g_f = g_mu[None, :] / t + dev * (g_sd / (t * sd))[None, :]
        return g_f @ basis.T

    return np.concatenate([mu, sd]), pullback


def _mel_of(model: SpeakerEncoderModel, item) -> np.ndarray:
    return _log_mel_data(item, model.mel, model.frame_spec)


def _log_mel_data(item, mel: MelConfig, frame_spec: FrameSpec) -> np.ndarray:
    if isinstance(item, MelFrames):
        if item.mel.n_mels != mel.n_mels:
            raise ShapeError("mel frames do not match the encoder's mel configuration")
        data = item.data
    elif isinstance(item, Waveform):
        if len(item) < frame_spec.n_fft:
            raise PreconditionError("input too short for one feature frame")
        data = waveform_log_mel(item, frame_spec, mel).data
    else:
        data = np.asarray(item, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != mel.n_mels:
            raise ShapeError(f"mel array shape {data.shape} does not match n_mels={mel.n_mels}")
    if data.shape[0] < 1:
        raise PreconditionError("input too short for one feature frame")
    return np.maximum(data, mel.log_floor)


def embed_speaker(model: SpeakerEncoderModel, item) -> SpeakerEmbedding:
    feats = stats_features(_mel_of(model, item), model.basis)
    return SpeakerEmbedding(model.network(feats), model.encoder_id)


def embed_vjp(model: SpeakerEncoderModel, mel_data: np.ndarray):
    """Embedding of mel frames plus a pullback from d loss / d embedding to d loss / d mel."""
    raw = np.asarray(mel_data, dtype=np.float64)
    feats, feat_pull = stats_features_vjp(_mel_of(model, raw), model.basis)
    tape = diffnet.forward(model.network, feats)
    live = raw > model.mel.log_floor  # the gate clamp passes no gradient

    def pullback(g):
        return feat_pull(diffnet.backward(model.network, tape, g).input) * live

    return tape.output, pullback


def _vec(x):
    return x.vector if isinstance(x, (SpeakerEmbedding, SpeakerProfile)) else np.asarray(x, dtype=np.float64)


def similarity(a, b) -> float:
    """Cosine similarity of two embeddings (profiles and raw vectors are accepted too)."""
    va, vb = _vec(a), _vec(b)
    if va.shape != vb.shape:
        raise ShapeError(f"embedding dimensions differ: {va.shape} vs {vb.shape}")
    den = np.linalg.norm(va) * np.linalg.norm(vb)
    if den == 0:
        return 0.0
    return float(np.clip(va @ vb / den, -1.0, 1.0))


def enroll(model: SpeakerEncoderModel, samples, speaker_id: str = "") -> SpeakerProfile:
    samples = list(samples)
    if not samples:
        raise PreconditionError("enrollment needs at least one sample")
    embs = np.stack([embed_speaker(model, s).vector for s in samples])
    mean = embs.mean(axis=0)
    n = np.linalg.norm(mean)
    return SpeakerProfile(speaker_id, mean / n if n > 0 else mean, len(samples), model.encoder_id)


# ---------------------------------------------------------------- calibration

def eer_threshold(scores, labels) -> tuple[float, float]:
    """Threshold at the equal-error point and the EER itself.

    Candidate thresholds sit midway between consecutive distinct scores (plus
    the two extremes). The chosen one minimises |FAR - FRR|; ties go to the
    lower threshold. Acceptance is ``score >= threshold``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise PreconditionError("trial set needs both same-speaker and different-speaker trials")
    u = np.unique(s)
    cands = np.concatenate([[u[0] - 1e-6], (u[:-1] + u[1:]) / 2, [u[-1] + 1e-6]])
    same, diff = np.sort(s[y]), np.sort(s[~y])
    frr = np.searchsorted(same, cands, side="left") / same.size
    far = 1.0 - np.searchsorted(diff, cands, side="left") / diff.size
    gap = np.abs(far - frr)
    i = int(np.flatnonzero(gap == gap.min())[0])
    thr = float(np.clip(cands[i], -1.0, 1.0))
    return thr, float((far[i] + frr[i]) / 2)


def calibrate_threshold(model: SpeakerEncoderModel, profiles: dict, trials) -> VerifierConfig:
    """``trials`` are ``(claimed speaker id, waveform | mel | SpeakerEmbedding, is_same)`` triples."""
    scores, labels = [], []
    for spk, item, same in trials:
        emb = item if isinstance(item, SpeakerEmbedding) else embed_speaker(model, item)
        scores.append(similarity(profiles[spk].embedding(), emb))
        labels.append(bool(same))
    thr, eer = eer_threshold(scores, labels)
    return VerifierConfig(model.encoder_id, thr, min(eer, 0.5))


@dataclass(frozen=True)
class Decision:
    accept: bool
    score: float


def verify(profile: SpeakerProfile, emb: SpeakerEmbedding, config: VerifierConfig) -> Decision:
    """Accept iff cosine similarity >= threshold (a tie accepts)."""
    if profile.encoder_id != config.encoder_id or (emb.encoder_id and emb.encoder_id != config.encoder_id):
        raise PreconditionError(
            f"encoder mismatch: profile {profile.encoder_id!r}, embedding {emb.encoder_id!r}, verifier {config.encoder_id!r}"
        )
    score = similarity(profile.embedding(), emb)
    return Decision(score >= config.threshold, score)


# ---------------------------------------------------------------- training

def train_speaker_encoder(
    corpus,
    variant: str = MEL_STATS,
    seed: int = 0,
    encoder_id: str | None = None,
    epochs: int = 400,
    lr: float = 0.05,
    mel: MelConfig = ENCODER_MEL,
    frame_spec: FrameSpec = FrameSpec(),
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> tuple[SpeakerEncoderModel, dict]:
    """Train a speaker classifier on ``(speaker id, waveform | mel)`` pairs; keep its hidden layer as the embedding.

    Returns the encoder and a training summary with the loss curve and
    training accuracy.
    """
    items = list(corpus)
    speakers = sorted({spk for spk, _ in items})
    if len(speakers) < 2:
        raise PreconditionError("speaker encoder training needs at least two speakers")
    if variant not in VARIANTS:
        raise PreconditionError(f"unknown encoder variant {variant!r}")
    basis = feature_basis(variant, mel.n_mels)
    feats = np.stack([stats_features(_log_mel_data(it, mel, frame_spec), basis) for _, it in items])
    labels = np.array([speakers.index(spk) for spk, _ in items])
    loc = feats.mean(axis=0)
    # features that never move in training (bands pinned at the gate) would otherwise get a huge gain
    spread = feats.std(axis=0)
    scale = np.maximum(spread, SCALE_FLOOR * max(float(np.mean(spread)), 1e-12))
    standardise = Layer(diffnet.AFFINE, np.diag(1.0 / scale), -loc / scale)
    rng = np.random.default_rng(np.random.SeedSequence([seed, VARIANTS.index(variant)]))
    emb_dim = EMBED_DIMS[variant]
    trunk = diffnet.mlp([feats.shape[1], HIDDEN, emb_dim], rng, final=(diffnet.TANH,))
    head = [diffnet.affine(emb_dim, len(speakers), rng), Layer(diffnet.LOGSOFTMAX)]
    classifier = Network([standardise, *trunk.layers, *head])
    trained, curve = diffnet.train_classifier(classifier, feats, labels, epochs, lr, seed, frozen=(0,))
    n_trunk = 1 + len(trunk.layers)
    network = Network([*(l.copy() for l in trained.layers[:n_trunk]), Layer(diffnet.L2NORM)])
    model = SpeakerEncoderModel(encoder_id or variant, variant, network, speakers, mel, frame_spec, sample_rate)
    summary = {"loss_curve": curve, "train_accuracy": diffnet.accuracy(trained, feats, labels)}
    return model, summary


# ---------------------------------------------------------------- persistence

def save_speaker_encoder(model: SpeakerEncoderModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    diffnet.save_network(model.network, os.path.join(directory, "encoder.net"))
    meta = {
        "encoder_id": model.encoder_id,
        "variant": model.variant,
        "speakers": model.speakers,
        "mel": {"n_mels": model.mel.n_mels, "fmin": model.mel.fmin, "fmax": model.mel.fmax, "floor": model.mel.floor},
        "frame_spec": {"n_fft": model.frame_spec.n_fft, "hop": model.frame_spec.hop, "window": model.frame_spec.window},
        "sample_rate": model.sample_rate,
    }
    with open(os.path.join(directory, "encoder.manifest"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_speaker_encoder(directory) -> SpeakerEncoderModel:
    path = os.path.join(directory, "encoder.manifest")
    if not os.path.exists(path):
        raise MissingArtifactError(f"encoder manifest not found: {path}")
    with open(path) as fh:
        meta = json.load(fh)
    return SpeakerEncoderModel(
        meta["encoder_id"],
        meta["variant"],
        diffnet.load_network(os.path.join(directory, "encoder.net")),
        meta["speakers"],
        MelConfig(**meta["mel"]),
        FrameSpec(**meta["frame_spec"]),
        meta["sample_rate"],
    )


def save_profiles(profiles: dict, path) -> None:
    with open(path, "w") as fh:
        for spk in sorted(profiles):
            p = profiles[spk]
            rec = {"speaker": p.speaker_id, "encoder": p.encoder_id, "count": p.count, "vector": [float(v) for v in p.vector]}
            fh.write(json.dumps(rec) + "\n")


def load_profiles(path) -> dict:
    if not os.path.exists(path):
        raise MissingArtifactError(f"profile file not found: {path}")
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out[r["speaker"]] = SpeakerProfile(r["speaker"], np.array(r["vector"]), r["count"], r["encoder"])
    return out


def save_verifier(config: VerifierConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump({"encoder_id": config.encoder_id, "threshold": config.threshold, "eer": config.eer}, fh, indent=1)
        fh.write("\n")


def load_verifier(path) -> VerifierConfig:
    if not os.path.exists(path):
        raise MissingArtifactError(f"verifier config not found: {path}")
    with open(path) as fh:
        return VerifierConfig(**json.load(fh))

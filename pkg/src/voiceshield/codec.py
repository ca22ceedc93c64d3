"""Linear log-mel autoencoder standing in for a neural audio codec.

Analysis: log-mel frames, shifted so the log floor maps to the origin, are
projected onto the top ``d`` right singular vectors of the training frames.
Synthesis: a ridge least-squares linear map back to log-mel, offset by the
log floor so the origin decodes to silence, optionally preceded by residual
refinement networks. The waveform is recovered once at
the end through the filterbank pseudo-inverse and Griffin-Lim; loss gradients
stop at the mel frames.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffnet
from .diffnet import Layer, Network
from .errors import MissingArtifactError, PreconditionError, ShapeError
from .signal import (
    DEFAULT_SAMPLE_RATE,
    FrameSpec,
    MelConfig,
    MelFrames,
    Waveform,
    griffin_lim,
    mel_to_magnitude,
    stft,
    waveform_log_mel,
)


@dataclass(frozen=True, eq=False)
class EmbeddingSeq:
    data: np.ndarray  # frames x d
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] < 1:
            raise ShapeError(f"embedding sequence must be frames x d, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise PreconditionError("embedding sequence contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data) -> "EmbeddingSeq":
        return EmbeddingSeq(data, self.frame_spec, self.sample_rate)


@dataclass
class CodecModel:
    analysis: Network  # affine n_mels -> d
    synthesis: Network  # affine d -> n_mels
    refinement: list = field(default_factory=list)  # residual networks d -> d
    mel: MelConfig = field(default_factory=MelConfig)
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    gl_iters: int = 60

    def __post_init__(self):
        if self.analysis.input_dim != self.mel.n_mels or self.synthesis.output_dim != self.mel.n_mels:
            raise ShapeError("codec analysis/synthesis do not match n_mels")
        if self.analysis.output_dim != self.synthesis.input_dim:
            raise ShapeError("codec analysis output does not match synthesis input")
        for net in self.refinement:
            if net.input_dim != self.dim or net.output_dim != self.dim:
                raise ShapeError("refinement stages must preserve the embedding dimension")

    @property
    def dim(self) -> int:
        return self.analysis.output_dim

    def same_parameters(self, other: "CodecModel") -> bool:
        nets = [self.analysis, self.synthesis, *self.refinement]
        others = [other.analysis, other.synthesis, *other.refinement]
        return len(nets) == len(others) and all(a.same_parameters(b) for a, b in zip(nets, others))


def _as_log_mel(item, mel, spec):
    if isinstance(item, MelFrames):
        return item.data
    return waveform_log_mel(item, spec, mel).data


def fit_codec(
    corpus,
    d: int = 32,
    seed: int = 0,
    ridge: float = 1e-4,
    mel: MelConfig = MelConfig(),
    frame_spec: FrameSpec = FrameSpec(),
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    gl_iters: int = 60,
    refinement_stages: int = 0,
    refinement_hidden: int = 32,
    refinement_epochs: int = 200,
    max_frames: int = 40000,
) -> CodecModel:
    """Fit the analysis basis and the ridge-regularised synthesis map on ``corpus`` (waveforms or mel frames).

    ``ridge`` is relative to the mean embedding energy per dimension.
    """
    items = list(corpus)
    if not items:
        raise PreconditionError("cannot fit a codec on an empty corpus")
    if not 1 <= d <= mel.n_mels:
        raise PreconditionError(f"embedding dimension {d} outside [1, {mel.n_mels}]")
    rng = np.random.default_rng(seed)
    x = np.concatenate([_as_log_mel(it, mel, frame_spec) for it in items], axis=0)
    if x.shape[0] > max_frames:
        x = x[np.sort(rng.choice(x.shape[0], max_frames, replace=False))]
    z = x - mel.log_floor
    _, _, vt = np.linalg.svd(z, full_matrices=False)
    basis = vt[:d].T
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(d)])
    basis = basis * signs
    analysis = Network([Layer(diffnet.AFFINE, basis, -mel.log_floor * basis.sum(axis=0))]).rounded()
    e = analysis(x)
    refinement = []
    for k in range(refinement_stages):
        net = diffnet.mlp([d, refinement_hidden, d], np.random.default_rng([seed, k]))
        net.layers[-1].weight[:] = 0.0
        refinement.append(net)
    synthesis = _fit_synthesis(e, x, ridge, mel.log_floor)
    if refinement:
        refinement, synthesis = _train_refinement(refinement, synthesis, e, x, ridge, refinement_epochs, mel.log_floor)
    return CodecModel(analysis, synthesis, refinement, mel, frame_spec, sample_rate, gl_iters)


def _fit_synthesis(e, x, ridge, log_floor):
    # no free intercept: the origin decodes to the log floor (silence)
    gram = e.T @ e
    if ridge > 0:
        gram = gram + ridge * np.trace(gram) / e.shape[1] * np.eye(e.shape[1])
    weight = np.linalg.solve(gram, e.T @ (x - log_floor))
    return Network([Layer(diffnet.AFFINE, weight, np.full(x.shape[1], log_floor))]).rounded()


def _refine_forward(stages, e):
    tapes = []
    for net in stages:
        tape = diffnet.forward(net, e)
        tapes.append(tape)
        e = e + tape.output
    return e, tapes


def _refine_backward(stages, tapes, g):
    grads = []
    for net, tape in zip(reversed(stages), reversed(tapes)):
        rec = diffnet.backward(net, tape, g)
        grads.append(rec)
        g = g + rec.input
    return g, grads[::-1]


def _train_refinement(stages, synthesis, e, x, ridge, epochs, log_floor, lr=1e-3):
    # alternate: gradient steps on the residual stages, exact refit of the affine synthesis
    stages = [s.copy() for s in stages]
    n = e.shape[0]
    for _ in range(epochs):
        r, tapes = _refine_forward(stages, e)
        err = synthesis(r) - x
        g = 2.0 * err @ synthesis.layers[0].weight.T / n
        _, grads = _refine_backward(stages, tapes, g)
        for net, rec in zip(stages, grads):
            for i, pg in rec.params.items():
                net.layers[i].weight -= lr * pg["weight"]
                net.layers[i].bias -= lr * pg["bias"]
    stages = [s.rounded() for s in stages]
    r, _ = _refine_forward(stages, e)
    return stages, _fit_synthesis(r, x, ridge, log_floor)


def encode(model: CodecModel, waveform: Waveform) -> EmbeddingSeq:
    if len(waveform) < model.frame_spec.n_fft:
        raise PreconditionError(f"waveform shorter than one frame ({model.frame_spec.n_fft} samples)")
    mel = waveform_log_mel(waveform, model.frame_spec, model.mel)
    return EmbeddingSeq(model.analysis(mel.data), model.frame_spec, waveform.sample_rate)


def encode_mel(model: CodecModel, mel: MelFrames) -> EmbeddingSeq:
    return EmbeddingSeq(model.analysis(mel.data), mel.frame_spec, mel.sample_rate)


def _check(model, emb):
    data = emb.data if isinstance(emb, EmbeddingSeq) else np.asarray(emb, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ShapeError(f"embedding shape {data.shape} does not match codec dimension {model.dim}")
    return data


def decode_features(model: CodecModel, emb) -> MelFrames:
    data = _check(model, emb)
    r, _ = _refine_forward(model.refinement, data)
    return MelFrames(model.synthesis(r), model.mel, model.frame_spec, model.sample_rate)


def decode_features_vjp(model: CodecModel, emb):
    """Return decoded mel frames and a function mapping d loss / d mel to d loss / d embedding."""
    data = _check(model, emb)
    r, tapes = _refine_forward(model.refinement, data)
    syn_tape = diffnet.forward(model.synthesis, r)

    def pullback(g_mel):
        g = diffnet.backward(model.synthesis, syn_tape, g_mel).input
        g, _ = _refine_backward(model.refinement, tapes, g)
        return g

    return MelFrames(syn_tape.output, model.mel, model.frame_spec, model.sample_rate), pullback


def mel_to_waveform(model: CodecModel, mel: MelFrames, seed: int = 0) -> Waveform:
    mag = mel_to_magnitude(mel)
    return griffin_lim(mag, model.frame_spec, model.gl_iters, model.sample_rate, seed=seed)


def decode(model: CodecModel, emb) -> Waveform:
    return mel_to_waveform(model, decode_features(model, emb))


def magnitude_cosine(a: Waveform, b: Waveform, spec: FrameSpec = FrameSpec()) -> float:
    """Cosine similarity of the two magnitude spectrograms, trimmed to the shorter one."""
    ma, mb = stft(a, spec).magnitude, stft(b, spec).magnitude
    n = min(ma.shape[0], mb.shape[0])
    ma, mb = ma[:n].ravel(), mb[:n].ravel()
    den = np.linalg.norm(ma) * np.linalg.norm(mb)
    return float(ma @ mb / den) if den > 0 else 0.0


# ---------------------------------------------------------------- persistence

def save_codec(model: CodecModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    diffnet.save_network(model.analysis, os.path.join(directory, "analysis.net"))
    diffnet.save_network(model.synthesis, os.path.join(directory, "synthesis.net"))
    for i, net in enumerate(model.refinement):
        diffnet.save_network(net, os.path.join(directory, f"refine{i}.net"))
    meta = {
        "d": model.dim,
        "mel": {"n_mels": model.mel.n_mels, "fmin": model.mel.fmin, "fmax": model.mel.fmax, "floor": model.mel.floor},
        "frame_spec": {"n_fft": model.frame_spec.n_fft, "hop": model.frame_spec.hop, "window": model.frame_spec.window},
        "sample_rate": model.sample_rate,
        "gl_iters": model.gl_iters,
        "refinement_stages": len(model.refinement),
    }
    with open(os.path.join(directory, "codec.manifest"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_codec(directory) -> CodecModel:
    path = os.path.join(directory, "codec.manifest")
    if not os.path.exists(path):
        raise MissingArtifactError(f"codec manifest not found: {path}")
    with open(path) as fh:
        meta = json.load(fh)
    refinement = [diffnet.load_network(os.path.join(directory, f"refine{i}.net")) for i in range(meta["refinement_stages"])]
    return CodecModel(
        diffnet.load_network(os.path.join(directory, "analysis.net")),
        diffnet.load_network(os.path.join(directory, "synthesis.net")),
        refinement,
        MelConfig(**meta["mel"]),
        FrameSpec(**meta["frame_spec"]),
        meta["sample_rate"],
        meta["gl_iters"],
    )

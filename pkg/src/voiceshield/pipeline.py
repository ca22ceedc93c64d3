"""Artifact bundle: training everything the campaign needs, and its on-disk layout.

Layout under a model directory::

    codec/                 analysis.net, synthesis.net, codec.manifest
    encoders/<id>/         encoder.net, encoder.manifest, profiles.jsonl, verifier.json
    synth/<id>/            synth.net, synth.manifest
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .attack import load_toy_synth, save_toy_synth, train_toy_synth
from .codec import CodecModel, fit_codec, load_codec, save_codec
from .corpus import Manifest
from .errors import MissingArtifactError, PreconditionError
from .signal import read_wav
from .speaker import (
    VARIANTS,
    VerifierConfig,
    calibrate_threshold,
    enroll,
    load_profiles,
    load_speaker_encoder,
    load_verifier,
    save_profiles,
    save_speaker_encoder,
    save_verifier,
    train_speaker_encoder,
)

ENROLL_SPLIT = "train"
VICTIM_SPLIT = "victim"
HELDOUT_SPLIT = "test"


@dataclass
class Artifacts:
    codec: CodecModel
    encoders: dict = field(default_factory=dict)  # encoder id -> SpeakerEncoderModel
    profiles: dict = field(default_factory=dict)  # encoder id -> {speaker: SpeakerProfile}
    verifiers: dict = field(default_factory=dict)  # encoder id -> VerifierConfig
    synths: dict = field(default_factory=dict)  # encoder id -> ToySynthModel

    @property
    def encoder_ids(self) -> list:
        return list(self.encoders)

    def check(self) -> None:
        for eid in self.encoders:
            for table, name in ((self.profiles, "profiles"), (self.verifiers, "verifier"), (self.synths, "synthesizer")):
                if eid not in table:
                    raise MissingArtifactError(f"no {name} for encoder {eid!r}")
            if self.verifiers[eid].encoder_id != eid or self.synths[eid].encoder_id != eid:
                raise PreconditionError(f"verifier or synthesizer for {eid!r} was built on a different encoder")


class WaveCache:
    """Reads each manifest record once."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache = {}

    def __call__(self, record):
        if record.id not in self._cache:
            self._cache[record.id] = read_wav(self.manifest.resolve(record))
        return self._cache[record.id]


def heldout_trials(manifest: Manifest, waves, speakers) -> list:
    """Every held-out utterance scored against every enrolled speaker."""
    return [(spk, waves(r), r.speaker == spk) for r in manifest.select(split=HELDOUT_SPLIT) for spk in speakers]


def train_artifacts(manifest: Manifest, variants=VARIANTS, seed: int = 0, codec_dim: int = 32, codec_ridge: float = 1e-4,
                    refinement_stages: int = 0, gl_iters: int = 60, epochs: int = 400, lr: float = 0.05,
                    waves=None) -> tuple[Artifacts, dict]:
    """Fit the codec on the enrollment split, then per encoder variant: train, enroll, calibrate, fit the synthesizer."""
    waves = waves or WaveCache(manifest)
    enroll_recs = manifest.select(split=ENROLL_SPLIT)
    if not enroll_recs:
        raise PreconditionError("manifest has no enrollment split; run split() first")
    pairs = [(r.speaker, waves(r)) for r in enroll_recs]
    codec = fit_codec([w for _, w in pairs], d=codec_dim, seed=seed, ridge=codec_ridge,
                      refinement_stages=refinement_stages, gl_iters=gl_iters)
    art = Artifacts(codec)
    summary = {}
    for variant in variants:
        enc, info = train_speaker_encoder(pairs, variant, seed=seed, epochs=epochs, lr=lr)
        profiles = {spk: enroll(enc, [w for s, w in pairs if s == spk], spk) for spk in enc.speakers}
        verifier = calibrate_threshold(enc, profiles, heldout_trials(manifest, waves, enc.speakers))
        art.encoders[enc.encoder_id] = enc
        art.profiles[enc.encoder_id] = profiles
        art.verifiers[enc.encoder_id] = verifier
        art.synths[enc.encoder_id] = train_toy_synth(pairs, enc, seed=seed, gl_iters=gl_iters)
        summary[enc.encoder_id] = {
            "train_accuracy": info["train_accuracy"],
            "final_loss": info["loss_curve"][-1],
            "threshold": verifier.threshold,
            "eer": verifier.eer,
        }
    return art, summary


def recalibrate(art: Artifacts, manifest: Manifest, waves=None) -> dict:
    """Re-derive every verifier threshold from held-out trials; returns the new configs."""
    waves = waves or WaveCache(manifest)
    for eid, enc in art.encoders.items():
        art.verifiers[eid] = calibrate_threshold(enc, art.profiles[eid], heldout_trials(manifest, waves, enc.speakers))
    return dict(art.verifiers)


def save_artifacts(art: Artifacts, model_dir) -> None:
    save_codec(art.codec, os.path.join(model_dir, "codec"))
    for eid, enc in art.encoders.items():
        d = os.path.join(model_dir, "encoders", eid)
        save_speaker_encoder(enc, d)
        save_profiles(art.profiles[eid], os.path.join(d, "profiles.jsonl"))
        save_verifier(art.verifiers[eid], os.path.join(d, "verifier.json"))
        save_toy_synth(art.synths[eid], os.path.join(model_dir, "synth", eid))


def save_verifiers(art: Artifacts, model_dir) -> None:
    for eid, cfg in art.verifiers.items():
        save_verifier(cfg, os.path.join(model_dir, "encoders", eid, "verifier.json"))


def load_artifacts(model_dir) -> Artifacts:
    if not os.path.isdir(model_dir):
        raise MissingArtifactError(f"model directory not found: {model_dir}")
    art = Artifacts(load_codec(os.path.join(model_dir, "codec")))
    enc_root = os.path.join(model_dir, "encoders")
    if not os.path.isdir(enc_root):
        raise MissingArtifactError(f"no encoders under {model_dir}")
    for eid in sorted(os.listdir(enc_root)):
        d = os.path.join(enc_root, eid)
        enc = load_speaker_encoder(d)
        art.encoders[enc.encoder_id] = enc
        art.profiles[enc.encoder_id] = load_profiles(os.path.join(d, "profiles.jsonl"))
        art.verifiers[enc.encoder_id] = load_verifier(os.path.join(d, "verifier.json"))
        art.synths[enc.encoder_id] = load_toy_synth(os.path.join(model_dir, "synth", eid))
    art.check()
    return art


def verifier_for(art: Artifacts, encoder_id: str) -> VerifierConfig:
    if encoder_id not in art.verifiers:
        raise MissingArtifactError(f"no verifier for encoder {encoder_id!r}; known: {sorted(art.verifiers)}")
    return art.verifiers[encoder_id]

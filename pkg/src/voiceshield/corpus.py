"""Synthetic multi-speaker corpus, WAV directory ingestion, manifests and splits."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, MalformedHeaderError, PreconditionError, WavError
from .signal import DEFAULT_SAMPLE_RATE, Waveform, probe_wav, write_wav

ROLES = ("enroll", "victim", "attacker-content", "eval")
SPLIT_NAMES = ("train", "victim", "test")
SPLIT_ROLES = {"train": "enroll", "victim": "victim", "test": "attacker-content"}

TARGET_RMS = 0.1
NOISE_RMS = 3e-4


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: str
    f0: float
    formants: tuple
    bandwidths: tuple
    tilt_db: float
    jitter: float

    def __post_init__(self):
        if not 70.0 <= self.f0 <= 400.0:
            raise PreconditionError(f"f0 {self.f0} outside [70, 400] Hz")
        f = self.formants
        if len(f) != 3 or len(self.bandwidths) != 3 or not (f[0] < f[1] < f[2]):
            raise PreconditionError(f"formants must be 3 strictly increasing values, got {f}")
        if not 0.0 <= self.jitter <= 0.05:
            raise PreconditionError(f"jitter {self.jitter} outside [0, 0.05]")


@dataclass(frozen=True)
class Record:
    id: str
    speaker: str
    path: str
    duration: float
    split: str = ""
    role: str = ""


class Manifest:
    """Ordered utterance records; relative paths resolve against ``root``."""

    def __init__(self, records, root=".", skipped=()):
        self.records = list(records)
        self.root = os.fspath(root)
        self.skipped = list(skipped)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record: Record) -> str:
        return record.path if os.path.isabs(record.path) else os.path.join(self.root, record.path)

    @property
    def speakers(self) -> list:
        return sorted({r.speaker for r in self.records})

    def by_speaker(self, split=None, role=None) -> dict:
        out = {}
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if role is not None and r.role != role:
                continue
            out.setdefault(r.speaker, []).append(r)
        return out

    def select(self, split=None, role=None) -> list:
        return [r for r in self.records if (split is None or r.split == split) and (role is None or r.role == role)]

    def get(self, utt_id: str) -> Record:
        for r in self.records:
            if r.id == utt_id:
                return r
        raise KeyError(utt_id)

    def validate(self, check_paths: bool = True) -> None:
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise PreconditionError(f"duplicate utterance id {r.id!r}")
            seen.add(r.id)
            if not r.duration > 0:
                raise PreconditionError(f"non-positive duration for {r.id!r}")
            if r.role and r.role not in ROLES:
                raise PreconditionError(f"unknown role {r.role!r} for {r.id!r}")
            if check_paths and not os.path.exists(self.resolve(r)):
                raise PreconditionError(f"dangling path for {r.id!r}: {self.resolve(r)}")

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        records = []
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(Record(**json.loads(line)))
                except (TypeError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"{path}:{n}: bad manifest record ({exc})") from exc
        m = cls(records, root=os.path.dirname(os.path.abspath(path)))
        m.validate()
        return m


# ---------------------------------------------------------------- synthesis

def random_speaker(speaker_id: str, rng: np.random.Generator) -> SpeakerSpec:
    f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(260.0))))
    f1 = rng.uniform(300.0, 850.0)
    f2 = rng.uniform(max(f1 + 400.0, 1000.0), 2400.0)
    f3 = rng.uniform(max(f2 + 400.0, 2300.0), 3600.0)
    bw = (rng.uniform(60, 120), rng.uniform(80, 160), rng.uniform(120, 250))
    return SpeakerSpec(
        speaker_id,
        f0,
        (float(f1), float(f2), float(f3)),
        tuple(float(b) for b in bw),
        float(rng.uniform(-12.0, -3.0)),
        float(rng.uniform(0.005, 0.03)),
    )


def spectral_envelope(freqs, formants, bandwidths, tilt_db):
    """Cascade of second-order resonator magnitudes times a power-law tilt."""
    f = np.maximum(np.asarray(freqs, dtype=np.float64), 1.0)
    env = 10.0 ** (tilt_db / 20.0 * np.log2(f / 100.0))
    for fc, bw in zip(formants, bandwidths):
        env = env * fc**2 / np.sqrt((fc**2 - f**2) ** 2 + (bw * f) ** 2)
    return env


def _smooth_noise(rng, n, sample_rate, cutoff_hz):
    step = max(1, int(sample_rate / cutoff_hz))
    knots = rng.standard_normal(n // step + 2)
    return np.interp(np.arange(n) / step, np.arange(knots.shape[0]), knots)


def synthesize_utterance(spec: SpeakerSpec, duration_s: float, rng: np.random.Generator, sample_rate=DEFAULT_SAMPLE_RATE):
    """Voiced syllables (jittered harmonic source through formant resonators) separated by pauses."""
    n_total = int(round(duration_s * sample_rate))
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.05, 0.15) * sample_rate)
    nyq = 0.48 * sample_rate
    while pos < n_total - int(0.1 * sample_rate):
        n = min(int(rng.uniform(0.22, 0.5) * sample_rate), n_total - pos)
        t = np.arange(n) / sample_rate
        # vowel-like variation of the formant pattern around the speaker's own
        shift = np.clip(1.0 + 0.07 * rng.standard_normal(3), 0.85, 1.15)
        formants = np.sort(np.asarray(spec.formants) * shift)
        contour = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t + rng.uniform(0, 2 * np.pi))
        contour *= 1.0 - rng.uniform(0.0, 0.1) * t / max(t[-1], 1e-9)
        f0 = spec.f0 * contour * (1.0 + spec.jitter * _smooth_noise(rng, n, sample_rate, 40.0))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        n_harm = int(nyq / f0.max())
        h = np.arange(1, n_harm + 1)[:, None]
        amps = spectral_envelope(h * f0[None, :], formants, spec.bandwidths, spec.tilt_db)
        voiced = np.sum(amps * np.sin(h * phase[None, :] + rng.uniform(0, 2 * np.pi, (n_harm, 1))), axis=0)
        ramp = min(int(0.04 * sample_rate), n // 2)
        env = np.ones(n)
        if ramp > 0:
            win = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            env[:ramp] = win
            env[n - ramp :] = win[::-1]
        seg = voiced * env * rng.uniform(0.6, 1.0)
        out[pos : pos + n] += seg
        pos += n + int(rng.uniform(0.05, 0.15) * sample_rate)
    active = out[np.abs(out) > 0]
    rms = np.sqrt(np.mean(active**2)) if active.size else 1.0
    out = out * (TARGET_RMS / rms)
    out += NOISE_RMS * rng.standard_normal(n_total)
    peak = np.abs(out).max()
    if peak > 0.95:
        out *= 0.95 / peak
    return Waveform(out, sample_rate)


def speaker_specs(seed: int, n_speakers: int) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    return [random_speaker(f"spk{i:02d}", rng) for i in range(n_speakers)]


def generate_corpus(out_dir, seed: int = 0, n_speakers: int = 16, utts_per_speaker: int = 10, duration_s: float = 3.0,
                    sample_rate: int = DEFAULT_SAMPLE_RATE) -> Manifest:
    """Write ``n_speakers * utts_per_speaker`` WAV files plus ``manifest.jsonl`` into ``out_dir``."""
    if n_speakers < 2 or utts_per_speaker < 1 or duration_s <= 0:
        raise PreconditionError("need n_speakers >= 2, utts_per_speaker >= 1 and positive duration")
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    records = []
    for si, spec in enumerate(speaker_specs(seed, n_speakers)):
        for ui in range(utts_per_speaker):
            rng = np.random.default_rng(np.random.SeedSequence([seed, si, ui]))
            wav = synthesize_utterance(spec, duration_s, rng, sample_rate)
            uid = f"{spec.speaker_id}_u{ui:02d}"
            rel = os.path.join("wav", uid + ".wav")
            write_wav(os.path.join(out_dir, rel), wav)
            records.append(Record(uid, spec.speaker_id, rel, len(wav) / sample_rate))
    manifest = Manifest(records, root=out_dir)
    manifest.save(os.path.join(out_dir, "manifest.jsonl"))
    with open(os.path.join(out_dir, "speakers.jsonl"), "w") as fh:
        for spec in speaker_specs(seed, n_speakers):
            fh.write(json.dumps(asdict(spec)) + "\n")
    return manifest


# ---------------------------------------------------------------- ingestion

def _speaker_from_path(path, rule):
    if rule == "parent":
        return os.path.basename(os.path.dirname(path))
    if rule == "prefix":
        stem = os.path.splitext(os.path.basename(path))[0]
        for sep in ("_", "-"):
            if sep in stem:
                return stem.split(sep, 1)[0]
        return stem
    raise ConfigError(f"unknown speaker-id rule {rule!r} (expected 'parent' or 'prefix')")


def ingest_directory(path, speaker_rule: str = "parent") -> Manifest:
    """Build a manifest for every readable WAV below ``path``; everything else lands in ``skipped``."""
    if not os.path.isdir(path):
        raise PreconditionError(f"unreadable directory: {path}")
    _speaker_from_path("x/y.wav", speaker_rule)
    records, skipped = [], []
    for dirpath, dirnames, filenames in os.walk(path):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            if not name.lower().endswith(".wav"):
                skipped.append((full, "not a WAV file"))
                continue
            try:
                rate, _, n = probe_wav(full)
            except (WavError, MalformedHeaderError, OSError) as exc:
                skipped.append((full, str(exc)))
                continue
            if n == 0:
                skipped.append((full, "empty audio"))
                continue
            rel = os.path.relpath(full, path)
            uid = os.path.splitext(rel)[0].replace(os.sep, "/")
            records.append(Record(uid, _speaker_from_path(full, speaker_rule), rel, n / rate))
    if skipped:
        warnings.warn(f"skipped {len(skipped)} files while ingesting {path}", stacklevel=2)
    if not records:
        raise PreconditionError(f"no usable WAV files in {path}")
    return Manifest(records, root=path, skipped=skipped)


# ---------------------------------------------------------------- splits

def _split_counts(n, ratios):
    raw = np.asarray(ratios) * n
    counts = np.floor(raw + 1e-9).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def split(manifest: Manifest, ratios=(0.5, 0.2, 0.3), seed: int = 0, names=SPLIT_NAMES) -> Manifest:
    """Assign split and role tags per speaker with a seeded shuffle; every speaker lands in every split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(names) or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise PreconditionError(f"ratios must be {len(names)} positive values summing to 1, got {ratios}")
    out = {}
    for si, (spk, recs) in enumerate(sorted(manifest.by_speaker().items())):
        counts = _split_counts(len(recs), ratios)
        if counts.min() < 1:
            raise PreconditionError(f"speaker {spk!r} has {len(recs)} utterances, too few for a {len(names)}-way split")
        rng = np.random.default_rng(np.random.SeedSequence([seed, si]))
        order = rng.permutation(len(recs))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k, name in enumerate(names):
            for j in order[bounds[k] : bounds[k + 1]]:
                r = recs[j]
                out[r.id] = replace(r, split=name, role=SPLIT_ROLES.get(name, "eval"))
    return Manifest([out[r.id] for r in manifest.records], root=manifest.root, skipped=manifest.skipped)

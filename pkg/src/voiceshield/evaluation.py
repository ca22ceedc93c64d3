"""Metrics, the protect -> enhance -> synthesize -> verify campaign, and report files."""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attack import METHODS, EnhanceConfig, enhance, removal_efficacy, synthesize_vc
from .corpus import Manifest
from .defense import (
    DefenseResult,
    derive_config,
    embedding_rms,
    magnitude_rms,
    pgd_protect,
    select_target,
    signal_level_protect,
    write_trace,
)
from .errors import IntegrityError, PreconditionError, TooShortError
from .pipeline import ENROLL_SPLIT, HELDOUT_SPLIT, VICTIM_SPLIT, Artifacts, WaveCache
from .signal import FrameSpec, Waveform, stft
from .speaker import embed_speaker, verify

RAW = "raw"
EMBEDDING_LEVEL = "embedding-level"
SIGNAL_LEVEL = "signal-level"
DEFENSES = (RAW, EMBEDDING_LEVEL, SIGNAL_LEVEL)
NO_ENHANCEMENT = "none"
ENHANCEMENTS = (NO_ENHANCEMENT,) + METHODS
MATCHED = "matched"  # protect against the verifier's own encoder
NO_PROTECTION = "-"

SNR_CAP_DB = 120.0
LSD_FLOOR = 1e-8


# ---------------------------------------------------------------- metrics

def dsr(outcomes) -> float:
    """Percentage of trials whose synthesis the verifier rejected."""
    outcomes = list(outcomes)
    if not outcomes:
        raise PreconditionError("DSR of an empty cell")
    rejects = sum(1 for o in outcomes if not o.accept)
    return 100.0 * rejects / len(outcomes)


def _trimmed(reference: Waveform, test: Waveform):
    n = min(len(reference), len(test))
    return reference.samples[:n], test.samples[:n]


def waveform_snr(reference: Waveform, test: Waveform) -> float:
    """``10 log10(|ref|^2 / |ref - test|^2)`` over the common length, capped at 120 dB."""
    r, t = _trimmed(reference, test)
    sig = float(np.dot(r, r))
    if sig == 0:
        raise PreconditionError("reference is silent")
    noise = float(np.dot(r - t, r - t))
    if noise == 0:
        return SNR_CAP_DB
    return min(10.0 * math.log10(sig / noise), SNR_CAP_DB)


def log_spectral_distance(reference: Waveform, test: Waveform, frame_spec: FrameSpec = FrameSpec(),
                          floor: float = LSD_FLOOR) -> float:
    """RMS over frames and bins of the dB difference of floored STFT magnitudes."""
    r, t = _trimmed(reference, test)
    if r.shape[0] < frame_spec.n_fft:
        raise TooShortError(f"need at least {frame_spec.n_fft} samples for one frame")
    a = stft(Waveform(r, reference.sample_rate), frame_spec).magnitude
    b = stft(Waveform(t, test.sample_rate), frame_spec).magnitude
    d = 20.0 * (np.log10(np.maximum(b, floor)) - np.log10(np.maximum(a, floor)))
    return float(np.sqrt(np.mean(d * d)))


def dump_spectrogram(waveform: Waveform, path, frame_spec: FrameSpec = FrameSpec()) -> tuple[int, int]:
    """Write a binary PGM (P5): time left to right, frequency bottom to top, min-max scaled log magnitude.

    Returns ``(width, height)`` = ``(frames, bins)``.
    """
    if len(waveform) < frame_spec.n_fft:
        raise TooShortError(f"need at least {frame_spec.n_fft} samples for one frame")
    mag = stft(waveform, frame_spec).magnitude
    img = np.log(np.maximum(mag, LSD_FLOOR)).T[::-1]
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return width, height


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise PreconditionError(f"{path} is not a binary PGM")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise PreconditionError("only 8-bit PGM files are supported")
    return np.frombuffer(parts[4][: width * height], dtype=np.uint8).reshape(height, width)


# ---------------------------------------------------------------- outcomes

@dataclass(frozen=True)
class TrialOutcome:
    victim: str  # utterance id
    content: str  # attacker content utterance id
    defense: str
    protect: str  # encoder ids the protection optimised against, '+'-joined; '-' for raw
    enhancement: str
    verifier: str
    synth_encoder: str
    score: float
    accept: bool
    threshold: float
    snr_db: float  # audio the attacker obtained vs the original
    lsd_db: float
    removal_efficacy: float  # nan unless a protected sample was enhanced

    def __post_init__(self):
        if not -1.0 <= self.score <= 1.0:
            raise PreconditionError(f"score {self.score} outside [-1, 1]")
        if not math.isfinite(self.snr_db):
            raise PreconditionError("SNR must be finite")
        if self.defense not in DEFENSES or self.enhancement not in ENHANCEMENTS:
            raise PreconditionError(f"unknown defense/enhancement {self.defense!r}/{self.enhancement!r}")
        if self.accept != (self.score >= self.threshold):
            raise PreconditionError("verdict inconsistent with score and threshold")

    @property
    def cell(self) -> tuple:
        return (self.defense, self.protect, self.enhancement, self.verifier)


TRIAL_COLUMNS = tuple(f.name for f in fields(TrialOutcome))
CELL_COLUMNS = ("defense", "protect", "enhancement", "verifier")
SUMMARY_COLUMNS = CELL_COLUMNS + ("n", "dsr", "mean_score", "mean_snr_db", "mean_lsd_db", "mean_removal_efficacy")
PROTECTION_COLUMNS = ("victim", "defense", "protect", "target", "iterations", "reason", "l_identity", "tau_identity", "snr_db",
                      "reentries")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def aggregate(outcomes) -> list:
    """One summary dict per cell, cells in first-appearance order."""
    cells = {}
    for o in outcomes:
        cells.setdefault(o.cell, []).append(o)
    out = []
    for cell, rows in cells.items():
        out.append({
            **dict(zip(CELL_COLUMNS, cell)),
            "n": len(rows),
            "dsr": dsr(rows),
            "mean_score": _mean(o.score for o in rows),
            "mean_snr_db": _mean(o.snr_db for o in rows),
            "mean_lsd_db": _mean(o.lsd_db for o in rows),
            "mean_removal_efficacy": _mean(o.removal_efficacy for o in rows),
        })
    return out


def cell_dsr(report_or_rows, defense, enhancement, verifier, protect=None) -> float:
    rows = report_or_rows.outcomes if isinstance(report_or_rows, EvalReport) else report_or_rows
    sel = [o for o in rows if o.defense == defense and o.enhancement == enhancement and o.verifier == verifier
           and (protect is None or o.protect == protect or defense == RAW)]
    return dsr(sel)


@dataclass
class EvalReport:
    config: str  # verbatim configuration snapshot
    seed: int
    outcomes: list = field(default_factory=list)
    protections: list = field(default_factory=list)  # dicts keyed by PROTECTION_COLUMNS
    examples: dict = field(default_factory=dict)  # name -> Waveform, for spectrogram figures (not persisted)

    @property
    def aggregates(self) -> list:
        return aggregate(self.outcomes)


# ---------------------------------------------------------------- campaign

@dataclass(frozen=True)
class CampaignSpec:
    defenses: tuple = DEFENSES
    enhancements: tuple = ENHANCEMENTS
    verifiers: tuple | None = None  # None: every trained encoder
    protect: tuple = (MATCHED,)  # entries: MATCHED or tuples of encoder ids (an ensemble when > 1)
    max_victims: int | None = None
    seed: int = 0
    workers: int = 1
    defense_overrides: tuple = ()  # (field, value) pairs applied to both derived PerC-AL configs
    enhance: tuple = ()  # (field, value) pairs for EnhanceConfig besides the method
    trace_dir: str | None = None
    examples: int = 1  # victims whose waveforms are kept for figures

    def __post_init__(self):
        for d in self.defenses:
            if d not in DEFENSES:
                raise PreconditionError(f"unknown defense {d!r}")
        for e in self.enhancements:
            if e not in ENHANCEMENTS:
                raise PreconditionError(f"unknown enhancement {e!r}")
        if self.workers < 1:
            raise PreconditionError("workers must be >= 1")


def _setups(spec: CampaignSpec, verifiers) -> list:
    out = []
    for p in spec.protect:
        if p == MATCHED:
            out.extend((v,) for v in verifiers if (v,) not in out)
        else:
            t = tuple(p)
            if t not in out:
                out.append(t)
    return out


def _setup_name(setup) -> str:
    return "+".join(setup)


def _pairs_for(spec: CampaignSpec, setup, verifier) -> bool:
    # a matched-only campaign restricts each single-encoder setup to its own verifier
    if spec.protect == (MATCHED,):
        return setup == (verifier,)
    return True


class _Campaign:
    """Per-campaign state shared by all victim jobs (read-only once built)."""

    def __init__(self, art: Artifacts, manifest: Manifest, spec: CampaignSpec):
        art.check()
        self.art, self.manifest, self.spec = art, manifest, spec
        self.waves = WaveCache(manifest)
        self.verifiers = list(spec.verifiers or art.encoder_ids)
        for v in self.verifiers:
            if v not in art.encoders:
                raise PreconditionError(f"verifier {v!r} has no trained encoder")
        self.setups = _setups(spec, self.verifiers) if set(spec.defenses) - {RAW} else []
        for s in self.setups:
            for eid in s:
                if eid not in art.encoders:
                    raise PreconditionError(f"protection encoder {eid!r} is not trained")
        self.victims = manifest.select(split=VICTIM_SPLIT)
        if spec.max_victims is not None:
            self.victims = self.victims[: spec.max_victims]
        if not self.victims:
            raise PreconditionError("no victim utterances in the manifest")
        self.content_pool = manifest.select(split=HELDOUT_SPLIT)
        self.enhance_cfgs = {m: EnhanceConfig(m, **dict(spec.enhance)) for m in spec.enhancements if m != NO_ENHANCEMENT}
        enroll = [(r.speaker, self.waves(r)) for r in manifest.select(split=ENROLL_SPLIT)]
        overrides = dict(spec.defense_overrides)
        self.configs = {}
        if self.setups:
            e_rms = embedding_rms(art.codec, [w for _, w in enroll])
            m_rms = magnitude_rms([w for _, w in enroll], art.codec.frame_spec)
            for s in self.setups:
                encs = [art.encoders[e] for e in s]
                self.configs[s] = (derive_config(encs, enroll, e_rms, **overrides),
                                   derive_config(encs, enroll, m_rms, **overrides))

    def victim_seed(self, index) -> int:
        return int(np.random.SeedSequence([self.spec.seed, index]).generate_state(1)[0])

    def run_victim(self, index):
        art, spec = self.art, self.spec
        rec = self.victims[index]
        seed = self.victim_seed(index)
        rng = np.random.default_rng(seed)
        original = self.waves(rec)
        pool = [c for c in self.content_pool if c.speaker != rec.speaker]
        if not pool:
            raise PreconditionError(f"no attacker content from speakers other than {rec.speaker!r}")
        content_rec = pool[int(rng.integers(len(pool)))]
        content = self.waves(content_rec)

        samples = []  # (defense, setup or None, waveform)
        protections = []
        if RAW in spec.defenses:
            samples.append((RAW, None, original))
        for setup in self.setups:
            encs = [art.encoders[e] for e in setup]
            target_spk = select_target({e: art.profiles[e] for e in setup}, rec.speaker)
            target = {e: art.profiles[e][target_spk] for e in setup}
            cfg_e, cfg_s = self.configs[setup]
            for kind in (EMBEDDING_LEVEL, SIGNAL_LEVEL):
                if kind not in spec.defenses:
                    continue
                if kind == EMBEDDING_LEVEL:
                    res = pgd_protect(art.codec, encs, original, target, cfg_e, seed=seed)
                else:
                    res = signal_level_protect(encs, original, target, cfg_s, seed=seed, frame_spec=art.codec.frame_spec)
                samples.append((kind, setup, res.protected))
                cfg = cfg_e if kind == EMBEDDING_LEVEL else cfg_s
                protections.append(_protection_row(rec.id, kind, setup, target_spk, res, cfg.tau_identity))
                if spec.trace_dir:
                    os.makedirs(spec.trace_dir, exist_ok=True)
                    name = f"{rec.id}__{kind}__{_setup_name(setup)}.csv".replace("/", "_")
                    write_trace(res.trace, os.path.join(spec.trace_dir, name))

        outcomes = []
        examples = {}
        for defense, setup, sample in samples:
            for method in spec.enhancements:
                heard = sample if method == NO_ENHANCEMENT else enhance(sample, self.enhance_cfgs[method], art.codec.frame_spec)
                eff = math.nan
                if defense != RAW and method != NO_ENHANCEMENT:
                    eff = removal_efficacy(original, sample, heard, art.codec.frame_spec)
                snr = waveform_snr(original, heard)
                lsd = log_spectral_distance(original, heard, art.codec.frame_spec)
                if index < spec.examples and method == NO_ENHANCEMENT:
                    examples[f"{rec.id}:{defense}:{_setup_name(setup) if setup else NO_PROTECTION}"] = sample
                for v in self.verifiers:
                    if setup is not None and not _pairs_for(spec, setup, v):
                        continue
                    enc = art.encoders[v]
                    stolen = embed_speaker(enc, heard)
                    clone = synthesize_vc(art.synths[v], content, stolen, seed=seed)
                    decision = verify(art.profiles[v][rec.speaker], embed_speaker(enc, clone), art.verifiers[v])
                    outcomes.append(TrialOutcome(
                        rec.id, content_rec.id, defense, _setup_name(setup) if setup else NO_PROTECTION, method, v, v,
                        decision.score, decision.accept, art.verifiers[v].threshold, snr, lsd, eff,
                    ))
        return outcomes, protections, examples


def _protection_row(victim, kind, setup, target, res: DefenseResult, tau: float) -> dict:
    return {
        "victim": victim,
        "defense": kind,
        "protect": _setup_name(setup),
        "target": target,
        "iterations": res.iterations,
        "reason": res.reason,
        "l_identity": res.final.l_identity,
        "tau_identity": tau,
        "snr_db": res.final.snr_db,
        "reentries": res.reentries,
    }


_WORKER_CAMPAIGN = None


def _worker_init(campaign):
    global _WORKER_CAMPAIGN
    _WORKER_CAMPAIGN = campaign


def _worker_run(index):
    return _WORKER_CAMPAIGN.run_victim(index)


def run_campaign(art: Artifacts, manifest: Manifest, spec: CampaignSpec, config_text: str = "") -> EvalReport:
    """Run every victim through every selected cell; rows come back in victim order whatever the worker count."""
    campaign = _Campaign(art, manifest, spec)
    indices = range(len(campaign.victims))
    if spec.workers == 1 or len(campaign.victims) == 1:
        results = [campaign.run_victim(i) for i in indices]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(spec.workers, len(campaign.victims)), initializer=_worker_init, initargs=(campaign,)) as pool:
            results = pool.map(_worker_run, indices, chunksize=1)
    report = EvalReport(config_text, spec.seed)
    for outcomes, protections, examples in results:
        report.outcomes.extend(outcomes)
        report.protections.extend(protections)
        report.examples.update(examples)
    return report


# ---------------------------------------------------------------- report files

TRIALS_FILE = "trials.csv"
SUMMARY_FILE = "summary.csv"
PROTECTIONS_FILE = "protections.csv"
CONFIG_FILE = "config.txt"


def _write_table(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def emit_report(report: EvalReport, out_dir, figures: bool = True) -> list:
    """Write the trial, summary and protection tables plus the config snapshot; returns the paths written."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise PreconditionError(f"cannot create report directory {out_dir}: {exc}") from exc
    paths = []
    p = os.path.join(out_dir, TRIALS_FILE)
    _write_table(p, TRIAL_COLUMNS, [asdict(o) for o in report.outcomes])
    paths.append(p)
    p = os.path.join(out_dir, SUMMARY_FILE)
    _write_table(p, SUMMARY_COLUMNS, report.aggregates)
    paths.append(p)
    p = os.path.join(out_dir, PROTECTIONS_FILE)
    _write_table(p, PROTECTION_COLUMNS, report.protections)
    paths.append(p)
    p = os.path.join(out_dir, CONFIG_FILE)
    with open(p, "w") as fh:
        fh.write(f"# seed = {report.seed}\n")
        fh.write(report.config)
        if report.config and not report.config.endswith("\n"):
            fh.write("\n")
    paths.append(p)
    if figures:
        from . import plots

        paths.append(plots.plot_dsr(report.aggregates, os.path.join(out_dir, "dsr.png")))
        if report.examples:
            spec_dir = os.path.join(out_dir, "spectrograms")
            os.makedirs(spec_dir, exist_ok=True)
            for name, wav in sorted(report.examples.items()):
                fname = name.replace(":", "__").replace("/", "_").replace("+", "_") + ".pgm"
                dump_spectrogram(wav, os.path.join(spec_dir, fname))
                paths.append(os.path.join(spec_dir, fname))
            paths.append(plots.plot_spectrograms(report.examples, os.path.join(out_dir, "spectrograms.png")))
    return paths


def _parse_bool(s):
    if s not in ("0", "1"):
        raise IntegrityError(f"bad boolean field {s!r}")
    return s == "1"


def _read_table(path, columns):
    if not os.path.exists(path):
        raise IntegrityError(f"missing report table {path}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if tuple(header or ()) != tuple(columns):
            raise IntegrityError(f"{path}: unexpected header {header}")
        return [dict(zip(columns, row)) for row in r]


def load_report(out_dir) -> EvalReport:
    """Read a report back and check every aggregate against its recomputation from the trial rows."""
    rows = _read_table(os.path.join(out_dir, TRIALS_FILE), TRIAL_COLUMNS)
    outcomes = []
    for d in rows:
        try:
            outcomes.append(TrialOutcome(
                d["victim"], d["content"], d["defense"], d["protect"], d["enhancement"], d["verifier"],
                d["synth_encoder"], float(d["score"]), _parse_bool(d["accept"]), float(d["threshold"]),
                float(d["snr_db"]), float(d["lsd_db"]), float(d["removal_efficacy"]),
            ))
        except (ValueError, PreconditionError) as exc:
            raise IntegrityError(f"bad trial row {d}: {exc}") from exc
    stored = _read_table(os.path.join(out_dir, SUMMARY_FILE), SUMMARY_COLUMNS)
    recomputed = [{c: _fmt(v) for c, v in row.items()} for row in aggregate(outcomes)]
    if stored != recomputed:
        raise IntegrityError("summary table does not match the aggregates recomputed from the trial rows")
    protections = _read_table(os.path.join(out_dir, PROTECTIONS_FILE), PROTECTION_COLUMNS)
    config_path = os.path.join(out_dir, CONFIG_FILE)
    seed, config = 0, ""
    if os.path.exists(config_path):
        with open(config_path) as fh:
            text = fh.read()
        first, _, config = text.partition("\n")
        if first.startswith("# seed = "):
            seed = int(first.split("=", 1)[1])
        else:
            config = text
    return EvalReport(config, seed, outcomes, protections)

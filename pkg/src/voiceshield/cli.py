"""Command line: ``voiceshield <subcommand> [flags]``.

Every subcommand reads the run configuration (``--config``), lets flags
override it, prints the effective seed first, and exits 0 on success. Errors
print one line ``<category>: <message>`` to stderr and exit 2 (config),
3 (missing artifact or unreadable file) or 4 (runtime/numerical).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .attack import METHODS, EnhanceConfig, enhance, synthesize_vc
from .config import RunConfig, default_config, effective_workers, load_config
from .corpus import Manifest, generate_corpus, split
from .defense import derive_config, embedding_rms, magnitude_rms, pgd_protect, select_target, signal_level_protect, write_trace
from .errors import ConfigError, MissingArtifactError, VoiceShieldError
from .evaluation import CampaignSpec, emit_report, run_campaign
from .pipeline import ENROLL_SPLIT, WaveCache, load_artifacts, recalibrate, save_artifacts, save_verifiers, train_artifacts
from .signal import read_wav, write_wav
from .speaker import embed_speaker, verify

MANIFEST_NAME = "manifest.jsonl"
MODES = ("embedding", "signal")


# ---------------------------------------------------------------- shared helpers

def corpus_manifest(config: RunConfig) -> Manifest:
    """The corpus manifest with splits re-derived from the seed and ratios."""
    path = os.path.join(config["paths.corpus_dir"], MANIFEST_NAME)
    if not os.path.exists(path):
        raise MissingArtifactError(f"no corpus manifest at {path}; run gen-corpus first")
    return split(Manifest.load(path), config["corpus.split_ratios"], seed=config["run.seed"])


def defense_overrides(config: RunConfig) -> dict:
    """Explicit PerC-AL settings from the config; 'auto' entries stay corpus-derived."""
    d = config.section("defense")
    out = {"tau_snr_db": d["tau_snr_db"], "max_iters": d["max_iters"], "budget_rho": d["budget_rho"], "distance": d["distance"]}
    for key in ("tau_identity", "alpha", "epsilon_init"):
        if d[key] is not None:
            out[key] = d[key]
    return out


def enhance_config(config: RunConfig, method: str) -> EnhanceConfig:
    return EnhanceConfig(method, **config.section("enhance"))


def _encoders_arg(art, names):
    ids = list(names) if names else art.encoder_ids
    for eid in ids:
        if eid not in art.encoders:
            raise MissingArtifactError(f"no trained encoder {eid!r}; known: {art.encoder_ids}")
    return ids


def _closest_speaker(art, ids, wav):
    tables = [art.profiles[e] for e in ids]
    speakers = sorted(set.intersection(*(set(t) for t in tables)))
    embs = [embed_speaker(art.encoders[e], wav).vector for e in ids]
    return max(speakers, key=lambda s: (float(np.mean([t[s].vector @ v for t, v in zip(tables, embs)])), s))


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(config: RunConfig, args) -> int:
    out = config["paths.corpus_dir"]
    c = config.section("corpus")
    m = generate_corpus(out, seed=config["run.seed"], n_speakers=c["n_speakers"], utts_per_speaker=c["utts_per_speaker"],
                        duration_s=c["duration_s"])
    split(m, c["split_ratios"], seed=config["run.seed"])  # fail early if the split is impossible
    print(f"wrote {len(m.records)} utterances from {len(m.speakers)} speakers to {out}")
    return 0


def cmd_train(config: RunConfig, args) -> int:
    manifest = corpus_manifest(config)
    c, e = config.section("codec"), config.section("encoder")
    art, summary = train_artifacts(manifest, e["variants"], seed=config["run.seed"], codec_dim=c["dim"], codec_ridge=c["ridge"],
                                   refinement_stages=c["refinement_stages"], gl_iters=c["gl_iters"], epochs=e["epochs"],
                                   lr=e["lr"])
    save_artifacts(art, config["paths.model_dir"])
    for eid, s in summary.items():
        print(f"{eid}: train_accuracy={s['train_accuracy']!r} threshold={s['threshold']!r} eer={s['eer']!r}")
    print(f"models written to {config['paths.model_dir']}")
    return 0


def cmd_calibrate(config: RunConfig, args) -> int:
    art = load_artifacts(config["paths.model_dir"])
    for eid, cfg in recalibrate(art, corpus_manifest(config)).items():
        print(f"{eid}: threshold={cfg.threshold!r} eer={cfg.eer!r}")
    save_verifiers(art, config["paths.model_dir"])
    return 0


def cmd_protect(config: RunConfig, args) -> int:
    art = load_artifacts(config["paths.model_dir"])
    ids = _encoders_arg(art, args.encoders)
    wav = read_wav(args.input)
    victim = args.speaker or _closest_speaker(art, ids, wav)
    target_spk = args.target or select_target({e: art.profiles[e] for e in ids}, victim)
    for e in ids:
        if target_spk not in art.profiles[e]:
            raise MissingArtifactError(f"speaker {target_spk!r} is not enrolled for encoder {e!r}")
    target = {e: art.profiles[e][target_spk] for e in ids}
    encs = [art.encoders[e] for e in ids]
    manifest = corpus_manifest(config)
    waves = WaveCache(manifest)
    enroll = [(r.speaker, waves(r)) for r in manifest.select(split=ENROLL_SPLIT)]
    if args.mode == "embedding":
        scale = embedding_rms(art.codec, [w for _, w in enroll])
        cfg = derive_config(encs, enroll, scale, **defense_overrides(config))
        res = pgd_protect(art.codec, encs, wav, target, cfg, seed=config["run.seed"])
    else:
        scale = magnitude_rms([w for _, w in enroll], art.codec.frame_spec)
        cfg = derive_config(encs, enroll, scale, **defense_overrides(config))
        res = signal_level_protect(encs, wav, target, cfg, seed=config["run.seed"], frame_spec=art.codec.frame_spec)
    write_wav(args.output, res.protected)
    trace_dir = config["run.trace_dir"]
    stem = os.path.splitext(os.path.basename(args.output))[0]
    trace_path = os.path.join(trace_dir, stem + ".trace.csv") if trace_dir else os.path.splitext(args.output)[0] + ".trace.csv"
    if trace_dir:
        os.makedirs(trace_dir, exist_ok=True)
    write_trace(res.trace, trace_path)
    print(f"victim={victim} target={target_spk} encoders={'+'.join(ids)} mode={args.mode}")
    print(f"reason={res.reason} iterations={res.iterations} l_identity={res.final.l_identity!r} "
          f"tau_identity={cfg.tau_identity!r} snr_db={res.final.snr_db!r}")
    print(f"wrote {args.output} and {trace_path}")
    return 0


def cmd_enhance(config: RunConfig, args) -> int:
    wav = read_wav(args.input)
    out = enhance(wav, enhance_config(config, args.method))
    write_wav(args.output, out)
    print(f"wrote {args.output} ({args.method})")
    return 0


def _single_encoder(art, name):
    if name is None:
        name = art.encoder_ids[0]
    return _encoders_arg(art, [name])[0]


def cmd_synthesize(config: RunConfig, args) -> int:
    art = load_artifacts(config["paths.model_dir"])
    eid = _single_encoder(art, args.encoder)
    stolen = embed_speaker(art.encoders[eid], read_wav(args.stolen))
    clone = synthesize_vc(art.synths[eid], read_wav(args.content), stolen, seed=config["run.seed"])
    write_wav(args.output, clone)
    print(f"wrote {args.output} (synthesizer for {eid})")
    return 0


def cmd_verify(config: RunConfig, args) -> int:
    art = load_artifacts(config["paths.model_dir"])
    eid = _single_encoder(art, args.encoder)
    if args.profile not in art.profiles[eid]:
        raise MissingArtifactError(f"no enrolled profile {args.profile!r} for encoder {eid!r}")
    d = verify(art.profiles[eid][args.profile], embed_speaker(art.encoders[eid], read_wav(args.input)), art.verifiers[eid])
    print(f"{'accept' if d.accept else 'reject'} score={d.score!r} threshold={art.verifiers[eid].threshold!r} encoder={eid}")
    return 0


def campaign_spec(config: RunConfig, workers: int) -> CampaignSpec:
    c = config.section("campaign")
    enh = config.section("enhance")
    return CampaignSpec(
        defenses=c["defenses"],
        enhancements=c["enhancements"],
        verifiers=c["verifiers"],
        protect=c["protect"],
        max_victims=c["max_victims"],
        seed=config["run.seed"],
        workers=workers,
        defense_overrides=tuple(sorted(defense_overrides(config).items())),
        enhance=tuple(sorted(enh.items())),
        trace_dir=config["run.trace_dir"],
        examples=c["examples"],
    )


def cmd_evaluate(config: RunConfig, args) -> int:
    art = load_artifacts(config["paths.model_dir"])
    manifest = corpus_manifest(config)
    spec = campaign_spec(config, effective_workers(config))
    report = run_campaign(art, manifest, spec, config_text=config.dumps())
    paths = emit_report(report, config["paths.report_dir"], figures=config["campaign.figures"])
    for row in report.aggregates:
        print(f"{row['defense']:>15} {row['protect']:<22} {row['enhancement']:<17} verifier={row['verifier']:<11} "
              f"n={row['n']:<3} dsr={row['dsr']:6.2f}")
    print(f"wrote {len(paths)} files to {config['paths.report_dir']}")
    return 0


# ---------------------------------------------------------------- parser

COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "generate the seeded synthetic speaker corpus"),
    "train": (cmd_train, "fit the codec, speaker encoders, synthesizers and verifier thresholds"),
    "protect": (cmd_protect, "protect one utterance (embedding-level or signal-level)"),
    "enhance": (cmd_enhance, "run one enhancement method over a WAV file"),
    "synthesize": (cmd_synthesize, "clone a voice: content from one file, identity from another"),
    "verify": (cmd_verify, "score a WAV file against an enrolled speaker profile"),
    "evaluate": (cmd_evaluate, "run the protect/enhance/synthesize/verify campaign and write the report"),
    "calibrate": (cmd_calibrate, "re-derive verifier thresholds from held-out trials"),
}


def _common(p):
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="run configuration file (flat 'section.key = value' lines)")
    g.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    g.add_argument("--workers", type=int, help="campaign worker processes; 0 = one per CPU (overrides run.workers)")
    g.add_argument("--trace-dir", metavar="DIR", help="directory for per-run PerC-AL trace CSVs (overrides run.trace_dir)")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set defense.max_iters=200 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voiceshield", description="Embedding-level voice protection toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    ps = {}
    for name, (_, help_text) in COMMANDS.items():
        ps[name] = sub.add_parser(name, help=help_text, description=help_text)
        _common(ps[name])

    p = ps["gen-corpus"]
    p.add_argument("--out", metavar="DIR", help="corpus directory (overrides paths.corpus_dir)")
    p.add_argument("--n-speakers", type=int, help="number of synthetic speakers (overrides corpus.n_speakers)")
    p.add_argument("--utts-per-speaker", type=int, help="utterances per speaker (overrides corpus.utts_per_speaker)")
    p.add_argument("--duration", type=float, help="utterance length in seconds (overrides corpus.duration_s)")

    for name in ("train", "calibrate", "protect", "synthesize", "verify", "evaluate"):
        ps[name].add_argument("--model-dir", metavar="DIR", help="trained model directory (overrides paths.model_dir)")
    for name in ("train", "calibrate", "protect", "evaluate"):
        ps[name].add_argument("--corpus-dir", metavar="DIR", help="corpus directory (overrides paths.corpus_dir)")

    p = ps["protect"]
    p.add_argument("input", help="WAV file to protect")
    p.add_argument("output", help="where to write the protected WAV")
    p.add_argument("--mode", choices=MODES, default="embedding", help="perturb codec embeddings or STFT magnitudes")
    p.add_argument("--encoders", nargs="+", metavar="ID", help="encoder ids to optimise against (default: all trained)")
    p.add_argument("--speaker", metavar="SPK", help="enrolled speaker id of the input (default: closest profile)")
    p.add_argument("--target", metavar="SPK", help="target speaker id (default: least similar enrolled speaker)")

    p = ps["enhance"]
    p.add_argument("input", help="WAV file to enhance")
    p.add_argument("output", help="where to write the enhanced WAV")
    p.add_argument("--method", choices=METHODS, default=METHODS[0], help="enhancement method")

    p = ps["synthesize"]
    p.add_argument("content", help="WAV file supplying the spoken content")
    p.add_argument("stolen", help="WAV file whose voice is cloned")
    p.add_argument("output", help="where to write the cloned WAV")
    p.add_argument("--encoder", metavar="ID", help="encoder whose synthesizer is used (default: first trained)")

    p = ps["verify"]
    p.add_argument("profile", help="enrolled speaker id")
    p.add_argument("input", help="WAV file to verify")
    p.add_argument("--encoder", metavar="ID", help="verifier encoder id (default: first trained)")

    p = ps["evaluate"]
    p.add_argument("--report-dir", metavar="DIR", help="report output directory (overrides paths.report_dir)")
    p.add_argument("--max-victims", type=int, help="limit the number of victim utterances (overrides campaign.max_victims)")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG and PGM figures")
    return parser


_FLAG_KEYS = {
    "seed": "run.seed",
    "workers": "run.workers",
    "trace_dir": "run.trace_dir",
    "out": "paths.corpus_dir",
    "corpus_dir": "paths.corpus_dir",
    "model_dir": "paths.model_dir",
    "report_dir": "paths.report_dir",
    "n_speakers": "corpus.n_speakers",
    "utts_per_speaker": "corpus.utts_per_speaker",
    "duration": "corpus.duration_s",
    "max_victims": "campaign.max_victims",
}


def resolve_config(args) -> RunConfig:
    """Config file, then ``--set`` overrides, then dedicated flags (flags win)."""
    config = load_config(args.config) if args.config else default_config()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        config = config.override_text(key.strip(), value.strip())
    pairs = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            pairs[key.replace(".", "__")] = value
    if getattr(args, "no_figures", False):
        pairs["campaign__figures"] = False
    return config.with_overrides(**pairs) if pairs else config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        print(f"seed: {config['run.seed']}", flush=True)
        return COMMANDS[args.command][0](config, args)
    except VoiceShieldError as exc:
        _fail(exc.category, exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        _fail(MissingArtifactError.category, f"file not found: {exc.filename or exc}")
        return MissingArtifactError.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        _fail("numerical", exc)
        return 4


def _fail(category, message):
    text = " ".join(str(message).split())
    print(f"{category}: {text}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

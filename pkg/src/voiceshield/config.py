"""Run configuration: flat ``section.key = value`` text, one entry per line.

Blank lines and ``#`` comments are ignored. Every key has a default, unknown
keys are rejected, and :meth:`RunConfig.dumps` renders the full effective
configuration in a canonical order (it is what report directories embed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError

AUTO = "auto"
ALL = "all"


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _str(s):
    if not s:
        raise ValueError("empty value")
    return s


def _bool(s):
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _auto_float(s):
    return None if s == AUTO else float(s)


def _opt_float(s):
    return None if s == "none" else float(s)


def _all_int(s):
    return None if s == ALL else int(s)


def _list(s):
    items = [x.strip() for x in s.split(",") if x.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(items)


def _all_list(s):
    return None if s == ALL else _list(s)


def _floats(s):
    return tuple(float(x) for x in _list(s))


def _protect(s):
    # ';'-separated setups; each is 'matched' or '+'-joined encoder ids
    out = []
    for part in s.split(";"):
        part = part.strip()
        if not part:
            continue
        out.append(part if part == "matched" else tuple(p.strip() for p in part.split("+")))
    if not out:
        raise ValueError("no protection setups")
    return tuple(out)


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    return str(v)


# key -> (parser, default, rendering of None)
SCHEMA = {
    "run.seed": (_int, 0, None),
    "run.workers": (_int, 0, None),  # 0: one per available CPU
    "run.trace_dir": (_str, None, "none"),
    "paths.corpus_dir": (_str, "corpus", None),
    "paths.model_dir": (_str, "models", None),
    "paths.report_dir": (_str, "report", None),
    "corpus.n_speakers": (_int, 16, None),
    "corpus.utts_per_speaker": (_int, 10, None),
    "corpus.duration_s": (_float, 3.0, None),
    "corpus.split_ratios": (_floats, (0.5, 0.2, 0.3), None),
    "codec.dim": (_int, 32, None),
    "codec.ridge": (_float, 1e-4, None),
    "codec.refinement_stages": (_int, 0, None),
    "codec.gl_iters": (_int, 60, None),
    "encoder.variants": (_list, ("mel-stats", "mfcc-stats"), None),
    "encoder.epochs": (_int, 400, None),
    "encoder.lr": (_float, 0.05, None),
    "defense.tau_identity": (_auto_float, None, AUTO),
    "defense.tau_snr_db": (_float, 15.0, None),
    "defense.alpha": (_auto_float, None, AUTO),
    "defense.epsilon_init": (_auto_float, None, AUTO),
    "defense.max_iters": (_int, 500, None),
    "defense.budget_rho": (_opt_float, None, "none"),
    "defense.distance": (_str, "l2", None),
    "enhance.noise_frames": (_int, 0, None),
    "enhance.over_subtraction": (_float, 2.0, None),
    "enhance.spectral_floor": (_float, 0.05, None),
    "enhance.kernel_width": (_int, 5, None),
    "campaign.defenses": (_list, ("raw", "embedding-level", "signal-level"), None),
    "campaign.enhancements": (_list, ("none", "spectral-masking", "wiener", "smoothing"), None),
    "campaign.verifiers": (_all_list, None, ALL),
    "campaign.protect": (_protect, ("matched",), None),
    "campaign.max_victims": (_all_int, None, ALL),
    "campaign.examples": (_int, 1, None),
    "campaign.figures": (_bool, True, None),
}


def _render(key, value) -> str:
    none_text = SCHEMA[key][2]
    if value is None:
        return none_text or "none"
    if key == "campaign.protect":
        return "; ".join(x if isinstance(x, str) else "+".join(x) for x in value)
    return _fmt_value(value)


@dataclass(frozen=True)
class RunConfig:
    values: tuple  # (key, value) pairs in schema order

    def __getitem__(self, key):
        for k, v in self.values:
            if k == key:
                return v
        raise ConfigError(f"unknown config key {key!r}")

    def as_dict(self) -> dict:
        return dict(self.values)

    def section(self, name) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values if k.startswith(prefix)}

    def with_overrides(self, **pairs) -> "RunConfig":
        """Replace values; keys use ``section__key`` or dotted form via a dict unpack."""
        d = self.as_dict()
        for k, v in pairs.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = v
        return _build(d)

    def override_text(self, key, text) -> "RunConfig":
        d = self.as_dict()
        d[key] = _parse_value(key, text)
        return _build(d)

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(k, v)}\n" for k, v in self.values)


def _parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _, none_text = SCHEMA[key]
    if none_text is not None and text == none_text:
        return None
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def _check(d: dict) -> None:
    def positive(key):
        if d[key] is not None and d[key] <= 0:
            raise ConfigError(f"{key} must be > 0")

    for key in ("corpus.n_speakers", "corpus.utts_per_speaker", "corpus.duration_s", "codec.dim", "codec.gl_iters",
                "encoder.epochs", "encoder.lr", "defense.max_iters", "defense.tau_identity", "defense.alpha",
                "defense.budget_rho", "enhance.over_subtraction", "enhance.kernel_width", "campaign.max_victims"):
        positive(key)
    for key in ("run.seed", "run.workers", "codec.refinement_stages", "enhance.noise_frames", "campaign.examples",
                "defense.epsilon_init"):
        if d[key] is not None and d[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    if d["codec.ridge"] < 0:
        raise ConfigError("codec.ridge must be >= 0")
    if len(d["corpus.split_ratios"]) != 3:
        raise ConfigError("corpus.split_ratios needs three values (train, victim, test)")
    if d["defense.distance"] not in ("l2", "cosine"):
        raise ConfigError(f"defense.distance must be 'l2' or 'cosine', got {d['defense.distance']!r}")
    if not 0.0 < d["enhance.spectral_floor"] < 1.0:
        raise ConfigError("enhance.spectral_floor must lie in (0, 1)")
    if d["enhance.kernel_width"] % 2 == 0:
        raise ConfigError("enhance.kernel_width must be odd")
    for key, allowed in (("campaign.defenses", ("raw", "embedding-level", "signal-level")),
                         ("campaign.enhancements", ("none", "spectral-masking", "wiener", "smoothing")),
                         ("encoder.variants", ("mel-stats", "mfcc-stats"))):
        bad = [x for x in d[key] if x not in allowed]
        if bad:
            raise ConfigError(f"{key}: unknown entries {bad}; allowed {list(allowed)}")


def _build(d: dict) -> RunConfig:
    _check(d)
    return RunConfig(tuple((k, d[k]) for k in SCHEMA))


def default_config() -> RunConfig:
    return _build({k: spec[1] for k, spec in SCHEMA.items()})


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    d = {k: spec[1] for k, spec in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} lacks a section prefix")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            d[key] = _parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return _build(d)


def load_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def effective_workers(config: RunConfig) -> int:
    n = config["run.workers"]
    return n if n > 0 else (os.cpu_count() or 1)

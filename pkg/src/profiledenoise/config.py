"""YAML experiment configs with ``${VAR}`` environment interpolation."""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .dataset import FORMATS
from .evaluation import CUTOFFS
from .llm.prompts import VARIANTS
from .multivae import TrainConfig
from .synth import MOCK_MODES, SynthSpec


class ConfigError(ValueError):
    pass


_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")

BASELINE_KINDS = ("random", "toppop", "semantic", "upperBoundOnVal")
DENOISER_KINDS = BASELINE_KINDS + ("llm", "mock")
# fields that may carry secrets; excluded from the config hash
_SECRET_KEYS = ("api_key",)


def interpolate(value: Any, env: dict | None = None) -> Any:
    """Replace ``${NAME}`` / ``${NAME:-default}`` in every string of a nested structure."""
    env = os.environ if env is None else env
    if isinstance(value, dict):
        return {k: interpolate(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, env) for v in value]
    if not isinstance(value, str):
        return value

    def sub(m):
        name, default = m.group(1), m.group(2)
        if name in env:
            return env[name]
        if default is not None:
            return default
        raise ConfigError(f"environment variable {name} is not set")

    return _VAR.sub(sub, value)


@dataclass
class DatasetConfig:
    path: str
    format: str = "csv"
    titles: str | None = None
    titles_format: str | None = None
    user_min: int = 1
    item_min: int = 1
    sample_n: int | None = None  # None: every user
    sample_seed: int | None = None


@dataclass
class DenoiserConfig:
    id: str
    kind: str
    k: int = 1
    # llm
    variant: str = "zero_shot"
    model: str | None = None
    base_url: str | None = None
    api_key: str | None = None
    model_label: str | None = None
    domain_label: str = "movie"
    decoding: dict = field(default_factory=dict)
    max_in_flight: int = 4
    max_attempts: int = 4
    timeout: float = 60.0
    # mock
    mode: str | None = None
    script: str | None = None


@dataclass
class ExperimentConfig:
    out: str
    dataset: DatasetConfig
    denoisers: list[DenoiserConfig]
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str | None = None  # skip training and load this file
    seed: int = 0
    runs: int = 3
    cutoffs: tuple[int, ...] = CUTOFFS
    workers: int = 1
    model_name: str = "MultiVAE"
    synth: SynthSpec | None = None
    source: str | None = field(default=None, repr=False)

    def denoiser(self, ident: str) -> DenoiserConfig:
        for d in self.denoisers:
            if d.id == ident:
                return d
        raise ConfigError(f"no denoiser {ident!r} in config; have {[d.id for d in self.denoisers]}")

    @property
    def sample_seed(self) -> int:
        s = self.dataset.sample_seed
        return self.seed if s is None else s

    def to_dict(self, redact: bool = True) -> dict:
        d = asdict(self)
        d.pop("source")
        d["cutoffs"] = list(self.cutoffs)
        if redact:
            for den in d["denoisers"]:
                for key in _SECRET_KEYS:
                    if den.get(key):
                        den[key] = "<redacted>"
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(redact=True), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _check_denoiser(d: DenoiserConfig, where: str) -> None:
    if d.kind not in DENOISER_KINDS:
        raise ConfigError(f"{where}: kind must be one of {DENOISER_KINDS}")
    if d.k not in (1, 2):
        raise ConfigError(f"{where}: k must be 1 or 2")
    if d.kind == "llm":
        if d.variant not in VARIANTS:
            raise ConfigError(f"{where}: variant must be one of {VARIANTS}")
        if not d.model:
            raise ConfigError(f"{where}: llm denoiser needs a model")
    if d.kind == "mock":
        if d.mode not in MOCK_MODES:
            raise ConfigError(f"{where}: mode must be one of {MOCK_MODES}")
        if d.mode == "scripted" and not d.script:
            raise ConfigError(f"{where}: scripted mock needs a script file")


def parse_config(raw: dict, base_dir: Path | None = None, env: dict | None = None) -> ExperimentConfig:
    """Validate a raw mapping; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = interpolate(raw, env)
    base = Path(base_dir) if base_dir else Path.cwd()

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return str(p if p.is_absolute() else (base / p))

    raw = dict(raw)
    for key in ("out", "dataset", "denoisers"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    ds = _build(DatasetConfig, raw.pop("dataset"), "dataset")
    if ds.format not in FORMATS:
        raise ConfigError(f"dataset.format must be one of {FORMATS}")
    if ds.user_min < 1 or ds.item_min < 1:
        raise ConfigError("dataset.user_min and item_min must be >= 1")
    if ds.sample_n is not None and ds.sample_n < 1:
        raise ConfigError("dataset.sample_n must be positive")
    ds.path, ds.titles = resolve(ds.path), resolve(ds.titles)

    dens_raw = raw.pop("denoisers")
    if not isinstance(dens_raw, list) or not dens_raw:
        raise ConfigError("denoisers must be a non-empty list")
    dens = []
    for n, d in enumerate(dens_raw):
        den = _build(DenoiserConfig, d, f"denoisers[{n}]")
        _check_denoiser(den, f"denoisers[{n}] ({den.id})")
        den.script = resolve(den.script)
        dens.append(den)
    ids = [d.id for d in dens]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ConfigError(f"duplicate denoiser id(s): {dupes}")

    train = _build(TrainConfig, raw.pop("train", None) or {}, "train")
    synth = raw.pop("synth", None)
    synth = _build(SynthSpec, synth, "synth") if synth is not None else None
    out = resolve(raw.pop("out"))
    cfg_kw = dict(raw)
    if "cutoffs" in cfg_kw:
        cfg_kw["cutoffs"] = tuple(int(c) for c in cfg_kw["cutoffs"])
    cfg = _build(ExperimentConfig, {**cfg_kw, "out": out, "dataset": ds, "denoisers": dens,
                                    "train": train, "synth": synth}, "config")
    cfg.checkpoint = resolve(cfg.checkpoint)
    if cfg.runs < 1:
        raise ConfigError("runs must be >= 1")
    if not cfg.cutoffs or min(cfg.cutoffs) < 1:
        raise ConfigError("cutoffs must be positive integers")
    if cfg.checkpoint and not Path(cfg.checkpoint).exists():
        raise ConfigError(f"checkpoint {cfg.checkpoint} does not exist")
    return cfg


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(raw, base_dir=path.parent, env=env)
    cfg.source = str(path)
    return cfg


def apply_seed_override(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Every named seed (sample, training, campaign, synth) becomes ``seed``."""
    cfg.seed = seed
    cfg.dataset.sample_seed = seed
    cfg.train.seed = seed
    if cfg.synth is not None:
        cfg.synth.seed = seed
    return cfg

"""Run configuration: one TOML file, strict parsing, canonical hashing.

Every key has a default (the bundled toy pipeline), unknown keys are
rejected by name, and the fully resolved configuration is hashed to
content-address run directories.  Reference syntax::

    [run]
    seed = 0
    out = "runs"

    [train1]
    steps = 600
    peak_lr = 3e-3

Sections and keys mirror the dataclasses below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli


class ConfigError(ValueError):
    """Config file failed to parse or contained unknown/ill-typed keys."""


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclass
class ProviderSection:
    dim: int = 32
    ngram: int = 3


@dataclass
class ToySection:
    classes: int = 2
    class_means: tuple = ((2.0, 2.0), (-2.0, -2.0))
    sigma: float = 0.15
    corpus_size: int = 96
    bank_size: int = 24
    test_size: int = 16
    train_large: int = 256
    train_small: int = 96
    eval_prompts_per_class: int = 8
    samples_per_prompt: int = 64
    d_p: int = 8
    proxy_tau: float = 1.0
    vocab_top_n: int = 64
    vocab_max_ngram: int = 2
    dedup_threshold: float = 0.95
    sharpness_keep_fraction: float = 0.5
    kmeans_k: int = 4
    image_size: int = 8
    filler_prob: float = 0.5


@dataclass
class RetrievalSection:
    km: int = 16
    k_t: int = 4
    k_v: int = 4
    n_kw: int = 4
    n_per: int = 2


@dataclass
class MscSection:
    d_c: int = 32
    n_q: int = 8
    # Few hash buckets on purpose: heavy token collisions keep the toy
    # task's text streams weak, so conditioning quality measurably depends
    # on the prototype stream (what the budget ablation probes).
    prompt_buckets: int = 16
    max_prompt_tokens: int = 16
    backbone: str = "mini-transformer"
    backbone_layers: int = 2
    backbone_heads: int = 4
    projector_hidden: int = 0
    null_rts_tokens: int = 4
    null_ps_tokens: int = 4


@dataclass
class FlowSection:
    d_latent: int = 2
    n_tokens: int = 1
    d_model: int = 32
    layers: int = 2
    heads: int = 4


@dataclass
class Train1Section:
    steps: int = 800
    batch: int = 24
    peak_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_fraction: float = 0.02
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    uncond_drop_prob: float = 0.1


@dataclass
class Train2Section:
    steps: int = 60
    batch: int = 24
    fixed_lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    uncond_drop_prob: float = 0.1


@dataclass
class SampleSection:
    steps: int = 30
    guidance_scale: float = 1.0


@dataclass
class EvalSection:
    leakage_threshold: float = 0.95
    ks: tuple = (1, 5, 10)
    ablate_km_values: tuple = (0, 4, 8, 16, 32)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    provider: ProviderSection = field(default_factory=ProviderSection)
    toy: ToySection = field(default_factory=ToySection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    msc: MscSection = field(default_factory=MscSection)
    flow: FlowSection = field(default_factory=FlowSection)
    train1: Train1Section = field(default_factory=Train1Section)
    train2: Train2Section = field(default_factory=Train2Section)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _coerce(value, default, path: str):
    """Check/convert a parsed TOML value against the default's type."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {type(value).__name__}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{path}: expected array, got {type(value).__name__}")
        template = default[0] if len(default) else 0
        return tuple(_coerce(v, template, f"{path}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported config value type")


def _build_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'top level'}: expected a table")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown key: {where}")
        kwargs[key] = _coerce(value, getattr(defaults, key), where)
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    """Build a RunConfig from parsed TOML, rejecting unknown keys by name."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a table of sections")
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in sections:
            raise ConfigError(f"unknown key: {key}")
        section_cls = sections[key].default_factory  # type: ignore[union-attr]
        kwargs[key] = _build_section(section_cls, value, key)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None = None, *, seed: int | None = None,
                out: str | None = None) -> RunConfig:
    """Load a TOML config (defaults when path is None), applying overrides."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        try:
            data = tomli.loads(raw.decode("utf-8"))
        except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"config does not parse: {exc}") from exc
        cfg = parse_config(data)
    if seed is not None:
        cfg.run.seed = seed
    if out is not None:
        cfg.run.out = out
    return cfg


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_digest(cfg: RunConfig) -> str:
    """Stable hash of the fully resolved configuration.

    The output directory is excluded: where a run is written must not
    change what it computes, or reproducibility comparisons across
    directories would always diverge.
    """
    resolved = resolved_dict(cfg)
    resolved["run"].pop("out", None)
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

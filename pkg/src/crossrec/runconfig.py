"""Flat key=value run configuration (dotted keys, '#' comments)."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .backbone import EncoderConfig
from .data import SyntheticSpec
from .meta import MetaConfig
from .objective import ModelConfig, VQConfig

VARIANTS = ("full", "no_multihead_vq", "no_vq", "no_rescale", "no_meta")


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""  # path to a generated manifest; empty -> inline synthetic


@dataclass(frozen=True)
class TrainConfig:
    parallel: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    iterations: int = 200
    eval_every: int = 50
    variant: str = "full"
    k: int = 10
    k_core: int = 5
    out_dir: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        d_model=16, num_blocks=1, max_len=12))
    meta: MetaConfig = field(default_factory=MetaConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.encoder.d_model % max(1, self.vq.heads):
            raise ValueError(f"encoder.d_model={self.encoder.d_model} not divisible "
                             f"by vq.heads={self.vq.heads}")


_SECTIONS = ("data", "synthetic", "encoder", "meta", "vq", "train")


_SCALAR_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(f):
    # annotations are strings under `from __future__ import annotations`
    return f.type if isinstance(f.type, type) else _SCALAR_TYPES[f.type]


def _parse_value(raw, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    return typ(raw)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text):
    """Parse flat key=value text into a RunConfig; unknown keys are rejected."""
    top = {}
    nested = {name: {} for name in _SECTIONS}
    top_fields = {f.name: f for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"config line {lineno}: unknown section {section!r}")
            sub_type = top_fields[section].default_factory().__class__
            sub_fields = {f.name: f for f in fields(sub_type)}
            if name not in sub_fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            nested[section][name] = _parse_value(raw, _field_type(sub_fields[name]))
        else:
            if key not in top_fields or key in _SECTIONS:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            top[key] = _parse_value(raw, _field_type(top_fields[key]))
    kwargs = dict(top)
    for section in _SECTIONS:
        if nested[section]:
            base = top_fields[section].default_factory()
            kwargs[section] = dataclasses.replace(base, **nested[section])
    return RunConfig(**kwargs)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg):
    """Stable flat text form; parse(serialize(cfg)) == cfg."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name}={_format_value(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name}={_format_value(value)}")
    lines.sort()
    return "\n".join(lines) + "\n"


def effective_model_config(cfg):
    """ModelConfig with the variant's VQ adjustments applied."""
    vq = cfg.vq
    if cfg.variant == "no_multihead_vq":
        vq = dataclasses.replace(vq, heads=1)
    elif cfg.variant == "no_vq":
        vq = dataclasses.replace(vq, enabled=False)
    return ModelConfig(encoder=cfg.encoder, vq=vq, target_domain="target")

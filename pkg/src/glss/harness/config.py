"""Experiment configuration as a flat ``section.key = value`` text file.

Every sub-config seed is driven by ``global_seed``; the ablation flags live
under ``flags.*`` and override the matching fields of the sub-configs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, is_dataclass, replace
from pathlib import Path

from glss.datagen import SynthConfig
from glss.errors import InvalidInputError
from glss.generative import VAEConfig
from glss.latent_search import SearchConfig
from glss.segmentation import SegConfig

# fields owned by the top level; not settable per section
_DERIVED = {("synth", "seed"), ("vae", "seed"), ("seg", "seed"), ("search", "seed"), ("vae", "use_edge")}


@dataclass(frozen=True)
class AblationFlags:
    use_edge: bool = True
    use_perceptual: bool = True
    use_search: bool = True

    @property
    def tag(self) -> str:
        return f"edge{int(self.use_edge)}-perc{int(self.use_perceptual)}-ls{int(self.use_search)}"


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = SynthConfig()
    vae: VAEConfig = VAEConfig()
    seg: SegConfig = SegConfig()
    search: SearchConfig = SearchConfig()
    flags: AblationFlags = AblationFlags()
    output_dir: str = "glss-out"
    global_seed: int = 0
    # 0 picks GLSS_WORKERS, else the CPU count
    workers: int = 0

    def __post_init__(self):
        if self.workers < 0:
            raise InvalidInputError("workers must be >= 0")

    def resolved(self) -> "ExperimentConfig":
        """Push the global seed and ablation flags down into the sub-configs."""
        s = self.global_seed
        vae = replace(
            self.vae, seed=s, use_edge=self.flags.use_edge,
            perceptual_weight=self.vae.perceptual_weight if self.flags.use_perceptual else 0.0,
        )
        return replace(
            self, synth=replace(self.synth, seed=s), vae=vae,
            seg=replace(self.seg, seed=s), search=replace(self.search, seed=s),
        )

    def with_flags(self, **kw) -> "ExperimentConfig":
        return replace(self, flags=replace(self.flags, **kw))


# --- flat key/value form ------------------------------------------------------

def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = [p for p in (x.strip() for x in text.split(",")) if p]
            if not like:
                return tuple(parts)
            return tuple(_parse(p, like[0], key) for p in parts)
        return text
    except ValueError:
        raise InvalidInputError(f"bad value for {key}: {text!r}") from None


def _walk(obj, prefix=""):
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            yield from _walk(v, key + ".")
        else:
            yield key, v


def flatten(cfg: ExperimentConfig) -> dict[str, object]:
    out = {}
    for key, v in _walk(cfg):
        head, _, rest = key.partition(".")
        if (head, rest) in _DERIVED:
            continue
        out[key] = v
    return out


def known_keys() -> list[str]:
    return sorted(flatten(ExperimentConfig()))


def _set_path(obj, path: list[str], raw: str, key: str):
    name = path[0]
    if not any(f.name == name for f in fields(obj)):
        raise InvalidInputError(f"unknown config key {key!r}")
    cur = getattr(obj, name)
    if len(path) == 1:
        if is_dataclass(cur):
            raise InvalidInputError(f"{key!r} is a section, not a value")
        return replace(obj, **{name: _parse(raw, cur, key)})
    if not is_dataclass(cur):
        raise InvalidInputError(f"unknown config key {key!r}")
    return replace(obj, **{name: _set_path(cur, path[1:], raw, key)})


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    for key, raw in pairs.items():
        head, _, rest = key.partition(".")
        if (head, rest) in _DERIVED:
            raise InvalidInputError(f"{key!r} is derived; set global_seed or flags.* instead")
        cfg = _set_path(cfg, key.split("."), str(raw), key)
    return cfg


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"config line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidInputError(f"config file not found: {p}")
        pairs.update(parse_text(p.read_text()))
    pairs.update(overrides or {})
    try:
        return apply_overrides(ExperimentConfig(), pairs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(str(exc)) from None


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(flatten(cfg).items()))


def fingerprint(cfg: ExperimentConfig) -> str:
    """Hash of the resolved configuration; output_dir and workers do not affect results."""
    body = {k: v for k, v in flatten(cfg.resolved()).items() if k not in ("output_dir", "workers")}
    text = "".join(f"{k} = {_format(v)}\n" for k, v in sorted(body.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


"""Experiment configuration: TOML sections, strict validation, stable hash.

Unknown keys are rejected so a typo cannot silently fall back to a default.
The config hash is the SHA-256 of the fully resolved configuration (defaults
included), so two configs hash equal iff they mean the same experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class CorpusSection:
    n_identities: int = 60
    photos_per_id: int = 4
    sketches_per_id: int = 8
    seed: int = 0
    pose_jitter: float = 0.03
    illumination: float = 0.10
    noise: float = 0.02


@dataclass
class EncodersSection:
    d_text: int = 64
    d_identity: int = 32
    d_semantic: int = 64
    identity_epochs: int = 30
    identity_width: int = 32
    identity_augment_p: float = 0.6
    identity_augment_copies: int = 2
    semantic_epochs: int = 20
    text_steps: int = 300
    lr: float = 2e-3
    seed: int = 0
    use_appearance: bool = True


@dataclass
class DiffusionSection:
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.03
    image_size: int = 48
    widths: list = field(default_factory=lambda: [16, 32, 64])
    num_tokens: int = 4
    proj_hidden: int = 128
    time_dim: int = 64
    lambda_image: float = 1.0
    seed: int = 0


@dataclass
class TrainDiffusionSection:
    batch_size: int = 64
    warmup_epochs: int = 8
    epochs: int = 8
    lr: float = 1e-3
    decay_every: int = 3
    decay_factor: float = 0.5
    seed: int = 0


@dataclass
class SynthesisSection:
    seeds_per_style: int = 1
    sample_steps: int = 40
    audit_floor: float = 0.1
    seed: int = 0
    styles: list = field(default_factory=lambda: list(range(8)))


@dataclass
class FinetuneSection:
    batch_size: int = 64
    epochs: int = 4
    lr: float = 1e-4
    augment_p: float = 0.2
    mix_ratio: float = 1.0
    fractions: list = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    far_target: float = 0.01


@dataclass
class EvalSection:
    gallery_size: int = 500
    n_mated: int = 100
    n_nonmated: int = 100
    far_targets: list = field(default_factory=lambda: [0.001, 0.01, 0.1])
    fpir_targets: list = field(default_factory=lambda: [0.02])
    probe_modality: str = "sketch"
    probe_style: int = 1
    pose_jitter: float = 0.03
    illumination: float = 0.10
    noise: float = 0.02
    seed: int = 0
    realism_identities: int = 50
    realism_style: int = 1
    extra_systems: list = field(default_factory=list)  # [tag, encoder archive path]


_SECTIONS = {
    "corpus": CorpusSection,
    "encoders": EncodersSection,
    "diffusion": DiffusionSection,
    "train_diffusion": TrainDiffusionSection,
    "synthesis": SynthesisSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    encoders: EncodersSection = field(default_factory=EncodersSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train_diffusion: TrainDiffusionSection = field(default_factory=TrainDiffusionSection)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def hash(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def run_dir(self, out_root) -> Path:
        return Path(out_root) / self.hash()[:12]


def _build_section(cls, raw: dict, section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise DataError(f"[{section}] has unknown keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        target = known[key].type
        if target == "int" and isinstance(value, bool):
            raise DataError(f"[{section}] {key} must be an integer")
        if target == "int" and not isinstance(value, int):
            raise DataError(f"[{section}] {key} must be an integer, got {value!r}")
        if target == "float" and not isinstance(value, (int, float)):
            raise DataError(f"[{section}] {key} must be a number, got {value!r}")
        if target == "float":
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a TOML config; missing file or empty path means all defaults.

    ``overrides`` is a {section: {key: value}} mapping applied on top (the
    mechanism behind CLI --seed and environment overrides).
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"invalid TOML in {path}: {exc}") from exc
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise DataError(f"unknown config sections: {sorted(unknown)}")
    if overrides:
        for section, values in overrides.items():
            raw.setdefault(section, {}).update(values)
    sections = {
        name: _build_section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()
    }
    return ExperimentConfig(**sections)


def write_resolved_config(config: ExperimentConfig, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {"hash": config.hash(), "config": config.resolved()}
    (run_dir / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")

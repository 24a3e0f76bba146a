"""Single JSON run configuration with defaults for every field.

Unknown keys are rejected; every CLI run writes the fully-resolved config
next to its outputs for reproducibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

from cfad.dagen import DaGenParams
from cfad.losses import LossConfig
from cfad.network import NetworkConfig
from cfad.scoring import HqcConfig
from cfad.training import TrainConfig
from cfad.data import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    dataset_root: str = ""
    checkpoint: str = ""
    output_dir: str = ""


@dataclass
class RunConfig:
    dagen: DaGenParams = field(default_factory=DaGenParams)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    hqc: HqcConfig = field(default_factory=HqcConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: Paths = field(default_factory=Paths)


_TUPLE_FIELDS = {"gamma_range", "lambda_range", "sigma_range",
                 "decoder_channels", "head_hidden", "classes"}


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section {section!r}")
    coerced = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        if key == "defect_params" and isinstance(value, dict):
            value = _build_section(DaGenParams, value, f"{section}.defect_params")
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a RunConfig from JSON; ``overrides`` maps section -> {key: value}."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    for section, extra in (overrides or {}).items():
        raw.setdefault(section, {})
        raw[section].update(extra)

    sections = {
        "dagen": DaGenParams, "network": NetworkConfig, "train": TrainConfig,
        "loss": LossConfig, "hqc": HqcConfig, "synth": SynthConfig, "paths": Paths,
    }
    unknown = set(raw) - set(sections)
    if unknown:
        raise ConfigError(f"unknown top-level section(s) {sorted(unknown)}")
    built = {name: _build_section(cls, raw.get(name, {}), name)
             for name, cls in sections.items()}
    cfg = RunConfig(**built)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig):
    try:
        cfg.dagen.validate()
        cfg.network.validate()
        cfg.train.validate()
        cfg.loss.validate()
        cfg.hqc.validate()
        cfg.synth.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_resolved_config(cfg: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(asdict(cfg), indent=2, sort_keys=True, default=list) + "\n"
    )

"""Versioned JSON run configurations for the command-line tools."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import CLUE_SETS
from .losses import LossConfig
from .model import ModelConfig
from .training import FINETUNE_KEYS, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass
class BuildConfig:
    protocol: str = "sim1"
    n_rirs: int = 100  # sim1: RIRs in the fixed room
    n_rooms: int = 10  # sim2: rooms, each with banded sources
    sources_per_band: int = 5
    band_width: float = 0.5
    n_samples: int = 200
    n_speakers: int = 2
    r_spk: float = 0.5
    inactive_ratio: float = 0.25
    duration: float = 4.0
    clue_set: str = "Dis+Dim+Rt"
    corpus: str | None = None  # directory of per-speaker WAV folders; None = synthetic
    splits: tuple[float, float, float] = (0.9, 0.02, 0.08)
    write_audio: bool = True
    seed: int = 0

    def __post_init__(self):
        self.splits = tuple(float(r) for r in self.splits)
        _require(self.protocol in ("sim1", "sim2"), f"protocol must be sim1 or sim2, got {self.protocol!r}")
        _require(self.n_rirs > 0 and self.n_rooms > 0 and self.sources_per_band > 0, "counts must be positive")
        _require(self.n_samples > 0, "n_samples must be positive")
        _require(self.n_speakers >= 1, "n_speakers must be at least 1")
        _require(self.band_width > 0, "band_width must be positive")
        _require(self.r_spk > 0, f"r_spk must be positive, got {self.r_spk}")
        _require(0 <= self.inactive_ratio < 1, "inactive_ratio must lie in [0, 1)")
        _require(self.duration > 0, "duration must be positive")
        _require(self.clue_set in CLUE_SETS, f"unknown clue set {self.clue_set!r}")
        _require(len(self.splits) == 3 and all(r >= 0 for r in self.splits)
                 and abs(sum(self.splits) - 1) < 1e-9, "splits must be three non-negative ratios summing to 1")


@dataclass
class TrainRunConfig:
    dataset: str = ""
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    resume: str | None = None
    seed: int = 0

    def __post_init__(self):
        _require(bool(self.dataset), "dataset directory is required")
        ModelConfig.from_dict(self.model)
        TrainConfig.from_dict(self.train)
        LossConfig(**self.loss)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": self.seed})


@dataclass
class FinetuneRunConfig:
    checkpoint: str = ""
    dataset: str = ""
    overrides: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        _require(bool(self.checkpoint) and bool(self.dataset), "checkpoint and dataset are required")
        unknown = set(self.overrides) - FINETUNE_KEYS
        _require(not unknown, f"finetune cannot override {sorted(unknown)}")
        if "r_spk" in self.overrides:
            _require(self.overrides["r_spk"] > 0, f"r_spk must be positive, got {self.overrides['r_spk']}")
        LossConfig(**self.loss)


@dataclass
class EvalRunConfig:
    checkpoint: str = ""
    dataset: str = ""
    split: str = "test"
    seeds: list[int] | None = None  # regenerate one test set per seed from the split's RIR pool
    n_samples: int = 1000
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        _require(bool(self.checkpoint) and bool(self.dataset), "checkpoint and dataset are required")
        _require(self.split in ("train", "val", "test"), f"unknown split {self.split!r}")
        _require(self.n_samples > 0 and self.batch_size > 0, "n_samples and batch_size must be positive")


@dataclass
class ExtractConfig:
    mixture: str = ""
    checkpoint: str = ""
    d_q: float | None = None
    dis_mw: list[float] | None = None
    rt60: float | None = None
    seed: int = 0

    def __post_init__(self):
        _require(bool(self.mixture) and bool(self.checkpoint), "mixture and checkpoint are required")
        _require(self.d_q is not None, "missing clue field d_q")
        _require(self.d_q > 0, f"d_q must be positive, got {self.d_q}")
        if self.rt60 is not None:
            _require(self.rt60 > 0, f"rt60 must be positive, got {self.rt60}")
        if self.dis_mw is not None:
            _require(len(self.dis_mw) == 6 and all(v > 0 for v in self.dis_mw),
                     "dis_mw needs six positive distances")


@dataclass
class SweepConfig:
    recording: str = ""
    f1: float = 20.0
    f2: float = 7900.0
    duration: float = 5.0
    length: int | None = None
    strict: bool = False
    seed: int = 0

    def __post_init__(self):
        _require(bool(self.recording), "recording is required")
        _require(0 < self.f1 < self.f2, "need 0 < f1 < f2")
        _require(self.duration > 0, "duration must be positive")


COMMAND_CONFIGS = {
    "build-dataset": BuildConfig,
    "train": TrainRunConfig,
    "finetune": FinetuneRunConfig,
    "evaluate": EvalRunConfig,
    "extract": ExtractConfig,
    "sweep-deconv": SweepConfig,
}


def build_config(command: str, file_values: dict, overrides: dict):
    """Merge file values and flag overrides (flags win) into a validated config."""
    cls = COMMAND_CONFIGS[command]
    values = dict(file_values)
    version = values.pop("schema_version", SCHEMA_VERSION)
    _require(version == SCHEMA_VERSION, f"unsupported config schema_version {version!r}")
    values.pop("command", None)
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    _require(not unknown, f"unknown config keys for {command}: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    _require(isinstance(data, dict), f"{path}: config must be a JSON object")
    return data


def echo_config(cfg, command: str, out_dir: Path) -> Path:
    """Write the effective configuration next to the run's outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "command": command, **asdict(cfg)}
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path

import os
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, Literal, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

from kws.dataset import Protocol
from kws.errors import ConfigError
from kws.losses import LossName
from kws.model_res15 import Res15Config
from kws.trainer import TrainConfig

load_dotenv()

CONFIG_SNAPSHOT = "config.env"


def _env_path(name: str, default: Optional[str] = None) -> Optional[Path]:
    value = os.getenv(name, default)
    return Path(value) if value else None


class RunConfig(BaseModel):
    """Fully resolved settings for one pipeline run.

    Values come from (lowest to highest priority) field defaults and the
    environment, a flat ``key=value`` config file, ``--set key=value``
    overrides and dedicated command-line flags.
    """

    model_config = ConfigDict(extra="forbid")

    # paths
    corpus_root: Optional[Path] = Field(default_factory=lambda: _env_path("KWS_CORPUS_ROOT"))
    runs_root: Path = Field(default_factory=lambda: _env_path("KWS_RUNS_ROOT", "runs"))
    split_dir: Optional[Path] = None
    cache_dir: Optional[Path] = None

    # split
    seed: int = 0
    protocol: Protocol = Protocol.OPEN_SET

    # model + training
    loss: LossName = LossName.AP_FC
    embed_dim: int = Field(32, ge=2)
    channels: int = Field(45, ge=1)
    epochs: int = Field(150, ge=0)
    lr: float = Field(1e-3, gt=0)
    lr_factor: float = Field(0.1, gt=0, lt=1)
    plateau_patience: int = Field(10, ge=1)
    weight_decay: float = Field(1e-5, ge=0)
    early_stop_patience: int = Field(25, ge=1)
    classes_per_batch: int = Field(12, ge=2)
    samples_per_class: int = Field(6, ge=2)
    unknowns_per_batch: int = Field(6, ge=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    centroid_subsample: int = Field(2000, ge=1)
    augment_probability: float = Field(0.2, ge=0, le=1)
    max_shift: int = Field(10, ge=0)
    triplet_margin: float = Field(1.0, gt=0)
    repeats: int = Field(1, ge=1)

    # back-end
    backend: Optional[Literal["centroid", "svm", "softmax"]] = None
    svm_c: float = Field(1.0, gt=0)
    svm_gamma: Union[Literal["scale"], float] = "scale"
    svm_grid: bool = False
    svm_include_unknown: bool = True
    svm_max_train: int = Field(6000, ge=2)

    workers: int = Field(4, ge=1)

    @field_validator("steps_per_epoch", "backend", "split_dir", "cache_dir", "corpus_root", mode="before")
    @classmethod
    def blank_is_none(cls, value):
        return None if value == "" else value

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        shared = set(TrainConfig.model_fields) - {"seed"}
        return TrainConfig(seed=self.seed if seed is None else seed, **{k: getattr(self, k) for k in shared})

    def network_config(self) -> Res15Config:
        return Res15Config(channels=self.channels, embed_dim=self.embed_dim)

    def resolved_backend(self) -> str:
        """Back-end paired with the loss unless set explicitly."""
        if self.backend:
            return self.backend
        if self.loss is LossName.CE:
            return "softmax"
        if self.loss in (LossName.TRIPLET, LossName.AP):
            return "centroid"
        return "svm"

    def feature_cache_dir(self) -> Path:
        return self.cache_dir or self.runs_root / "feature_cache"


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_run_config(
    config_file: Optional[Path] = None,
    overrides: Iterable[str] = (),
    **flags,
) -> RunConfig:
    """Merge config file, ``--set`` overrides and flags (``None`` flags are ignored).

    Raises:
        ConfigError: the config file is missing or an override is malformed
        pydantic.ValidationError: unknown key or invalid value
    """
    values: Dict[str, object] = {}
    if config_file is not None:
        if not Path(config_file).is_file():
            raise ConfigError(f"config file {config_file} does not exist")
        values.update({k: v for k, v in dotenv_values(config_file).items() if v is not None})
    values.update(parse_overrides(overrides))
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig.model_validate(values)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_resolved(config: RunConfig, directory: Path) -> Path:
    """Sorted ``key=value`` snapshot of every setting, written as ``config.env``."""
    path = Path(directory) / CONFIG_SNAPSHOT
    dumped = config.model_dump(mode="json")
    lines = [f"{k}={_format(v)}" for k, v in sorted(dumped.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_resolved(directory: Path) -> RunConfig:
    path = Path(directory) / CONFIG_SNAPSHOT
    if not path.is_file():
        raise ConfigError(f"{path} not found")
    return RunConfig.model_validate({k: v for k, v in dotenv_values(path).items() if v is not None})


def new_run_dir(runs_root: Path, seed: int) -> Path:
    """Create ``<runs_root>/<YYYYmmdd-HHMMSS>-seed<seed>``, suffixing on collision."""
    base = f"{datetime.now().strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    runs_root = Path(runs_root)
    runs_root.mkdir(parents=True, exist_ok=True)
    candidate, n = runs_root / base, 1
    while candidate.exists():
        n += 1
        candidate = runs_root / f"{base}-{n}"
    candidate.mkdir()
    return candidate

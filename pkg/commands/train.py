import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import typer

from commands.common import features_for, load_split
from config import RunConfig, load_run_config, new_run_dir, write_resolved
from kws.losses import LossName
from kws.model_res15 import Res15, save_model
from kws.trainer import TrainResult, train as run_training
from models import ManifestEntry, Split

logger = logging.getLogger(__name__)

TRAIN_LOG_FILE = "train_log.tsv"


def train_model(
    config: RunConfig,
    train_entries: List[ManifestEntry],
    val_entries: List[ManifestEntry],
    features: Dict[str, np.ndarray],
    out_dir: Path,
) -> TrainResult:
    """Train one network with ``config.seed`` and write its artifacts to ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Res15(config.network_config(), seed=config.seed)
    result = run_training(train_entries, val_entries, model, config.train_config(), features)
    objective_state = {k: v for k, v in result.best_state.items() if k.startswith("objective.")}
    save_model(model, out_dir, extra=objective_state)
    result.log.write(out_dir / TRAIN_LOG_FILE)
    write_resolved(config, out_dir)
    logger.info(f"Seed {config.seed}: best val_acc={result.best_val_accuracy:.4f}, saved to {out_dir}")
    return result


def train(
    split_dir: Optional[Path] = typer.Option(None, "--split-dir", help="Output directory of `split`"),
    loss: Optional[LossName] = typer.Option(None, "--loss", help="Training objective"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    repeats: Optional[int] = typer.Option(None, "--repeats", help="Train k runs with seeds seed..seed+k-1"),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat key=value config file"),
    overrides: List[str] = typer.Option([], "--set", help="Override a config key: key=value"),
):
    """
    Train res15 embeddings with the chosen objective.
    """
    config = load_run_config(
        config_file, overrides, split_dir=split_dir, loss=loss, epochs=epochs, seed=seed, repeats=repeats
    )
    manifest, _ = load_split(config)
    train_entries = manifest.in_split(Split.TRAIN)
    val_entries = manifest.in_split(Split.VAL)
    features = features_for(train_entries + val_entries, manifest, config)

    run_dir = new_run_dir(config.runs_root, config.seed)
    write_resolved(config, run_dir)
    for i in range(config.repeats):
        run_config = config.model_copy(update={"seed": config.seed + i, "repeats": 1})
        target = run_dir / f"repeat_{i}" if config.repeats > 1 else run_dir
        train_model(run_config, train_entries, val_entries, features, target)
    typer.echo(str(run_dir))

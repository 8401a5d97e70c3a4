import logging
from pathlib import Path

import numpy as np
import typer

from commands.common import (
    CHECKPOINT_FILE,
    EMBEDDINGS_FILE,
    EmbeddingTable,
    evaluation_entries,
    features_for,
    load_split,
    model_dirs,
    require,
    save_embeddings,
)
from config import read_resolved
from kws.model_res15 import embed_features, load_model
from models import Split

logger = logging.getLogger(__name__)


def compute_embeddings(model_dir: Path) -> EmbeddingTable:
    """Embed train, val and every test-list clip with the run's checkpoint."""
    require(model_dir / CHECKPOINT_FILE)
    config = read_resolved(model_dir)
    manifest, test_lists = load_split(config)
    entries = manifest.in_split(Split.TRAIN) + manifest.in_split(Split.VAL) + evaluation_entries(manifest, test_lists)
    features = features_for(entries, manifest, config)

    model, _ = load_model(model_dir, seed=config.seed)
    vectors = embed_features(model, np.stack([features[e.clip_id] for e in entries]))
    save_embeddings(model_dir / EMBEDDINGS_FILE, entries, vectors)
    logger.info(f"Embedded {len(entries)} clips into {model_dir / EMBEDDINGS_FILE}")
    return EmbeddingTable(model_dir / EMBEDDINGS_FILE)


def ensure_embeddings(model_dir: Path) -> EmbeddingTable:
    path = model_dir / EMBEDDINGS_FILE
    if path.exists():
        return EmbeddingTable(path)
    return compute_embeddings(model_dir)


def embed(
    run: Path = typer.Option(..., "--run", help="Training run directory"),
):
    """
    Write embeddings.npz for every model of a training run.
    """
    for model_dir in model_dirs(run):
        compute_embeddings(model_dir)

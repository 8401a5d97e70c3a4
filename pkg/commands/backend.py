import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer

from commands.common import BACKEND_FILES, CHECKPOINT_FILE, model_dirs, require
from commands.embed import ensure_embeddings
from config import RunConfig, read_resolved
from kws import nn_core as nn
from kws.backends import (
    Similarity,
    centroid_classify_batch,
    fit_centroids,
    fit_svm,
    load_centroids,
    load_svm,
    save_centroids,
    save_svm,
    select_svm_hyperparameters,
    softmax_classify_batch,
    stratified_subsample,
    svm_classify_batch,
)
from kws.errors import ValidationError
from kws.losses import LossName
from models import Decision, Split

logger = logging.getLogger(__name__)

SVM_GRID_FILE = "svm_grid.tsv"
HEAD_WEIGHT = "objective.head.fc.weight"
HEAD_BIAS = "objective.head.fc.bias"


def centroid_similarity(loss: LossName) -> Similarity:
    if loss in (LossName.TRIPLET, LossName.TRIPLET_TARGET_ONLY):
        return Similarity.NEG_EUCLIDEAN
    return Similarity.COSINE


def fit_backend_files(model_dir: Path, config: RunConfig, backend: str) -> Optional[Path]:
    """Fit the back-end on the run's training embeddings; softmax needs no file."""
    if backend == "softmax":
        if config.loss is not LossName.CE:
            raise ValidationError("the softmax back-end only exists for the ce objective")
        return None

    table = ensure_embeddings(model_dir)
    x, labels, _ = table.split(Split.TRAIN)
    path = model_dir / BACKEND_FILES[backend]
    if backend == "centroid":
        save_centroids(fit_centroids(x, labels, centroid_similarity(config.loss)), path)
        logger.info(f"Centroid table written to {path}")
        return path

    keep = stratified_subsample(labels, config.svm_max_train, config.seed)
    x, labels = x[keep], [labels[i] for i in keep]
    C, gamma = config.svm_c, config.svm_gamma
    if config.svm_grid:
        val_x, val_labels, _ = table.split(Split.VAL)
        C, gamma, results = select_svm_hyperparameters(
            x, labels, val_x, val_labels, include_unknown_class=config.svm_include_unknown, seed=config.seed
        )
        rows = ["C\tgamma\tval_accuracy"] + [f"{r['C']}\t{r['gamma']}\t{r['val_accuracy']!r}" for r in results]
        (model_dir / SVM_GRID_FILE).write_text("\n".join(rows) + "\n", encoding="utf-8")
    model = fit_svm(x, labels, C, gamma, config.svm_include_unknown, seed=config.seed)
    save_svm(model, path)
    logger.info(f"SVM ({len(model.problems)} problems, C={C}, gamma={gamma}) written to {path}")
    return path


def classify(model_dir: Path, config: RunConfig, backend: str, vectors: np.ndarray) -> List[Decision]:
    """Decisions for ``vectors`` using a fitted back-end, fitting it first if needed."""
    if backend == "softmax":
        if config.loss is not LossName.CE:
            raise ValidationError("the softmax back-end only exists for the ce objective")
        state = nn.load_checkpoint(require(model_dir / CHECKPOINT_FILE))
        return softmax_classify_batch(vectors, state[HEAD_WEIGHT], state[HEAD_BIAS])
    path = model_dir / BACKEND_FILES[backend]
    if not path.exists():
        fit_backend_files(model_dir, config, backend)
    if backend == "centroid":
        return centroid_classify_batch(vectors, load_centroids(path))
    return svm_classify_batch(vectors, load_svm(path))


def fit_backend(
    run: Path = typer.Option(..., "--run", help="Training run directory"),
    backend: Optional[str] = typer.Option(None, "--backend", help="centroid, svm or softmax (default: paired with the loss)"),
):
    """
    Fit the decision back-end on training-split embeddings.
    """
    for model_dir in model_dirs(run):
        require(model_dir / CHECKPOINT_FILE)
        config = read_resolved(model_dir)
        if backend is not None:
            config = config.model_copy(update={"backend": backend})
            config = RunConfig.model_validate(config.model_dump())
        fit_backend_files(model_dir, config, config.resolved_backend())


"""Training loop: Adam with L2 weight decay, reduce-on-plateau, early stopping.

Validation accuracy drives both the learning-rate schedule and the choice of
the returned checkpoint. The cross-entropy baseline is scored by its
classifier head; metric objectives by nearest centroid over embeddings of a
fixed, seeded subsample of the training split.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from kws import nn_core as nn
from kws.backends import Similarity, centroid_classify_batch, fit_centroids
from kws.dsp_frontend import FeatureMap, augment_time_shift
from kws.errors import Diverged, EmptySplit
from kws.losses import BatchSpec, LossName, Objective, batch_size_for, build_objective, sample_batch
from kws.model_res15 import EmbeddingBatch, Res15, embed_features
from models import ManifestEntry

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(150, ge=0)
    lr: float = Field(1e-3, gt=0)
    lr_factor: float = Field(0.1, gt=0, lt=1)
    plateau_patience: int = Field(10, ge=1)
    weight_decay: float = Field(1e-5, ge=0)
    early_stop_patience: int = Field(25, ge=1)
    seed: int = 0
    loss: LossName = LossName.AP_FC
    classes_per_batch: int = 12
    samples_per_class: int = 6
    unknowns_per_batch: int = 6
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    centroid_subsample: int = Field(2000, ge=1)
    augment_probability: float = Field(0.2, ge=0, le=1)
    max_shift: int = Field(10, ge=0)
    triplet_margin: float = Field(1.0, gt=0)

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.classes_per_batch, self.samples_per_class, self.unknowns_per_batch)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float
    wallclock: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def write(self, path: Path) -> None:
        """Deterministic fields only; wallclock goes to ``timing.tsv`` beside it."""
        path = Path(path)
        lines = ["epoch\ttrain_loss\tval_accuracy\tlr"]
        lines += [f"{r.epoch}\t{r.train_loss!r}\t{r.val_accuracy!r}\t{r.lr!r}" for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        timing = ["epoch\twallclock"] + [f"{r.epoch}\t{r.wallclock:.3f}" for r in self.records]
        path.with_name("timing.tsv").write_text("\n".join(timing) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
        records = []
        for line in lines:
            epoch, loss, acc, lr = line.split("\t")
            records.append(EpochRecord(int(epoch), float(loss), float(acc), float(lr)))
        return cls(records)


@dataclass
class TrainResult:
    best_state: Dict[str, np.ndarray]
    log: TrainLog
    objective: Objective
    best_val_accuracy: float


def snapshot(model: Res15, objective: Objective) -> Dict[str, np.ndarray]:
    state = model.state_dict()
    state.update((f"objective.{k}", v) for k, v in objective.state_dict().items())
    return state


def restore(model: Res15, objective: Objective, state: Mapping[str, np.ndarray]) -> None:
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("objective.")})
    objective.load_state_dict(
        {k[len("objective."):]: v for k, v in state.items() if k.startswith("objective.")}
    )


def centroid_reference(entries: Sequence[ManifestEntry], size: int, seed: int) -> List[ManifestEntry]:
    """Fixed seeded subsample of the training split for validation centroids."""
    entries = sorted(entries, key=lambda e: e.clip_id)
    if len(entries) <= size:
        return entries
    picked = np.random.default_rng(seed).choice(len(entries), size=size, replace=False)
    return [entries[i] for i in sorted(picked)]


def _stack(entries: Sequence[ManifestEntry], features: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.stack([features[e.clip_id] for e in entries])


def validate(
    model: Res15,
    val_entries: Sequence[ManifestEntry],
    objective: Objective,
    features: Mapping[str, np.ndarray],
    reference_entries: Sequence[ManifestEntry] = (),
) -> float:
    """Validation accuracy in [0, 1]; runs in eval mode and updates nothing.

    Target-only objectives (and AP-FC) are scored over target-class clips only.

    Raises:
        EmptySplit: no validation clips (or no reference clips for a metric objective)
    """
    if not val_entries:
        raise EmptySplit("validation split is empty")
    val_embeddings = embed_features(model, _stack(val_entries, features))
    truth = np.array([e.label.index for e in val_entries])

    if objective.name is LossName.CE:
        with nn.no_grad():
            logits = objective.head(EmbeddingBatch(nn.Tensor(val_embeddings), [e.label for e in val_entries]))
        predicted = np.argmax(logits.values, axis=1)
        return float(np.mean(predicted == truth))

    if not reference_entries:
        raise EmptySplit("no training clips to build validation centroids from")
    ref_embeddings = embed_features(model, _stack(reference_entries, features))
    ref_labels = [e.label for e in reference_entries]
    present = sorted(set(ref_labels), key=lambda label: label.index)
    table = fit_centroids(ref_embeddings, ref_labels, Similarity(objective.similarity), classes=present)
    predicted = np.array([d.predicted.index for d in centroid_classify_batch(val_embeddings, table)])

    scored = np.ones(len(val_entries), dtype=bool)
    if objective.name.target_only:
        scored = np.array([e.label.is_target for e in val_entries])
        if not scored.any():
            raise EmptySplit("validation split has no target-class clips")
    return float(np.mean(predicted[scored] == truth[scored]))


def _augment(batch_features: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    return np.stack(
        [
            augment_time_shift(FeatureMap(coeffs=f), rng, config.augment_probability, config.max_shift).coeffs
            for f in batch_features
        ]
    )


def train(
    train_entries: Sequence[ManifestEntry],
    val_entries: Sequence[ManifestEntry],
    model: Res15,
    config: TrainConfig,
    features: Mapping[str, np.ndarray],
    objective: Optional[Objective] = None,
) -> TrainResult:
    """Run the training recipe and return the best-validation checkpoint.

    Args:
        train_entries (Sequence[ManifestEntry]): training split
        val_entries (Sequence[ManifestEntry]): validation split
        model (Res15): network, trained in place
        config (TrainConfig): recipe
        features (Mapping[str, np.ndarray]): clip_id -> (40, 49) MFCC matrix
        objective (Optional[Objective]): built from config.loss when omitted

    Returns:
        TrainResult: best state (model + objective parameters) and the epoch log

    Raises:
        EmptySplit: train or validation split is empty
        Diverged: the training loss became NaN or infinite
    """
    if not train_entries:
        raise EmptySplit("training split is empty")
    if not val_entries:
        raise EmptySplit("validation split is empty")

    spec = config.batch_spec
    if objective is None:
        objective = build_objective(
            config.loss, model.config.embed_dim, spec, config.triplet_margin, seed=config.seed, dtype=model.dtype
        )
    optimizer = nn.Adam(
        model.parameters() + objective.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    reference = centroid_reference(train_entries, config.centroid_subsample, config.seed)
    steps = config.steps_per_epoch or math.ceil(len(train_entries) / batch_size_for(objective.sampler, spec))

    log = TrainLog()
    best_state = snapshot(model, objective)
    best_acc = -math.inf
    since_plateau = since_best = 0
    logger.info(f"Training {objective.name.value} for up to {config.epochs} epochs x {steps} steps")

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        model.train()
        losses = []
        for _ in tqdm(range(steps), desc=f"Epoch {epoch}", leave=False):
            batch = sample_batch(train_entries, spec, objective.sampler, rng, features)
            embeddings = model.forward(_augment(batch.features, rng, config), batch.labels, training=True)
            loss = objective.loss(embeddings)
            value = loss.item()
            if not math.isfinite(value):
                logger.error(f"Loss became {value} at epoch {epoch}")
                raise Diverged(f"training loss is {value} at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            objective.after_step()
            losses.append(value)

        accuracy = validate(model, val_entries, objective, features, reference)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_accuracy=accuracy,
            lr=optimizer.lr,
            wallclock=time.perf_counter() - started,
        )
        log.records.append(record)
        logger.info(
            f"Epoch {epoch}: loss={record.train_loss:.4f} val_acc={accuracy:.4f} lr={record.lr:g}"
        )

        if accuracy > best_acc:
            best_acc = accuracy
            best_state = snapshot(model, objective)
            since_plateau = since_best = 0
        else:
            since_plateau += 1
            since_best += 1
        if since_plateau >= config.plateau_patience:
            optimizer.lr = optimizer.lr * config.lr_factor
            since_plateau = 0
            logger.info(f"Validation plateau: learning rate reduced to {optimizer.lr:g}")
        if since_best >= config.early_stop_patience:
            logger.info(f"Early stop after {epoch} epochs (best val_acc={best_acc:.4f})")
            break

    restore(model, objective, best_state)
    return TrainResult(
        best_state=best_state,
        log=log,
        objective=objective,
        best_val_accuracy=best_acc if log.records else float("nan"),
    )

"""Training objectives and the batch samplers that feed them.

Six objectives share one interface: the cross-entropy baseline, triplet and
angular prototypical losses (each with and without an unknown cluster), and
AP-FC where learnable per-class anchors stand in for the target centroids.
Silence is a target class, so there are 11 target classes and one unknown.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from kws import nn_core as nn
from kws.errors import DegenerateBatch, InsufficientClassSamples, ValidationError
from kws.model_res15 import ClassifierHead, EmbeddingBatch
from models import CLASS_ORDER, TARGET_CLASSES, UNKNOWN, ClassLabel, ManifestEntry

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6
N_TARGET_CLASSES = len(TARGET_CLASSES)


class LossName(str, Enum):
    CE = "ce"
    TRIPLET = "triplet"
    TRIPLET_TARGET_ONLY = "triplet_target_only"
    AP = "ap"
    AP_TARGET_ONLY = "ap_target_only"
    AP_FC = "ap_fc"

    @property
    def target_only(self) -> bool:
        return self in (LossName.TRIPLET_TARGET_ONLY, LossName.AP_TARGET_ONLY, LossName.AP_FC)


class SamplerKind(str, Enum):
    UNIFORM = "uniform"
    PROTOTYPICAL = "prototypical"
    AP_FC = "ap_fc"


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    mining: str = "hardest_in_batch"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValidationError("triplet margin must be positive")


@dataclass(frozen=True)
class BatchSpec:
    classes_per_batch: int = 12  # N
    samples_per_class: int = 6  # M
    unknowns_per_batch: int = 6  # N'

    def __post_init__(self):
        if self.classes_per_batch < 2 or self.samples_per_class < 2 or self.unknowns_per_batch < 1:
            raise ValidationError(f"invalid batch shape {self}")

    @property
    def prototypical_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class

    @property
    def ap_fc_size(self) -> int:
        return (self.classes_per_batch - 1) + self.unknowns_per_batch


class AngularScale(nn.Module):
    """Learnable w, b of the scaled cosine w * cos + b; w is kept positive."""

    def __init__(self, w: float = 10.0, b: float = -5.0, dtype=np.float32):
        self.w = nn.Parameter(np.array(w, dtype=dtype))
        self.b = nn.Parameter(np.array(b, dtype=dtype))

    def clamp(self) -> None:
        np.maximum(self.w.values, SCALE_FLOOR, out=self.w.values)


class ApFcHead(nn.Module):
    """One learnable anchor row per target class (10 words + silence)."""

    def __init__(self, embed_dim: int, seed: int = 0, n_targets: int = N_TARGET_CLASSES, dtype=np.float32):
        rng = np.random.default_rng(seed + 2)
        self.anchors = nn.Parameter(nn.uniform_init(rng, (n_targets, embed_dim), embed_dim, dtype))


# --- losses ----------------------------------------------------------------


def mine_triplets(distances: np.ndarray, classes: np.ndarray, target_only: bool):
    """Per anchor: farthest same-class sample and closest different-class sample.

    Returns:
        tuple: (anchors, positives, negatives) index arrays

    Raises:
        DegenerateBatch: an anchor class has fewer than two samples, or no negatives exist
    """
    anchor_classes = [c for c in np.unique(classes) if not target_only or CLASS_ORDER[c].is_target]
    if not anchor_classes:
        raise DegenerateBatch("no anchor class in batch")
    anchors, positives, negatives = [], [], []
    for c in anchor_classes:
        members = np.flatnonzero(classes == c)
        others = np.flatnonzero(classes != c)
        if len(members) < 2:
            raise DegenerateBatch(f"class {CLASS_ORDER[c].name} has {len(members)} sample(s)")
        if len(others) == 0:
            raise DegenerateBatch("batch holds a single class, no negatives")
        for a in members:
            same = members[members != a]
            anchors.append(a)
            positives.append(same[np.argmax(distances[a, same])])
            negatives.append(others[np.argmin(distances[a, others])])
    return np.array(anchors), np.array(positives), np.array(negatives)


def triplet_loss(e: EmbeddingBatch, cfg: TripletConfig = TripletConfig(), target_only: bool = False) -> nn.Tensor:
    """Sum over anchors of max(0, d(a, p) - d(a, n) + margin), Euclidean distances.

    With ``target_only`` anchors come from target classes only; unknown
    samples still serve as negatives.
    """
    dist = nn.pairwise_distance(e.vectors, e.vectors)
    a, p, n = mine_triplets(dist.values, e.class_indices, target_only)
    gap = nn.sub(nn.gather(dist, a, p), nn.gather(dist, a, n))
    return nn.sum_all(nn.relu(nn.add_constant(gap, cfg.margin)))


def prototypical_groups(e: EmbeddingBatch, n_classes: int, n_per_class: int):
    """Validate class-major N x M layout; return (query rows, support groups, block labels)."""
    if n_per_class < 2:
        raise DegenerateBatch("prototypical batches need M >= 2")
    if len(e.labels) != n_classes * n_per_class:
        raise DegenerateBatch(f"expected {n_classes}x{n_per_class} samples, got {len(e.labels)}")
    queries, groups, block_labels = [], [], []
    for j in range(n_classes):
        rows = list(range(j * n_per_class, (j + 1) * n_per_class))
        block = {e.labels[r] for r in rows}
        if len(block) != 1:
            raise DegenerateBatch(f"block {j} mixes classes {sorted(b.name for b in block)}")
        block_labels.append(e.labels[rows[0]])
        queries.append(rows[-1])
        groups.append(rows[:-1])
    if len(set(block_labels)) != n_classes:
        raise DegenerateBatch("a class occupies more than one block")
    return queries, groups, block_labels


def angular_prototypical_loss(
    e: EmbeddingBatch,
    scale: AngularScale,
    n_classes: int,
    n_per_class: int,
    target_only: bool = False,
) -> nn.Tensor:
    """-1/N sum_j log softmax_k(w cos(query_j, c_k) + b)[j].

    The query of each class is its last sample and the centroid the mean of
    the other M-1. With ``target_only`` only target-class queries enter the
    sum while all N centroids stay in every denominator.
    """
    queries, groups, block_labels = prototypical_groups(e, n_classes, n_per_class)
    cos = nn.cosine_similarity(nn.take_rows(e.vectors, queries), nn.group_mean(e.vectors, groups))
    logits = nn.scale_shift(cos, scale.w, scale.b)
    mask = [label.is_target or not target_only for label in block_labels]
    if not any(mask):
        raise DegenerateBatch("no target class in batch")
    return nn.softmax_cross_entropy(logits, np.arange(n_classes), mask=mask, normalizer=n_classes)


def ap_fc_loss(
    targets: EmbeddingBatch,
    unknowns: EmbeddingBatch,
    head: ApFcHead,
    scale: AngularScale,
) -> nn.Tensor:
    """-1/(N-1) sum_k log(e^{S_kk} / (sum_j e^{S_jk} + sum_i e^{S_unknown_i,k})).

    S is the scaled cosine between each sample and each target anchor W_k.
    """
    n_targets = head.anchors.shape[0]
    target_idx = [label.index for label in targets.labels]
    if sorted(target_idx) != list(range(n_targets)):
        raise DegenerateBatch(f"AP-FC needs exactly one sample of each of the {n_targets} target classes")
    if len(unknowns.labels) == 0 or any(label != UNKNOWN for label in unknowns.labels):
        raise DegenerateBatch("AP-FC non-target part must hold only unknown samples")

    rows = nn.concat_rows(targets.vectors, unknowns.vectors)
    sims = nn.scale_shift(nn.cosine_similarity(rows, head.anchors), scale.w, scale.b)
    # row of anchor k's own sample, per anchor
    own_row = np.empty(n_targets, dtype=np.int64)
    own_row[target_idx] = np.arange(n_targets)
    return nn.softmax_cross_entropy(nn.transpose(sims), own_row)


# --- objectives ------------------------------------------------------------


class Objective(nn.Module):
    """A loss plus whatever learnable parameters it owns."""

    name: LossName
    sampler: SamplerKind = SamplerKind.PROTOTYPICAL
    similarity: Optional[str] = None  # nearest-centroid similarity used for validation

    def loss(self, e: EmbeddingBatch) -> nn.Tensor:
        raise NotImplementedError

    def after_step(self) -> None:
        """Re-impose parameter constraints after an optimizer step."""


class CrossEntropyObjective(Objective):
    name = LossName.CE
    sampler = SamplerKind.UNIFORM

    def __init__(self, embed_dim: int, seed: int = 0, dtype=np.float32):
        self.head = ClassifierHead(embed_dim, seed, dtype)

    def loss(self, e: EmbeddingBatch) -> nn.Tensor:
        return nn.softmax_cross_entropy(self.head(e), e.class_indices)


class TripletObjective(Objective):
    similarity = "neg_euclidean"

    def __init__(self, target_only: bool, cfg: TripletConfig = TripletConfig()):
        self.name = LossName.TRIPLET_TARGET_ONLY if target_only else LossName.TRIPLET
        self.cfg = cfg

    def loss(self, e: EmbeddingBatch) -> nn.Tensor:
        return triplet_loss(e, self.cfg, self.name.target_only)


class AngularPrototypicalObjective(Objective):
    similarity = "cosine"

    def __init__(self, target_only: bool, spec: BatchSpec, scale: Optional[AngularScale] = None, dtype=np.float32):
        self.name = LossName.AP_TARGET_ONLY if target_only else LossName.AP
        self.spec = spec
        self.scale = scale or AngularScale(dtype=dtype)

    def loss(self, e: EmbeddingBatch) -> nn.Tensor:
        return angular_prototypical_loss(
            e, self.scale, self.spec.classes_per_batch, self.spec.samples_per_class, self.name.target_only
        )

    def after_step(self) -> None:
        self.scale.clamp()


class ApFcObjective(Objective):
    name = LossName.AP_FC
    sampler = SamplerKind.AP_FC
    similarity = "cosine"

    def __init__(self, embed_dim: int, seed: int = 0, scale: Optional[AngularScale] = None, dtype=np.float32):
        self.head = ApFcHead(embed_dim, seed, dtype=dtype)
        self.scale = scale or AngularScale(dtype=dtype)

    def loss(self, e: EmbeddingBatch) -> nn.Tensor:
        n = self.head.anchors.shape[0]
        targets = EmbeddingBatch(nn.take_rows(e.vectors, range(n)), e.labels[:n])
        rest = range(n, len(e.labels))
        unknowns = EmbeddingBatch(nn.take_rows(e.vectors, rest), e.labels[n:])
        return ap_fc_loss(targets, unknowns, self.head, self.scale)

    def after_step(self) -> None:
        self.scale.clamp()


def build_objective(
    name: LossName,
    embed_dim: int,
    spec: BatchSpec = BatchSpec(),
    margin: float = 1.0,
    scale_init: tuple = (10.0, -5.0),
    seed: int = 0,
    dtype=np.float32,
) -> Objective:
    name = LossName(name)
    if name is LossName.CE:
        return CrossEntropyObjective(embed_dim, seed, dtype)
    if name in (LossName.TRIPLET, LossName.TRIPLET_TARGET_ONLY):
        return TripletObjective(name.target_only, TripletConfig(margin=margin))
    scale = AngularScale(*scale_init, dtype=dtype)
    if name in (LossName.AP, LossName.AP_TARGET_ONLY):
        return AngularPrototypicalObjective(name.target_only, spec, scale, dtype)
    return ApFcObjective(embed_dim, seed, scale, dtype)


# --- batch sampling --------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    clip_ids: List[str]
    features: np.ndarray  # (B, 40, 49)
    labels: List[ClassLabel]


def _by_class(entries: Sequence[ManifestEntry]) -> Dict[ClassLabel, List[ManifestEntry]]:
    groups: Dict[ClassLabel, List[ManifestEntry]] = {}
    for e in sorted(entries, key=lambda e: e.clip_id):
        groups.setdefault(e.label, []).append(e)
    return groups


def _pick(pool: List[ManifestEntry], k: int, rng: np.random.Generator, label: ClassLabel) -> List[ManifestEntry]:
    if len(pool) < k:
        raise InsufficientClassSamples(f"class {label.name} has {len(pool)} clips, batch needs {k}")
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]


def sample_batch(
    entries: Sequence[ManifestEntry],
    spec: BatchSpec,
    sampler: SamplerKind,
    rng: np.random.Generator,
    features: Mapping[str, np.ndarray],
) -> Batch:
    """Draw one training batch.

    Prototypical batches are class-major N x M; AP-FC batches hold one clip
    per target class (in class order) followed by N' unknown clips; the
    cross-entropy baseline draws N*M clips uniformly.

    Raises:
        InsufficientClassSamples: a needed class has too few clips
    """
    groups = _by_class(entries)
    chosen: List[ManifestEntry] = []
    if sampler is SamplerKind.PROTOTYPICAL:
        present = [c for c in CLASS_ORDER if c in groups]
        if len(present) < spec.classes_per_batch:
            raise InsufficientClassSamples(
                f"{len(present)} classes available, batch needs {spec.classes_per_batch}"
            )
        if len(present) > spec.classes_per_batch:
            keep = sorted(rng.choice(len(present), size=spec.classes_per_batch, replace=False))
            present = [present[i] for i in keep]
        for label in present:
            chosen.extend(_pick(groups[label], spec.samples_per_class, rng, label))
    elif sampler is SamplerKind.AP_FC:
        for label in TARGET_CLASSES:
            chosen.extend(_pick(groups.get(label, []), 1, rng, label))
        chosen.extend(_pick(groups.get(UNKNOWN, []), spec.unknowns_per_batch, rng, UNKNOWN))
    else:
        pool = sorted(entries, key=lambda e: e.clip_id)
        size = spec.prototypical_size
        if len(pool) < size:
            raise InsufficientClassSamples(f"{len(pool)} clips available, batch needs {size}")
        chosen = [pool[i] for i in rng.choice(len(pool), size=size, replace=False)]

    return Batch(
        clip_ids=[e.clip_id for e in chosen],
        features=np.stack([features[e.clip_id] for e in chosen]),
        labels=[e.label for e in chosen],
    )


def batch_size_for(sampler: SamplerKind, spec: BatchSpec) -> int:
    return spec.ap_fc_size if sampler is SamplerKind.AP_FC else spec.prototypical_size

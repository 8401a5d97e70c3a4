import math

import numpy as np
import pytest
from scipy.special import log_softmax

from kws import nn_core as nn
from kws.errors import DegenerateBatch, InsufficientClassSamples, ValidationError
from kws.losses import (
    AngularPrototypicalObjective,
    AngularScale,
    ApFcHead,
    ApFcObjective,
    BatchSpec,
    CrossEntropyObjective,
    LossName,
    SamplerKind,
    TripletConfig,
    TripletObjective,
    angular_prototypical_loss,
    ap_fc_loss,
    batch_size_for,
    build_objective,
    sample_batch,
    triplet_loss,
)
from kws.model_res15 import EmbeddingBatch
from models import CLASS_ORDER, SILENCE, TARGET_CLASSES, UNKNOWN, Split
from tests.gradcheck import check_gradients

YES, NO = CLASS_ORDER[0], CLASS_ORDER[1]


def batch(values, labels):
    return EmbeddingBatch(vectors=nn.Tensor(np.asarray(values, dtype=np.float64), requires_grad=True), labels=labels)


def block_labels(classes, m):
    return [c for c in classes for _ in range(m)]


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def scale(w=10.0, b=-5.0):
    return AngularScale(w, b, dtype=np.float64)


# --- angular prototypical ----------------------------------------------------


def ap_oracle(x, n, m, w, b, mask):
    blocks = x.reshape(n, m, -1)
    queries, centroids = blocks[:, -1], blocks[:, :-1].mean(axis=1)
    logits = w * unit(queries) @ unit(centroids).T + b
    terms = -np.diag(log_softmax(logits, axis=1))
    return terms[mask].sum() / n


@pytest.mark.parametrize("target_only", [False, True])
def test_angular_prototypical_matches_oracle(target_only):
    n, m = 4, 3
    classes = [YES, NO, SILENCE, UNKNOWN]
    x = np.random.default_rng(0).standard_normal((n * m, 5))
    got = angular_prototypical_loss(batch(x, block_labels(classes, m)), scale(3.0, 0.5), n, m, target_only)
    mask = np.array([c.is_target or not target_only for c in classes])
    assert got.item() == pytest.approx(ap_oracle(x, n, m, 3.0, 0.5, mask), rel=1e-10)


def test_angular_prototypical_two_class_closed_form():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    e = batch([e1, e1, e2, e2], [YES, YES, NO, NO])
    got = angular_prototypical_loss(e, scale(2.0, 0.0), 2, 2)
    assert got.item() == pytest.approx(math.log(1 + math.exp(-2)), rel=1e-12)


def test_target_only_keeps_unknown_in_the_denominator():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    e = batch([e1, e1, e2, e2], [YES, YES, UNKNOWN, UNKNOWN])
    got = angular_prototypical_loss(e, scale(2.0, 0.0), 2, 2, target_only=True)
    assert got.item() == pytest.approx(0.5 * math.log(1 + math.exp(-2)), rel=1e-12)


def test_angular_prototypical_of_identical_embeddings_is_log_n():
    x = np.tile([0.3, -1.0, 2.0], (12 * 2, 1))
    got = angular_prototypical_loss(batch(x, block_labels(CLASS_ORDER, 2)), scale(), 12, 2)
    assert got.item() == pytest.approx(math.log(12), rel=1e-12)


def test_angular_losses_ignore_embedding_scale():
    x = np.random.default_rng(1).standard_normal((6, 4))
    labels = block_labels([YES, NO, UNKNOWN], 2)
    a = angular_prototypical_loss(batch(x, labels), scale(), 3, 2).item()
    b = angular_prototypical_loss(batch(7.5 * x, labels), scale(), 3, 2).item()
    assert a == pytest.approx(b, rel=1e-10)


def test_prototypical_layout_is_checked():
    x = np.zeros((6, 3))
    with pytest.raises(DegenerateBatch):
        angular_prototypical_loss(batch(x, [YES, NO, YES, NO, UNKNOWN, UNKNOWN]), scale(), 3, 2)
    with pytest.raises(DegenerateBatch):
        angular_prototypical_loss(batch(x, block_labels([YES, YES, NO], 2)), scale(), 3, 2)
    with pytest.raises(DegenerateBatch):
        angular_prototypical_loss(batch(x, block_labels([YES, NO, UNKNOWN], 2)), scale(), 2, 3)


# --- AP-FC -------------------------------------------------------------------


def ap_fc_oracle(targets, unknowns, anchors, w, b):
    rows = np.concatenate([targets, unknowns])
    sims = w * unit(rows) @ unit(anchors).T + b  # (rows, anchors)
    logp = log_softmax(sims, axis=0)
    return -np.mean([logp[k, k] for k in range(anchors.shape[0])])


def ap_fc_batch(rng, n_unknown=6, d=5):
    targets = batch(rng.standard_normal((11, d)), list(TARGET_CLASSES))
    unknowns = batch(rng.standard_normal((n_unknown, d)), [UNKNOWN] * n_unknown)
    return targets, unknowns


def test_ap_fc_matches_oracle():
    rng = np.random.default_rng(2)
    targets, unknowns = ap_fc_batch(rng)
    head = ApFcHead(5, seed=0, dtype=np.float64)
    got = ap_fc_loss(targets, unknowns, head, scale(4.0, -1.0))
    expected = ap_fc_oracle(targets.vectors.values, unknowns.vectors.values, head.anchors.values, 4.0, -1.0)
    assert got.item() == pytest.approx(expected, rel=1e-10)


def test_ap_fc_of_identical_vectors_is_log_17():
    head = ApFcHead(3, dtype=np.float64)
    head.anchors.values[:] = [1.0, 2.0, 3.0]
    targets = batch(np.tile([2.0, 4.0, 6.0], (11, 1)), list(TARGET_CLASSES))
    unknowns = batch(np.tile([1.0, 2.0, 3.0], (6, 1)), [UNKNOWN] * 6)
    assert ap_fc_loss(targets, unknowns, head, scale()).item() == pytest.approx(math.log(17), rel=1e-12)


def test_ap_fc_gradients_reach_anchors_and_scale():
    targets, unknowns = ap_fc_batch(np.random.default_rng(3))
    head, s = ApFcHead(5, dtype=np.float64), scale()
    ap_fc_loss(targets, unknowns, head, s).backward()
    assert np.abs(head.anchors.grad).sum() > 0
    assert s.w.grad is not None and s.b.grad is not None
    assert np.abs(targets.vectors.grad).sum() > 0


def test_ap_fc_batch_shape_is_checked():
    targets, unknowns = ap_fc_batch(np.random.default_rng(4))
    head = ApFcHead(5, dtype=np.float64)
    short = batch(targets.vectors.values[:10], list(TARGET_CLASSES[:10]))
    with pytest.raises(DegenerateBatch):
        ap_fc_loss(short, unknowns, head, scale())
    with pytest.raises(DegenerateBatch):
        ap_fc_loss(targets, batch(unknowns.vectors.values, [YES] * 6), head, scale())


def test_ap_fc_objective_splits_the_batch():
    rng = np.random.default_rng(5)
    targets, unknowns = ap_fc_batch(rng)
    objective = ApFcObjective(5, dtype=np.float64)
    combined = batch(
        np.concatenate([targets.vectors.values, unknowns.vectors.values]),
        list(targets.labels) + list(unknowns.labels),
    )
    direct = ap_fc_loss(targets, unknowns, objective.head, objective.scale).item()
    assert objective.loss(combined).item() == pytest.approx(direct, rel=1e-12)


# --- triplet -----------------------------------------------------------------


def triplet_oracle(x, classes, margin, target_only):
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    total = 0.0
    for a in range(len(x)):
        if target_only and not CLASS_ORDER[classes[a]].is_target:
            continue
        same = [p for p in range(len(x)) if classes[p] == classes[a] and p != a]
        other = [q for q in range(len(x)) if classes[q] != classes[a]]
        total += max(0.0, max(d[a, same]) - min(d[a, other]) + margin)
    return total


@pytest.mark.parametrize("target_only", [False, True])
def test_triplet_matches_oracle(target_only):
    labels = block_labels([YES, NO, SILENCE, UNKNOWN], 3)
    x = np.random.default_rng(6).standard_normal((12, 4))
    got = triplet_loss(batch(x, labels), TripletConfig(margin=0.8), target_only)
    classes = [label.index for label in labels]
    assert got.item() == pytest.approx(triplet_oracle(x, classes, 0.8, target_only), rel=1e-10)


def test_triplet_of_identical_embeddings_is_margin_per_anchor():
    labels = block_labels([YES, NO, UNKNOWN], 4)
    x = np.ones((12, 3))
    assert triplet_loss(batch(x, labels), TripletConfig(margin=1.0)).item() == pytest.approx(12.0)
    assert triplet_loss(batch(x, labels), TripletConfig(margin=1.0), target_only=True).item() == pytest.approx(8.0)


def test_triplet_needs_two_per_class_and_a_negative():
    with pytest.raises(DegenerateBatch):
        triplet_loss(batch(np.zeros((3, 2)), [YES, YES, NO]))
    with pytest.raises(DegenerateBatch):
        triplet_loss(batch(np.zeros((2, 2)), [YES, YES]))


def test_triplet_margin_must_be_positive():
    with pytest.raises(ValidationError):
        TripletConfig(margin=0.0)


def test_triplet_target_only_leaves_unpicked_unknowns_untouched():
    # wide margin keeps every hinge active; the unknowns sit far from both words
    x = np.array(
        [[0.0, 0.0], [0.3, 0.0], [0.0, 0.4], [5.0, 0.0], [5.2, 0.1], [5.0, 0.5], [50.0, 50.0], [51.0, 50.0]]
    )
    labels = [YES] * 3 + [NO] * 3 + [UNKNOWN] * 2
    cfg = TripletConfig(margin=100.0)

    target_only = batch(x, labels)
    triplet_loss(target_only, cfg, target_only=True).backward()
    np.testing.assert_array_equal(target_only.vectors.grad[6:], 0.0)
    assert np.abs(target_only.vectors.grad[:6]).sum() > 0

    full = batch(x, labels)
    triplet_loss(full, cfg).backward()
    assert np.abs(full.vectors.grad[6:]).sum() > 0


def test_target_only_prototypical_still_moves_the_unknown_centroid():
    labels = block_labels([YES, NO, UNKNOWN], 3)
    e = batch(np.random.default_rng(8).standard_normal((9, 4)), labels)
    angular_prototypical_loss(e, scale(), 3, 3, target_only=True).backward()
    assert np.abs(e.vectors.grad[6:8]).sum() > 0
    np.testing.assert_array_equal(e.vectors.grad[8], 0.0)


def test_prototypical_loss_falls_as_the_own_class_similarity_rises():
    # query of YES moves toward its centroid e1 while its cosine to e2 stays 0.3
    e1, e2 = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]
    losses = []
    for along in np.linspace(0.0, 0.95, 8):
        query = [along, 0.3, math.sqrt(0.91 - along**2)]
        e = batch([e1, query, e2, e2], [YES, YES, NO, NO])
        losses.append(angular_prototypical_loss(e, scale(), 2, 2).item())
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))


# --- finite-difference gradients ---------------------------------------------


def scale_of(w, b):
    s = AngularScale(dtype=np.float64)
    s.w, s.b = w, b
    return s


def head_of(anchors):
    head = ApFcHead(anchors.shape[1], dtype=np.float64)
    head.anchors = anchors
    return head


@pytest.mark.parametrize("target_only", [False, True])
@pytest.mark.parametrize("variant", range(5))
def test_triplet_gradients(variant, target_only):
    rng = np.random.default_rng(variant)
    labels = block_labels([YES, NO, SILENCE, UNKNOWN], 2 + variant % 2)
    x = rng.standard_normal((len(labels), 2 + variant))
    cfg = TripletConfig(margin=5.0)

    def fn(v):
        return triplet_loss(EmbeddingBatch(v, labels), cfg, target_only)

    check_gradients(fn, [x], seed=variant, rtol=1e-4)


@pytest.mark.parametrize("target_only", [False, True])
@pytest.mark.parametrize("variant", range(5))
def test_angular_prototypical_gradients(variant, target_only):
    rng = np.random.default_rng(10 + variant)
    n, m = 3 + variant % 2, 2 + variant % 3
    labels = block_labels([YES, NO, UNKNOWN, SILENCE][:n], m)

    def fn(v, w, b):
        return angular_prototypical_loss(EmbeddingBatch(v, labels), scale_of(w, b), n, m, target_only)

    inputs = [rng.standard_normal((n * m, 3 + variant)), np.array(2.5 + variant), np.array(-0.5)]
    check_gradients(fn, inputs, seed=variant, rtol=1e-4)


@pytest.mark.parametrize("variant", range(5))
def test_ap_fc_gradients(variant):
    rng = np.random.default_rng(20 + variant)
    d, n_unknown = 3 + variant, 1 + variant
    target_labels = list(TARGET_CLASSES)

    def fn(t, u, anchors, w, b):
        targets = EmbeddingBatch(t, target_labels)
        unknowns = EmbeddingBatch(u, [UNKNOWN] * n_unknown)
        return ap_fc_loss(targets, unknowns, head_of(anchors), scale_of(w, b))

    inputs = [
        rng.standard_normal((len(target_labels), d)),
        rng.standard_normal((n_unknown, d)),
        rng.standard_normal((len(target_labels), d)),
        np.array(3.0),
        np.array(-1.0 + 0.5 * variant),
    ]
    check_gradients(fn, inputs, seed=variant, rtol=1e-4)


# --- objectives and samplers -------------------------------------------------


def test_build_objective_pairs_names_with_samplers():
    spec = BatchSpec()
    built = {name: build_objective(name, 8, spec) for name in LossName}
    assert isinstance(built[LossName.CE], CrossEntropyObjective)
    assert isinstance(built[LossName.TRIPLET_TARGET_ONLY], TripletObjective)
    assert isinstance(built[LossName.AP], AngularPrototypicalObjective)
    assert isinstance(built[LossName.AP_FC], ApFcObjective)
    assert {n: o.name for n, o in built.items()} == {n: n for n in LossName}
    assert built[LossName.CE].sampler is SamplerKind.UNIFORM
    assert built[LossName.AP_FC].sampler is SamplerKind.AP_FC
    assert built[LossName.TRIPLET].sampler is SamplerKind.PROTOTYPICAL


def test_scale_clamp_keeps_w_positive():
    s = scale()
    s.w.values[...] = -3.0
    s.clamp()
    assert float(s.w.values) == pytest.approx(1e-6)


@pytest.mark.parametrize("sampler,size", [(SamplerKind.PROTOTYPICAL, 72), (SamplerKind.AP_FC, 17), (SamplerKind.UNIFORM, 72)])
def test_sampler_batch_sizes(manifest, features, sampler, size):
    spec = BatchSpec()
    b = sample_batch(manifest.in_split(Split.TRAIN), spec, sampler, np.random.default_rng(0), features)
    assert len(b.clip_ids) == batch_size_for(sampler, spec) == size
    assert b.features.shape == (size, 40, 49)
    assert len(set(b.clip_ids)) == size


def test_prototypical_batches_are_class_major(manifest, features):
    b = sample_batch(manifest.in_split(Split.TRAIN), BatchSpec(), SamplerKind.PROTOTYPICAL, np.random.default_rng(1), features)
    assert [b.labels[j * 6] for j in range(12)] == list(CLASS_ORDER)
    assert all(len(set(b.labels[j * 6 : (j + 1) * 6])) == 1 for j in range(12))


def test_ap_fc_batches_hold_targets_in_order_then_unknowns(manifest, features):
    b = sample_batch(manifest.in_split(Split.TRAIN), BatchSpec(), SamplerKind.AP_FC, np.random.default_rng(2), features)
    assert b.labels[:11] == list(TARGET_CLASSES)
    assert b.labels[11:] == [UNKNOWN] * 6


def test_sampling_is_deterministic_under_seed(manifest, features):
    train = manifest.in_split(Split.TRAIN)
    draws = [sample_batch(train, BatchSpec(), SamplerKind.PROTOTYPICAL, np.random.default_rng(9), features) for _ in range(2)]
    assert draws[0].clip_ids == draws[1].clip_ids


def test_sampler_reports_short_classes(manifest, features):
    train = manifest.in_split(Split.TRAIN)
    with pytest.raises(InsufficientClassSamples):
        sample_batch(train, BatchSpec(samples_per_class=7), SamplerKind.PROTOTYPICAL, np.random.default_rng(0), features)
    with pytest.raises(InsufficientClassSamples):
        sample_batch(train, BatchSpec(unknowns_per_batch=50), SamplerKind.AP_FC, np.random.default_rng(0), features)


def test_prototypical_sampler_subsets_classes(manifest, features):
    spec = BatchSpec(classes_per_batch=4, samples_per_class=3)
    b = sample_batch(manifest.in_split(Split.TRAIN), spec, SamplerKind.PROTOTYPICAL, np.random.default_rng(3), features)
    blocks = [b.labels[j * 3] for j in range(4)]
    assert len(set(blocks)) == 4
    assert blocks == sorted(blocks, key=lambda c: c.index)

"""Decision layers over frozen embeddings.

Two back-ends: a centroid table (one mean embedding per class, classify by
the most similar centroid) and a one-vs-rest RBF SVM ensemble trained with
SMO whose margins are turned into probabilities by Platt scaling.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, softmax
from tqdm import tqdm

from kws.errors import DegenerateLabels, MissingClass, NotConverged
from models import CLASS_ORDER, NUM_CLASSES, UNKNOWN_INDEX, ClassLabel, Decision
from utils.binary import read_array, read_header, read_u32, write_array, write_header, write_u32

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
SMO_TOLERANCE = 1e-3
TAU = 1e-12
PLATT_FOLDS = 3
DEFAULT_GRID = {"C": (0.1, 1.0, 10.0), "gamma": ("scale", 0.1, 1.0)}

CENTROID_MAGIC = b"KWSC"
SVM_MAGIC = b"KWSV"
FORMAT_VERSION = 1


class Similarity(str, Enum):
    COSINE = "cosine"
    NEG_EUCLIDEAN = "neg_euclidean"


# --- centroids -------------------------------------------------------------


@dataclass(frozen=True)
class CentroidTable:
    centroids: np.ndarray  # (NUM_CLASSES, D) in CLASS_ORDER, zero rows for absent classes
    present: np.ndarray  # (NUM_CLASSES,) bool
    similarity: Similarity

    def centroid(self, label: ClassLabel) -> np.ndarray:
        return self.centroids[label.index]


def fit_centroids(
    embeddings: np.ndarray,
    labels: Sequence[ClassLabel],
    similarity: Similarity,
    classes: Sequence[ClassLabel] = CLASS_ORDER,
) -> CentroidTable:
    """Arithmetic mean embedding per class.

    Raises:
        MissingClass: a class listed in ``classes`` has no embedding
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    idx = np.array([label.index for label in labels])
    centroids = np.zeros((NUM_CLASSES, embeddings.shape[1]))
    present = np.zeros(NUM_CLASSES, dtype=bool)
    for label in classes:
        rows = embeddings[idx == label.index]
        if len(rows) == 0:
            raise MissingClass(f"no training embedding for class {label.name}")
        centroids[label.index] = rows.sum(axis=0) / len(rows)
        present[label.index] = True
    return CentroidTable(centroids=centroids, present=present, similarity=Similarity(similarity))


def _similarities(x: np.ndarray, table: CentroidTable) -> np.ndarray:
    """(n, NUM_CLASSES) similarity of each row to each centroid; absent classes get -inf."""
    if table.similarity is Similarity.COSINE:
        xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_FLOOR)
        cn = table.centroids / np.maximum(np.linalg.norm(table.centroids, axis=1, keepdims=True), NORM_FLOOR)
        scores = xn @ cn.T
    else:
        scores = -cdist(x, table.centroids, metric="euclidean")
    scores[:, ~table.present] = -np.inf
    return scores


def centroid_classify(e: np.ndarray, table: CentroidTable) -> Decision:
    return centroid_classify_batch(np.asarray(e, dtype=np.float64)[None, :], table)[0]


def centroid_classify_batch(x: np.ndarray, table: CentroidTable) -> List[Decision]:
    scores = _similarities(np.asarray(x, dtype=np.float64), table)
    return [Decision.from_scores(row) for row in scores]


def softmax_classify_batch(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> List[Decision]:
    """Decisions of the cross-entropy baseline's own linear classifier."""
    logits = np.asarray(x, dtype=np.float64) @ np.asarray(weight, dtype=np.float64).T + bias
    return [Decision.from_scores(row) for row in softmax(logits, axis=1)]


# --- SMO -------------------------------------------------------------------


def rbf_kernel(x: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(x, y, metric="sqeuclidean"))


def resolve_gamma(gamma: Union[str, float], x: np.ndarray) -> float:
    """'scale' means 1 / (D * variance of all embedding components)."""
    if gamma == "scale":
        var = float(np.var(x))
        return 1.0 / (x.shape[1] * var) if var > 0 else 1.0
    return float(gamma)


@dataclass
class SmoResult:
    alpha: np.ndarray
    bias: float
    gap: float  # max KKT violation m(alpha) - M(alpha) at exit
    iterations: int
    objective: float  # dual objective 1/2 a'Qa - e'a


def smo_solve(
    kernel: np.ndarray,
    y: np.ndarray,
    C: float,
    tol: float = SMO_TOLERANCE,
    max_iter: Optional[int] = None,
) -> SmoResult:
    """Soft-margin SVM dual by SMO with second-order working-set selection.

    Minimises 1/2 a'Qa - e'a with Q_ij = y_i y_j K_ij, 0 <= a_i <= C,
    y'a = 0; stops once the maximal violating pair gap drops below ``tol``.

    Raises:
        NotConverged: ``max_iter`` updates did not reach the tolerance
    """
    n = len(y)
    y = y.astype(np.float64)
    max_iter = max_iter or max(100_000, 100 * n)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    diag = np.diag(kernel).copy()

    for it in range(max_iter + 1):
        minus_yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.flatnonzero(up)[np.argmax(minus_yg[up])])
        m_val = minus_yg[i]
        big_m = minus_yg[low].min()
        gap = m_val - big_m
        if gap < tol:
            break
        if it == max_iter:
            raise NotConverged(f"SMO stopped after {max_iter} iterations with gap {gap:.3g}")

        cand = low & (minus_yg < m_val)
        b = m_val - minus_yg[cand]
        a = diag[i] + diag[cand] - 2.0 * kernel[i, cand]
        a = np.where(a > 0, a, TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])

        old_i, old_j = alpha[i], alpha[j]
        q_ij = y[i] * y[j] * kernel[i, j]
        if y[i] != y[j]:
            quad = diag[i] + diag[j] + 2.0 * q_ij
            quad = quad if quad > 0 else TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            quad = diag[i] + diag[j] - 2.0 * q_ij
            quad = quad if quad > 0 else TAU
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total

        d_i, d_j = alpha[i] - old_i, alpha[j] - old_j
        grad += y * (y[i] * d_i * kernel[i] + y[j] * d_j * kernel[j])

    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(yg[free].mean())
    else:
        at_upper = alpha >= C
        ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (~at_upper & (y < 0))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2) if np.isfinite(ub + lb) else 0.0
    objective = float(0.5 * alpha @ (grad - 1.0))
    return SmoResult(alpha=alpha, bias=-rho, gap=float(gap), iterations=it, objective=objective)


# --- Platt scaling ---------------------------------------------------------


def platt_fit(decision: np.ndarray, y: np.ndarray, max_iter: int = 100) -> Tuple[float, float]:
    """Fit P(y=1|f) = 1 / (1 + exp(A f + B)) by Newton's method with backtracking."""
    decision = np.asarray(decision, dtype=np.float64)
    pos = float(np.sum(y > 0))
    neg = float(len(y) - pos)
    target = np.where(y > 0, (pos + 1.0) / (pos + 2.0), 1.0 / (neg + 2.0))
    A, B = 0.0, float(np.log((neg + 1.0) / (pos + 1.0)))

    def objective(a, b):
        z = decision * a + b
        return float(np.sum(target * z + np.logaddexp(0.0, -z)))

    fval = objective(A, B)
    for _ in range(max_iter):
        z = decision * A + B
        p = expit(-z)
        d2 = p * (1.0 - p)
        h11 = np.sum(decision * decision * d2) + 1e-12
        h22 = np.sum(d2) + 1e-12
        h21 = np.sum(decision * d2)
        d1 = target - p
        g1 = np.sum(decision * d1)
        g2 = np.sum(d1)
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= 1e-10:
            new_a, new_b = A + step * dA, B + step * dB
            new_f = objective(new_a, new_b)
            if new_f < fval + 1e-4 * step * gd:
                A, B, fval = new_a, new_b, new_f
                break
            step /= 2.0
        else:
            logger.warning("Platt line search failed; keeping current sigmoid")
            break
    return float(A), float(B)


def platt_probability(decision: np.ndarray, A: float, B: float) -> np.ndarray:
    return expit(-(decision * A + B))


# --- one-vs-rest SVM -------------------------------------------------------


@dataclass
class BinarySvm:
    class_index: int
    support_vectors: np.ndarray  # (n_sv, D)
    dual_coef: np.ndarray  # alpha_i * y_i, (n_sv,)
    bias: float
    platt_a: float = 0.0
    platt_b: float = 0.0
    kkt_gap: float = 0.0

    def decision(self, x: np.ndarray, gamma: float) -> np.ndarray:
        if len(self.support_vectors) == 0:
            return np.full(len(x), self.bias)
        return rbf_kernel(x, self.support_vectors, gamma) @ self.dual_coef + self.bias


@dataclass
class SvmModel:
    problems: List[BinarySvm]
    gamma: float
    C: float
    include_unknown: bool


def _binary_labels(idx: np.ndarray, class_index: int) -> np.ndarray:
    return np.where(idx == class_index, 1.0, -1.0)


def _stratified_folds(y: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    assignment = np.empty(len(y), dtype=np.int64)
    for sign in (-1.0, 1.0):
        members = np.flatnonzero(y == sign)
        assignment[rng.permutation(members)] = np.arange(len(members)) % folds
    return assignment


def _cross_validated_decisions(kernel, y, C, tol, max_iter, folds, rng) -> np.ndarray:
    """Held-out decision values from ``folds``-fold cross-validation."""
    assignment = _stratified_folds(y, folds, rng)
    values = np.empty(len(y))
    for fold in range(folds):
        held = assignment == fold
        fit = ~held
        if not held.any():
            continue
        if len(np.unique(y[fit])) < 2:
            # too few samples of one side to cross-validate; fall back to in-sample values
            full = smo_solve(kernel, y, C, tol, max_iter)
            return kernel @ (full.alpha * y) + full.bias
        res = smo_solve(kernel[np.ix_(fit, fit)], y[fit], C, tol, max_iter)
        values[held] = kernel[np.ix_(held, fit)] @ (res.alpha * y[fit]) + res.bias
    return values


def fit_svm(
    embeddings: np.ndarray,
    labels: Sequence[ClassLabel],
    C: float = 1.0,
    gamma: Union[str, float] = "scale",
    include_unknown_class: bool = True,
    tol: float = SMO_TOLERANCE,
    max_iter: Optional[int] = None,
    platt_folds: int = PLATT_FOLDS,
    seed: int = 0,
) -> SvmModel:
    """One-vs-rest RBF SVM with Platt-calibrated outputs.

    Args:
        embeddings (np.ndarray): (n, D) training embeddings
        labels (Sequence[ClassLabel]): class of each row
        C (float): soft-margin penalty
        gamma (Union[str, float]): RBF width, or "scale"
        include_unknown_class (bool): train an unknown-vs-rest problem too;
            otherwise unknown rows only ever act as negatives
        tol (float): SMO stopping gap
        platt_folds (int): cross-validation folds for the sigmoid fit

    Raises:
        DegenerateLabels: fewer than two classes, or a class with fewer than two rows
        NotConverged: SMO hit its iteration cap
    """
    x = np.asarray(embeddings, dtype=np.float64)
    idx = np.array([label.index for label in labels])
    classes, counts = np.unique(idx, return_counts=True)
    if len(classes) < 2:
        raise DegenerateLabels("SVM training needs at least two classes")
    if counts.min() < 2:
        raise DegenerateLabels(f"class {CLASS_ORDER[classes[np.argmin(counts)]].name} has a single sample")

    g = resolve_gamma(gamma, x)
    kernel = rbf_kernel(x, x, g)
    rng = np.random.default_rng(seed)
    problem_classes = [c for c in classes if include_unknown_class or c != UNKNOWN_INDEX]

    problems = []
    for c in tqdm(problem_classes, desc="Fitting one-vs-rest SVMs", leave=False):
        y = _binary_labels(idx, c)
        res = smo_solve(kernel, y, C, tol, max_iter)
        sv = res.alpha > 0
        cv_values = _cross_validated_decisions(kernel, y, C, tol, max_iter, platt_folds, rng)
        A, B = platt_fit(cv_values, y)
        problems.append(
            BinarySvm(
                class_index=int(c),
                support_vectors=x[sv],
                dual_coef=(res.alpha * y)[sv],
                bias=res.bias,
                platt_a=A,
                platt_b=B,
                kkt_gap=res.gap,
            )
        )
        logger.debug(f"{CLASS_ORDER[c].name}: {int(sv.sum())} support vectors, gap {res.gap:.2e}")
    logger.info(f"Fitted {len(problems)} SVMs (C={C}, gamma={g:.4g})")
    return SvmModel(problems=problems, gamma=g, C=float(C), include_unknown=include_unknown_class)


def svm_probabilities(x: np.ndarray, model: SvmModel) -> np.ndarray:
    """(n, NUM_CLASSES) Platt probabilities normalised to sum to one per row."""
    x = np.asarray(x, dtype=np.float64)
    probs = np.zeros((len(x), NUM_CLASSES))
    for p in model.problems:
        probs[:, p.class_index] = platt_probability(p.decision(x, model.gamma), p.platt_a, p.platt_b)
    if not model.include_unknown:
        probs[:, UNKNOWN_INDEX] = 1.0 - probs[:, :UNKNOWN_INDEX].max(axis=1)
    total = probs.sum(axis=1, keepdims=True)
    return np.where(total > 0, probs / np.where(total > 0, total, 1.0), 1.0 / NUM_CLASSES)


def svm_decision_values(x: np.ndarray, model: SvmModel) -> np.ndarray:
    """Raw margins, -inf for classes without a problem."""
    out = np.full((len(x), NUM_CLASSES), -np.inf)
    for p in model.problems:
        out[:, p.class_index] = p.decision(np.asarray(x, dtype=np.float64), model.gamma)
    return out


def svm_classify(e: np.ndarray, model: SvmModel) -> Decision:
    return svm_classify_batch(np.asarray(e, dtype=np.float64)[None, :], model)[0]


def svm_classify_batch(x: np.ndarray, model: SvmModel) -> List[Decision]:
    return [Decision.from_scores(row) for row in svm_probabilities(x, model)]


def stratified_subsample(labels: Sequence[ClassLabel], cap: int, seed: int) -> np.ndarray:
    """Row indices of at most ``cap`` rows, keeping class proportions."""
    n = len(labels)
    if n <= cap:
        return np.arange(n)
    idx = np.array([label.index for label in labels])
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(idx):
        members = np.flatnonzero(idx == c)
        quota = max(2, int(round(cap * len(members) / n)))
        keep.extend(rng.choice(members, size=min(quota, len(members)), replace=False))
    return np.array(sorted(keep))


def select_svm_hyperparameters(
    train_x: np.ndarray,
    train_labels: Sequence[ClassLabel],
    val_x: np.ndarray,
    val_labels: Sequence[ClassLabel],
    grid: Dict[str, Sequence] = DEFAULT_GRID,
    include_unknown_class: bool = True,
    seed: int = 0,
) -> Tuple[float, Union[str, float], List[dict]]:
    """Pick (C, gamma) by validation accuracy; every grid point is logged."""
    truth = np.array([label.index for label in val_labels])
    results = []
    for C in grid["C"]:
        for gamma in grid["gamma"]:
            model = fit_svm(train_x, train_labels, C, gamma, include_unknown_class, seed=seed)
            predicted = np.argmax(svm_probabilities(val_x, model), axis=1)
            acc = float(np.mean(predicted == truth))
            results.append({"C": C, "gamma": gamma, "val_accuracy": acc})
            logger.info(f"SVM grid C={C} gamma={gamma}: val_acc={acc:.4f}")
    best = max(results, key=lambda r: r["val_accuracy"])  # first best wins ties
    return best["C"], best["gamma"], results


# --- persistence -----------------------------------------------------------


def save_centroids(table: CentroidTable, path: Path) -> None:
    with open(path, "wb") as fh:
        write_header(fh, CENTROID_MAGIC, FORMAT_VERSION, NUM_CLASSES, table.centroids.shape[1])
        write_u32(fh, 0 if table.similarity is Similarity.COSINE else 1)
        write_array(fh, table.present.astype(np.float64), "<f8")
        write_array(fh, table.centroids, "<f8")


def load_centroids(path: Path) -> CentroidTable:
    with open(path, "rb") as fh:
        n, dim = read_header(fh, CENTROID_MAGIC, FORMAT_VERSION)
        (code,) = read_u32(fh)
        present = read_array(fh, n, "<f8") > 0.5
        centroids = read_array(fh, n * dim, "<f8").reshape(n, dim)
    similarity = Similarity.COSINE if code == 0 else Similarity.NEG_EUCLIDEAN
    return CentroidTable(centroids=centroids, present=present, similarity=similarity)


def save_svm(model: SvmModel, path: Path) -> None:
    dim = model.problems[0].support_vectors.shape[1] if model.problems else 0
    with open(path, "wb") as fh:
        write_header(fh, SVM_MAGIC, FORMAT_VERSION, len(model.problems), dim)
        write_array(fh, np.array([model.gamma, model.C, float(model.include_unknown)]), "<f8")
        for p in model.problems:
            write_u32(fh, p.class_index, len(p.dual_coef))
            write_array(fh, np.array([p.bias, p.platt_a, p.platt_b, p.kkt_gap]), "<f8")
            write_array(fh, p.dual_coef, "<f8")
            write_array(fh, p.support_vectors, "<f8")


def load_svm(path: Path) -> SvmModel:
    with open(path, "rb") as fh:
        count, dim = read_header(fh, SVM_MAGIC, FORMAT_VERSION)
        gamma, C, include = read_array(fh, 3, "<f8")
        problems = []
        for _ in range(count):
            class_index, n_sv = read_u32(fh, 2)
            bias, a, b, gap = read_array(fh, 4, "<f8")
            coef = read_array(fh, n_sv, "<f8")
            sv = read_array(fh, n_sv * dim, "<f8").reshape(n_sv, dim)
            problems.append(BinarySvm(class_index, sv, coef, float(bias), float(a), float(b), float(gap)))
    return SvmModel(problems=problems, gamma=float(gamma), C=float(C), include_unknown=bool(include > 0.5))



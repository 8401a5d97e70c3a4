"""Classification and detection metrics for a scored test set.

A scored clip is its ``Decision`` (12 scores in class order) plus its true
label. Accuracies follow the two test-list ratios; AUC and the FA/FR curve
micro-pool every (clip, class) pair; mAP macro-averages per-class AP.
"""

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from sklearn.metrics import auc, average_precision_score, roc_curve

from kws.errors import ClassWithNoPositives, EmptyInput, ValidationError
from models import CLASS_ORDER, NUM_CLASSES, UNKNOWN, ClassLabel, Decision, EvalReport, TestList, TestRatio

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredClip:
    clip_id: str
    decision: Decision
    truth: ClassLabel

    @property
    def correct(self) -> bool:
        return self.decision.predicted == self.truth


def _lookup(scored: Mapping[str, ScoredClip], test_list: TestList) -> List[ScoredClip]:
    missing = [clip_id for clip_id in test_list.entries if clip_id not in scored]
    if missing:
        raise ValidationError(f"{len(missing)} clips of the {test_list.ratio.value} list were not scored, e.g. {missing[0]}")
    return [scored[clip_id] for clip_id in test_list.entries]


def _fraction(clips: Sequence[ScoredClip], what: str) -> float:
    if not clips:
        raise EmptyInput(f"no clips to compute {what} over")
    return sum(c.correct for c in clips) / len(clips)


def union_clips(scored: Mapping[str, ScoredClip], test_lists: Sequence[TestList]) -> List[ScoredClip]:
    ids = sorted({clip_id for tl in test_lists for clip_id in tl.entries})
    return [scored[clip_id] for clip_id in ids if clip_id in scored]


def accuracies(scored: Mapping[str, ScoredClip], test_lists: Sequence[TestList]) -> Dict[str, float]:
    """Total accuracy per test ratio, plus target and non-target accuracy.

    Target accuracy covers clips of the 11 target classes, non-target accuracy
    the unknown clips, both over the union of the given test lists.

    Raises:
        EmptyInput: nothing scored, or a subset has no clips
    """
    if not scored or not test_lists:
        raise EmptyInput("no scored clips")
    out: Dict[str, float] = {}
    for tl in test_lists:
        out[f"total_acc_{tl.ratio.value}"] = _fraction(_lookup(scored, tl), f"{tl.ratio.value} accuracy")
    pool = union_clips(scored, test_lists)
    out["target_acc"] = _fraction([c for c in pool if c.truth.is_target], "target accuracy")
    out["nontarget_acc"] = _fraction([c for c in pool if c.truth == UNKNOWN], "non-target accuracy")
    return out


def _score_matrix(clips: Sequence[ScoredClip]) -> Tuple[np.ndarray, np.ndarray]:
    """(n, 12) scores and one-hot truth; -inf scores are moved just below the finite minimum."""
    scores = np.stack([np.asarray(c.decision.scores, dtype=np.float64) for c in clips])
    if scores.shape[1] != NUM_CLASSES:
        raise ValidationError(f"expected {NUM_CLASSES} scores per clip, got {scores.shape[1]}")
    finite = np.isfinite(scores)
    if not finite.all():
        floor = scores[finite].min() - 1.0 if finite.any() else 0.0
        scores = np.where(finite, scores, floor)
    truth = np.zeros_like(scores, dtype=bool)
    truth[np.arange(len(clips)), [c.truth.index for c in clips]] = True
    return scores, truth


def detection_curve(clips: Sequence[ScoredClip]) -> Tuple[List[Tuple[float, float]], float]:
    """Micro-averaged (false-alarm rate, false-reject rate) curve and ROC AUC.

    Every (clip, class) pair is one detection trial; thresholds sweep every
    distinct score. Tied scores form a single step, so constant scores give
    AUC 0.5.

    Raises:
        EmptyInput: no clips
    """
    if not clips:
        raise EmptyInput("no scored clips for the detection curve")
    scores, truth = _score_matrix(clips)
    fpr, tpr, _ = roc_curve(truth.ravel(), scores.ravel(), drop_intermediate=False)
    curve = [(float(fa), float(1.0 - tp)) for fa, tp in zip(fpr, tpr)]
    return curve, float(auc(fpr, tpr))


def mean_average_precision(clips: Sequence[ScoredClip]) -> float:
    """Macro-average over classes of one-vs-rest average precision.

    Classes without a positive clip are skipped with a ``ClassWithNoPositives``
    warning.

    Raises:
        EmptyInput: no clips, or no class has a positive
    """
    if not clips:
        raise EmptyInput("no scored clips for mAP")
    scores, truth = _score_matrix(clips)
    per_class = []
    for label in CLASS_ORDER:
        positives = truth[:, label.index]
        if not positives.any():
            warnings.warn(f"class {label.name} has no positive clip; left out of mAP", ClassWithNoPositives)
            logger.warning(f"mAP: skipping {label.name}, no positives")
            continue
        per_class.append(average_precision_score(positives, scores[:, label.index]))
    if not per_class:
        raise EmptyInput("no class has a positive clip")
    return float(np.mean(per_class))


def build_report(scored: Mapping[str, ScoredClip], test_lists: Sequence[TestList]) -> EvalReport:
    """Every report field; detection metrics are taken over the union of the test lists."""
    ratios = {tl.ratio for tl in test_lists}
    if ratios != set(TestRatio):
        raise ValidationError("a report needs both the 11:1 and the 1:1 test list")
    acc = accuracies(scored, test_lists)
    pool = union_clips(scored, test_lists)
    curve, area = detection_curve(pool)
    return EvalReport(**acc, auc=area, map=mean_average_precision(pool), curve=curve)


REPORT_FIELDS = ("total_acc_11to1", "total_acc_1to1", "target_acc", "nontarget_acc", "auc", "map")


def aggregate_reports(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, float]]:
    """Mean and sample standard deviation of each field over repeated runs."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    out = {}
    for name in REPORT_FIELDS:
        values = np.array([getattr(r, name) for r in reports])
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out[name] = {"mean": float(values.mean()), "std": std}
    return out


def write_report(report: EvalReport, path: Path) -> None:
    Path(path).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_report(path: Path) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def write_aggregate(aggregate: Mapping[str, Mapping[str, float]], runs: int, path: Path) -> None:
    body = {"runs": runs, **aggregate}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_curve(curve: Sequence[Tuple[float, float]], path: Path) -> None:
    lines = ["fa_rate\tfr_rate"] + [f"{fa!r}\t{fr!r}" for fa, fr in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_curve(path: Path) -> List[Tuple[float, float]]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return [tuple(float(v) for v in row.split("\t")) for row in rows if row]

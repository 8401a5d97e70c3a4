import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import typer

from commands.backend import classify
from commands.common import (
    AGGREGATE_FILE,
    CHECKPOINT_FILE,
    CURVE_FILE,
    REPORT_FILE,
    SCORES_FILE,
    load_split,
    model_dirs,
    require,
)
from commands.embed import ensure_embeddings
from config import RunConfig, read_resolved
from kws.metrics_eval import (
    ScoredClip,
    aggregate_reports,
    build_report,
    detection_curve,
    write_aggregate,
    write_curve,
    write_report,
)
from models import CLASS_ORDER, Decision, EvalReport

logger = logging.getLogger(__name__)


def _save_scores(path: Path, scored: Dict[str, ScoredClip]) -> None:
    ids = sorted(scored)
    np.savez(
        path,
        clip_ids=np.array(ids),
        scores=np.stack([scored[c].decision.scores for c in ids]),
        truth=np.array([scored[c].truth.index for c in ids], dtype=np.int64),
    )


def _load_scores(path: Path) -> Dict[str, ScoredClip]:
    with np.load(require(path)) as data:
        return {
            str(c): ScoredClip(str(c), Decision.from_scores(s), CLASS_ORDER[t])
            for c, s, t in zip(data["clip_ids"], data["scores"], data["truth"])
        }


def evaluate_model(model_dir: Path, backend: Optional[str] = None) -> EvalReport:
    """Score both test lists with one trained model and write its report and curve."""
    require(model_dir / CHECKPOINT_FILE)
    config = read_resolved(model_dir)
    if backend is not None:
        config = RunConfig.model_validate({**config.model_dump(), "backend": backend})
    _, test_lists = load_split(config)
    table = ensure_embeddings(model_dir)

    ids = sorted({clip_id for tl in test_lists for clip_id in tl.entries})
    truth = dict(zip(table.clip_ids, table.labels))
    decisions = classify(model_dir, config, config.resolved_backend(), table.rows(ids))
    scored = {c: ScoredClip(c, d, truth[c]) for c, d in zip(ids, decisions)}

    report = build_report(scored, test_lists)
    write_report(report, model_dir / REPORT_FILE)
    write_curve(report.curve, model_dir / CURVE_FILE)
    _save_scores(model_dir / SCORES_FILE, scored)
    logger.info(
        f"{model_dir.name} [{config.loss.value}+{config.resolved_backend()}]: "
        f"total(11:1)={report.total_acc_11to1:.4f} total(1:1)={report.total_acc_1to1:.4f} "
        f"target={report.target_acc:.4f} non-target={report.nontarget_acc:.4f} "
        f"AUC={report.auc:.4f} mAP={report.map:.4f}"
    )
    return report


def evaluate(
    run: Path = typer.Option(..., "--run", help="Training run directory"),
    backend: Optional[str] = typer.Option(None, "--backend", help="centroid, svm or softmax (default: paired with the loss)"),
):
    """
    Evaluate every model of a run on both test lists; repeats are aggregated.
    """
    dirs = model_dirs(run)
    reports = [evaluate_model(d, backend) for d in dirs]
    if len(dirs) > 1:
        aggregate = aggregate_reports(reports)
        write_aggregate(aggregate, len(reports), Path(run) / AGGREGATE_FILE)
        for name, stats in aggregate.items():
            logger.info(f"{name}: {stats['mean']:.4f} ± {stats['std']:.4f} over {len(reports)} runs")


def export_roc(
    run: Path = typer.Option(..., "--run", help="Evaluated run directory"),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for the curve files (default: next to each model)"),
):
    """
    Write the micro-averaged FA/FR curve of each evaluated model.
    """
    for model_dir in model_dirs(run):
        curve, area = detection_curve(list(_load_scores(model_dir / SCORES_FILE).values()))
        if out is None:
            target = model_dir / CURVE_FILE
        else:
            out.mkdir(parents=True, exist_ok=True)
            target = out / f"{model_dir.name}_{CURVE_FILE}"
        write_curve(curve, target)
        logger.info(f"Curve with {len(curve)} points (AUC={area:.4f}) written to {target}")
        typer.echo(str(target))

"""Desk-scale trend check on a reduced corpus.

Trains every objective for a few seeds, evaluates each with its paired
back-end and checks three trends: every objective learns (validation
accuracy at least 3x chance), AP-FC + SVM rejects unseen non-target words at
least 10 points better than the cross-entropy baseline, and the baseline's
target accuracy is no more than 3 points above AP-FC's.
"""

import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import typer

from commands.common import features_for, load_split
from commands.evaluate import evaluate_model
from commands.split import split
from commands.train import train_model
from config import RunConfig
from kws.losses import LossName
from models import NUM_CLASSES, TARGET_CLASSES, Split

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

NONTARGET_GAIN = 0.10
TARGET_SLACK = 0.03


def run_trend_check(corpus_root: Path, runs_root: Path, seeds: int = 3, epochs: int = 30) -> bool:
    """
    Run the full pipeline for every objective and seed, then check the trends.
    Args:
        corpus_root (Path): reduced corpus (see scripts.make_reduced_corpus)
        runs_root (Path): where split, checkpoints and reports go
        seeds (int): runs per objective
        epochs (int): training epochs per run
    Returns:
        bool: True when every trend holds
    """
    split_dir = runs_root / "split"
    split(corpus=corpus_root, seed=0, protocol=None, out=split_dir, config_file=None, overrides=[])
    base = RunConfig(corpus_root=corpus_root, runs_root=runs_root, split_dir=split_dir, epochs=epochs)
    manifest, _ = load_split(base)
    train_entries = manifest.in_split(Split.TRAIN)
    val_entries = manifest.in_split(Split.VAL)
    features = features_for(train_entries + val_entries, manifest, base)

    val_acc = defaultdict(list)
    reports = defaultdict(list)
    for loss in LossName:
        for seed in range(seeds):
            config = base.model_copy(update={"loss": loss, "seed": seed})
            out_dir = runs_root / loss.value / f"repeat_{seed}"
            result = train_model(config, train_entries, val_entries, features, out_dir)
            val_acc[loss].append(result.best_val_accuracy)
            reports[loss].append(evaluate_model(out_dir))

    ok = True
    for loss in LossName:
        chance = 1.0 / (len(TARGET_CLASSES) if loss.target_only else NUM_CLASSES)
        mean_acc = float(np.mean(val_acc[loss]))
        passed = mean_acc >= 3 * chance
        ok &= passed
        logger.info(f"{loss.value}: val_acc={mean_acc:.4f} (needs {3 * chance:.4f}) {'ok' if passed else 'FAIL'}")

    def mean(loss, field):
        return float(np.mean([getattr(r, field) for r in reports[loss]]))

    gain = mean(LossName.AP_FC, "nontarget_acc") - mean(LossName.CE, "nontarget_acc")
    slack = mean(LossName.AP_FC, "target_acc") - mean(LossName.CE, "target_acc")
    logger.info(f"AP-FC non-target gain over baseline: {gain:+.4f} (needs {NONTARGET_GAIN:+.2f})")
    logger.info(f"AP-FC target accuracy minus baseline: {slack:+.4f} (allowed {TARGET_SLACK:+.2f})")
    ok &= gain >= NONTARGET_GAIN
    ok &= slack <= TARGET_SLACK
    return ok


def main(
    corpus_root: Path = typer.Argument(..., help="Reduced corpus root"),
    runs_root: Path = typer.Option(Path("runs/trend_check"), "--runs-root"),
    seeds: int = typer.Option(3, "--seeds"),
    epochs: int = typer.Option(30, "--epochs"),
):
    sys.exit(0 if run_trend_check(corpus_root, runs_root, seeds, epochs) else 1)


if __name__ == "__main__":
    typer.run(main)

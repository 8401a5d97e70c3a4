"""Run-directory artifacts shared by the subcommands.

A split directory holds ``manifest.tsv`` and the two test lists. A training
run holds ``checkpoint.bin``/``model_config.txt``/``train_log.tsv`` either
directly or, for ``--repeats k``, in ``repeat_<i>`` subdirectories; later
stages add ``embeddings.npz``, a back-end file, ``report.json`` and
``roc.tsv`` next to each checkpoint.
"""

import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from config import RunConfig
from kws.dataset import entries_for, read_manifest, read_test_list
from kws.dsp_frontend import FeatureCache, extract_features
from kws.errors import ConfigError, MissingArtifact
from models import CLASS_ORDER, ClassLabel, ClipManifest, ManifestEntry, Split, TestList, TestRatio

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.tsv"
CHECKPOINT_FILE = "checkpoint.bin"
EMBEDDINGS_FILE = "embeddings.npz"
SCORES_FILE = "scores.npz"
REPORT_FILE = "report.json"
CURVE_FILE = "roc.tsv"
AGGREGATE_FILE = "aggregate.json"
BACKEND_FILES = {"centroid": "backend_centroid.bin", "svm": "backend_svm.bin"}


def list_file(ratio: TestRatio) -> str:
    return f"test_{ratio.value}.txt"


def require(path: Path) -> Path:
    if not path.exists():
        logger.error(f"Missing artifact: {path}")
        raise MissingArtifact(f"required file not found: {path}")
    return path


def load_split(config: RunConfig) -> Tuple[ClipManifest, List[TestList]]:
    if config.split_dir is None:
        raise ConfigError("split_dir is not set (pass --split-dir or set it in the config file)")
    split_dir = Path(config.split_dir)
    manifest = read_manifest(require(split_dir / MANIFEST_FILE), corpus_root=config.corpus_root)
    test_lists = [read_test_list(require(split_dir / list_file(r))) for r in TestRatio]
    return manifest, test_lists


def evaluation_entries(manifest: ClipManifest, test_lists: List[TestList]) -> List[ManifestEntry]:
    ids = sorted({clip_id for tl in test_lists for clip_id in tl.entries})
    return entries_for(manifest, ids)


def features_for(entries: List[ManifestEntry], manifest: ClipManifest, config: RunConfig) -> Dict[str, np.ndarray]:
    cache = FeatureCache(config.feature_cache_dir())
    return extract_features(entries, manifest.corpus_root, cache, workers=config.workers)


def model_dirs(run_dir: Path) -> List[Path]:
    """The run itself, or its ``repeat_<i>`` subdirectories in order."""
    run_dir = Path(run_dir)
    repeats = sorted(run_dir.glob("repeat_*"), key=lambda p: int(p.name.split("_")[1]))
    return repeats or [run_dir]


def save_embeddings(path: Path, entries: List[ManifestEntry], vectors: np.ndarray) -> None:
    np.savez(
        path,
        clip_ids=np.array([e.clip_id for e in entries]),
        labels=np.array([e.label.index for e in entries], dtype=np.int64),
        splits=np.array([e.split.value for e in entries]),
        vectors=vectors,
    )


class EmbeddingTable:
    """Embeddings of a run, loaded from ``embeddings.npz``."""

    def __init__(self, path: Path):
        with np.load(require(path)) as data:
            self.clip_ids = [str(c) for c in data["clip_ids"]]
            self.labels: List[ClassLabel] = [CLASS_ORDER[i] for i in data["labels"]]
            self.splits = [Split(s) for s in data["splits"]]
            self.vectors = data["vectors"].astype(np.float64)
        self._row = {c: i for i, c in enumerate(self.clip_ids)}

    def split(self, split: Split) -> Tuple[np.ndarray, List[ClassLabel], List[str]]:
        rows = [i for i, s in enumerate(self.splits) if s is split]
        return self.vectors[rows], [self.labels[i] for i in rows], [self.clip_ids[i] for i in rows]

    def rows(self, clip_ids: List[str]) -> np.ndarray:
        missing = [c for c in clip_ids if c not in self._row]
        if missing:
            raise MissingArtifact(f"{len(missing)} clips have no embedding, e.g. {missing[0]}")
        return self.vectors[[self._row[c] for c in clip_ids]]

import logging
from pathlib import Path
from typing import List, Optional

import typer

from commands.common import MANIFEST_FILE, list_file
from config import load_run_config, new_run_dir, write_resolved
from kws.dataset import (
    Protocol,
    build_manifest,
    default_silence_counts,
    generate_silence,
    leakage,
    make_test_list,
    split_summary,
    write_manifest,
    write_test_list,
)
from kws.errors import ConfigError
from models import TestRatio

logger = logging.getLogger(__name__)


def split(
    corpus: Optional[Path] = typer.Option(None, "--corpus", help="Corpus root (default: $KWS_CORPUS_ROOT)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for silence crops and test subsampling"),
    protocol: Optional[Protocol] = typer.Option(None, "--protocol", help="open_set or original"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory (default: a new run directory)"),
    config_file: Optional[Path] = typer.Option(None, "--config", help="Flat key=value config file"),
    overrides: List[str] = typer.Option([], "--set", help="Override a config key: key=value"),
):
    """
    Catalog the corpus, add silence clips and write the manifest plus both test lists.
    """
    config = load_run_config(config_file, overrides, corpus_root=corpus, seed=seed, protocol=protocol)
    if config.corpus_root is None:
        raise ConfigError("no corpus root: pass --corpus or set KWS_CORPUS_ROOT")

    out_dir = out or new_run_dir(config.runs_root, config.seed)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = build_manifest(config.corpus_root, config.seed, config.protocol)
    manifest = generate_silence(manifest, default_silence_counts(manifest), config.seed)
    duplicated = leakage(manifest)
    if duplicated:
        logger.warning(f"{len(duplicated)} content hashes appear in more than one split")

    write_manifest(manifest, out_dir / MANIFEST_FILE)
    for ratio in TestRatio:
        write_test_list(make_test_list(manifest, ratio, config.seed), out_dir / list_file(ratio))
    write_resolved(config.model_copy(update={"split_dir": out_dir}), out_dir)

    for name, counts in split_summary(manifest).items():
        logger.info(f"{name}: {sum(counts.values())} clips {counts}")
    typer.echo(str(out_dir))

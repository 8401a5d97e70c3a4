import logging
import shutil
from pathlib import Path

import numpy as np
import typer
from tqdm import tqdm

from models import BACKGROUND_NOISE_DIR, NON_TARGET_WORDS, TARGET_WORDS

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CLIPS_PER_WORD = 400  # about 300 land in the training split


def make_reduced_corpus(source: Path, dest: Path, per_word: int = CLIPS_PER_WORD, seed: int = 0) -> int:
    """
    Copy a seeded subset of every word folder (and all background noise) to a new corpus.
    Args:
        source (Path): full corpus root
        dest (Path): reduced corpus root, created if missing
        per_word (int): clips kept per word folder
        seed (int): selection seed
    Returns:
        int: number of clips copied
    """
    rng = np.random.default_rng(seed)
    copied = 0
    for word in tqdm(TARGET_WORDS + NON_TARGET_WORDS, desc="Copying word folders"):
        wavs = sorted((source / word).glob("*.wav"))
        if not wavs:
            logger.warning(f"No clips for '{word}' under {source}")
            continue
        keep = sorted(rng.choice(len(wavs), size=min(per_word, len(wavs)), replace=False))
        (dest / word).mkdir(parents=True, exist_ok=True)
        for i in keep:
            shutil.copy2(wavs[i], dest / word / wavs[i].name)
        copied += len(keep)

    shutil.copytree(source / BACKGROUND_NOISE_DIR, dest / BACKGROUND_NOISE_DIR, dirs_exist_ok=True)
    logger.info(f"Copied {copied} clips to {dest}")
    return copied


def main(
    source: Path = typer.Argument(..., help="Full corpus root"),
    dest: Path = typer.Argument(..., help="Where to write the reduced corpus"),
    per_word: int = typer.Option(CLIPS_PER_WORD, "--per-word"),
    seed: int = typer.Option(0, "--seed"),
):
    make_reduced_corpus(source, dest, per_word, seed)


if __name__ == "__main__":
    typer.run(main)

import zlib
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest
import soundfile as sf

from kws.dataset import build_manifest, default_silence_counts, generate_silence, which_set
from kws.dsp_frontend import extract_features
from models import (
    BACKGROUND_NOISE_DIR,
    SAMPLE_RATE,
    SEEN_UNKNOWN_WORDS,
    TARGET_WORDS,
    UNSEEN_UNKNOWN_WORDS,
    Split,
)

# clips per canonical split for each kind of word
TARGET_PER_SPLIT = {Split.TRAIN: 6, Split.VAL: 2, Split.TEST: 2}
SEEN_PER_SPLIT = {Split.TRAIN: 2, Split.VAL: 1, Split.TEST: 1}
UNSEEN_PER_SPLIT = {Split.TRAIN: 1, Split.VAL: 0, Split.TEST: 1}
NOISE_SECONDS = 12


def file_names_by_split(wanted: Dict[Split, int]) -> Dict[Split, List[str]]:
    """Speaker-style file names whose canonical hash lands in each split."""
    found: Dict[Split, List[str]] = {s: [] for s in Split}
    i = 0
    while any(len(found[s]) < wanted[s] for s in Split):
        name = f"{i:08x}_nohash_0.wav"
        split = which_set(name)
        if len(found[split]) < wanted[split]:
            found[split].append(name)
        i += 1
    return found


def synth_clip(key: str, seconds: float = 1.0) -> np.ndarray:
    """Distinct, deterministic audio per key: a tone plus noise."""
    rng = np.random.default_rng(zlib.crc32(key.encode("utf-8")))
    t = np.arange(int(SAMPLE_RATE * seconds)) / SAMPLE_RATE
    freq = 150.0 + (zlib.crc32(key.split("/")[0].encode("utf-8")) % 40) * 60.0
    signal = 0.4 * np.sin(2 * np.pi * freq * t) + 0.05 * rng.standard_normal(t.shape)
    return np.clip(signal, -1.0, 1.0)


def write_wav(path: Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), samples, sample_rate, subtype="PCM_16")


def make_corpus(root: Path) -> Path:
    plans = [(TARGET_WORDS, TARGET_PER_SPLIT), (SEEN_UNKNOWN_WORDS, SEEN_PER_SPLIT), (UNSEEN_UNKNOWN_WORDS, UNSEEN_PER_SPLIT)]
    for words, wanted in plans:
        names = file_names_by_split(wanted)
        for word in words:
            for split_names in names.values():
                for name in split_names:
                    write_wav(root / word / name, synth_clip(f"{word}/{name}"))
    for i in range(2):
        rng = np.random.default_rng(100 + i)
        write_wav(root / BACKGROUND_NOISE_DIR / f"noise_{i}.wav", 0.1 * rng.standard_normal(NOISE_SECONDS * SAMPLE_RATE))
    return root


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory) -> Path:
    return make_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture
def fresh_corpus(tmp_path) -> Path:
    """A private corpus copy a test may modify."""
    return make_corpus(tmp_path / "corpus")


@pytest.fixture(scope="session")
def manifest(corpus_root):
    base = build_manifest(corpus_root, seed=7)
    return generate_silence(base, default_silence_counts(base), seed=7)


@pytest.fixture(scope="session")
def features(manifest):
    return extract_features(manifest.entries, manifest.corpus_root, cache=None, workers=2)


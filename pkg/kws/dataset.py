"""Speech-commands v0.01 ingestion and the seen/unseen-unknown split.

Target words keep the corpus's canonical hash-based train/val/test
assignment. Seen-unknown words (the digits) only feed train/val; every clip
of an unseen-unknown word goes to test, whichever canonical portion it came
from.
"""

import hashlib
import logging
import math
import re
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import soundfile as sf
from tqdm import tqdm

from kws.errors import (
    InsufficientNoiseAudio,
    MissingWordFolder,
    RatioUnachievable,
    UnreadableAudio,
    ValidationError,
)
from models import (
    BACKGROUND_NOISE_DIR,
    CLIP_SAMPLES,
    NON_TARGET_WORDS,
    SAMPLE_RATE,
    SEEN_UNKNOWN_WORDS,
    SILENCE,
    SILENCE_NAME,
    TARGET_WORDS,
    UNSEEN_UNKNOWN_WORDS,
    ClassLabel,
    ClipManifest,
    ManifestEntry,
    Split,
    TestList,
    TestRatio,
    label_for_word,
)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "v1"
MAX_NUM_WAVS_PER_CLASS = 2**27 - 1
VALIDATION_PERCENTAGE = 10.0
TESTING_PERCENTAGE = 10.0
SILENCE_STRIDE = 1600  # 0.1 s grid of crop offsets

SPLIT_RANK = {Split.TRAIN: 0, Split.VAL: 1, Split.TEST: 2}


class Protocol(str, Enum):
    OPEN_SET = "open_set"  # seen/unseen-unknown split
    ORIGINAL = "original"  # canonical closed-set split for all 20 non-target words


def which_set(filename: str) -> Split:
    """Canonical corpus split: a stable hash of the speaker part of the file name."""
    base_name = Path(filename).name
    hash_name = re.sub(r"_nohash_.*$", "", base_name)
    hashed = hashlib.sha1(hash_name.encode("utf-8")).hexdigest()
    percentage = (int(hashed, 16) % (MAX_NUM_WAVS_PER_CLASS + 1)) * (
        100.0 / MAX_NUM_WAVS_PER_CLASS
    )
    if percentage < VALIDATION_PERCENTAGE:
        return Split.VAL
    if percentage < VALIDATION_PERCENTAGE + TESTING_PERCENTAGE:
        return Split.TEST
    return Split.TRAIN


def _check_pcm(path: Path) -> None:
    try:
        info = sf.info(str(path))
    except Exception as e:
        raise UnreadableAudio(f"{path}: {e}") from e
    if info.samplerate != SAMPLE_RATE or info.channels != 1 or not info.subtype.startswith("PCM"):
        raise UnreadableAudio(
            f"{path}: expected 16 kHz mono PCM, got {info.samplerate} Hz, "
            f"{info.channels} channel(s), {info.subtype}"
        )


def content_hash(path: Path) -> str:
    return hashlib.sha1(path.read_bytes()).hexdigest()


def _assign_split(word: str, filename: str, protocol: Protocol) -> Optional[Split]:
    canonical = which_set(filename)
    if word in TARGET_WORDS or protocol is Protocol.ORIGINAL:
        return canonical
    if word in UNSEEN_UNKNOWN_WORDS:
        return Split.TEST
    # seen-unknown words never reach the test split
    return None if canonical is Split.TEST else canonical


def _drop_cross_split_duplicates(
    entries: List[ManifestEntry], hashes: Dict[str, str]
) -> List[ManifestEntry]:
    by_hash: Dict[str, List[ManifestEntry]] = {}
    for e in entries:
        by_hash.setdefault(hashes[e.clip_id], []).append(e)

    dropped = set()
    for group in by_hash.values():
        splits = {e.split for e in group}
        if len(splits) < 2:
            continue
        keep = max(splits, key=SPLIT_RANK.get)
        for e in group:
            if e.split is not keep:
                dropped.add(e.clip_id)
    if dropped:
        logger.warning(f"Dropped {len(dropped)} clips whose audio also appears in a later split")
    return [e for e in entries if e.clip_id not in dropped]


def build_manifest(
    corpus_root: Path, seed: int, protocol: Protocol = Protocol.OPEN_SET
) -> ClipManifest:
    """Catalog the corpus and materialize the train/val/test split.

    Args:
        corpus_root (Path): v0.01 layout, one folder per word plus ``_background_noise_``
        seed (int): recorded in the manifest; the split itself is hash-based
        protocol (Protocol): open-set (default) or the original closed-set split

    Returns:
        ClipManifest: entries sorted by clip_id

    Raises:
        MissingWordFolder: a word folder or the background-noise folder is absent
        UnreadableAudio: a clip is not 16 kHz mono PCM
    """
    corpus_root = Path(corpus_root)
    missing = [
        w for w in TARGET_WORDS + NON_TARGET_WORDS + (BACKGROUND_NOISE_DIR,)
        if not (corpus_root / w).is_dir()
    ]
    if missing:
        raise MissingWordFolder(f"corpus at {corpus_root} lacks folder(s): {', '.join(missing)}")

    entries: List[ManifestEntry] = []
    hashes: Dict[str, str] = {}
    words = TARGET_WORDS + NON_TARGET_WORDS
    for word in tqdm(words, desc="Indexing word folders"):
        label = label_for_word(word)
        for wav in sorted((corpus_root / word).glob("*.wav")):
            split = _assign_split(word, wav.name, protocol)
            if split is None:
                continue
            _check_pcm(wav)
            clip_id = f"{word}/{wav.stem}"
            hashes[clip_id] = content_hash(wav)
            entries.append(
                ManifestEntry(
                    clip_id=clip_id,
                    path=wav.relative_to(corpus_root).as_posix(),
                    label=label,
                    raw_word=word,
                    split=split,
                )
            )

    entries = _drop_cross_split_duplicates(entries, hashes)
    entries.sort(key=lambda e: e.clip_id)
    logger.info(f"Built manifest with {len(entries)} clips ({protocol.value} protocol)")
    return ClipManifest(corpus_root=corpus_root, entries=tuple(entries), seed=seed)


def default_silence_counts(manifest: ClipManifest) -> Dict[Split, int]:
    """Per split, the mean clip count of the ten target words (rounded)."""
    counts = manifest.counts()
    out = {}
    for split in Split:
        total = sum(counts.get((split, w), 0) for w in TARGET_WORDS)
        out[split] = int(round(total / len(TARGET_WORDS)))
    return out


def _noise_files(corpus_root: Path) -> List[Path]:
    return sorted((corpus_root / BACKGROUND_NOISE_DIR).glob("*.wav"))


def silence_regions(frames: int) -> Dict[Split, Tuple[int, int]]:
    """Contiguous ``[start, end)`` sample range of a noise file reserved for each split."""
    val_start = int(frames * (100.0 - VALIDATION_PERCENTAGE - TESTING_PERCENTAGE) / 100.0)
    test_start = int(frames * (100.0 - TESTING_PERCENTAGE) / 100.0)
    return {Split.TRAIN: (0, val_start), Split.VAL: (val_start, test_start), Split.TEST: (test_start, frames)}


def _grid(start: int, end: int, stride: int) -> range:
    first = -(-start // stride) * stride
    return range(first, end - CLIP_SAMPLES + 1, stride)


def generate_silence(
    manifest: ClipManifest,
    per_split_counts: Dict[Split, int],
    seed: int,
    stride: int = SILENCE_STRIDE,
) -> ClipManifest:
    """Add 1-second background-noise crops as silence clips.

    Every noise file is cut into contiguous train/val/test regions (80/10/10)
    and a split only crops inside its own region, on a ``stride`` grid. Crops
    of one split may overlap each other; crops of different splits never do.

    Raises:
        InsufficientNoiseAudio: a split requests more crops than its regions hold
    """
    counts = {split: int(per_split_counts.get(split, 0)) for split in Split}
    stamp = f"{manifest.stamp}+silence({counts[Split.TRAIN]},{counts[Split.VAL]},{counts[Split.TEST]})"
    requested = sum(counts.values())
    if requested == 0:
        return ClipManifest(manifest.corpus_root, manifest.entries, manifest.seed, stamp)

    positions: Dict[Split, List[Tuple[Path, int]]] = {split: [] for split in Split}
    for noise in _noise_files(manifest.corpus_root):
        info = sf.info(str(noise))
        if info.samplerate != SAMPLE_RATE:
            logger.warning(f"Skipping {noise.name}: {info.samplerate} Hz")
            continue
        for split, (start, end) in silence_regions(info.frames).items():
            positions[split].extend((noise, offset) for offset in _grid(start, end, stride))

    rng = np.random.default_rng(seed)
    new_entries = list(manifest.entries)
    for split in Split:
        available = positions[split]
        if counts[split] > len(available):
            raise InsufficientNoiseAudio(
                f"requested {counts[split]} {split.value} silence crops but only {len(available)} positions exist"
            )
        for idx in rng.permutation(len(available))[: counts[split]]:
            noise, offset = available[idx]
            new_entries.append(
                ManifestEntry(
                    clip_id=f"{SILENCE_NAME}/{noise.stem}@{offset}",
                    path=noise.relative_to(manifest.corpus_root).as_posix(),
                    label=SILENCE,
                    raw_word=SILENCE_NAME,
                    split=split,
                )
            )

    new_entries.sort(key=lambda e: e.clip_id)
    logger.info(f"Added {requested} silence clips: {counts}")
    return ClipManifest(manifest.corpus_root, tuple(new_entries), manifest.seed, stamp)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _subsample(ids: List[str], size: int, rng: np.random.Generator) -> List[str]:
    if size >= len(ids):
        return list(ids)
    picked = rng.choice(len(ids), size=size, replace=False)
    return [ids[i] for i in sorted(picked)]


def make_test_list(manifest: ClipManifest, ratio: TestRatio, seed: int) -> TestList:
    """Deterministic test subsample with the requested known:unknown ratio.

    Known clips are only subsampled once unknown clips are exhausted: the
    11:1 list keeps every known clip, the 1:1 list keeps every unknown clip.

    Raises:
        RatioUnachievable: either side is empty or too small for the ratio
    """
    test = manifest.in_split(Split.TEST)
    known = sorted(e.clip_id for e in test if e.label.is_target)
    unknown = sorted(e.clip_id for e in test if not e.label.is_target)
    if not known or not unknown:
        raise RatioUnachievable(
            f"test split has {len(known)} known and {len(unknown)} unknown clips"
        )

    rng = np.random.default_rng(seed)
    k = ratio.known_per_unknown
    need_unknown = _round_half_up(len(known) / k)
    if need_unknown == 0:
        raise RatioUnachievable(f"{len(known)} known clips cannot support a {k}:1 ratio")
    if need_unknown <= len(unknown):
        keep_known, keep_unknown = known, _subsample(unknown, need_unknown, rng)
    else:
        keep_known, keep_unknown = _subsample(known, k * len(unknown), rng), unknown

    entries = tuple(sorted(keep_known + keep_unknown))
    logger.info(
        f"Test list {ratio.value}: {len(keep_known)} known / {len(keep_unknown)} unknown"
    )
    return TestList(ratio=ratio, entries=entries)


def _crop_overlaps(crops: List[ManifestEntry]) -> List[str]:
    by_path: Dict[str, List[ManifestEntry]] = {}
    for e in crops:
        by_path.setdefault(e.path, []).append(e)
    out = []
    for path, group in by_path.items():
        group.sort(key=lambda e: e.crop_offset)
        for i, a in enumerate(group):
            for b in group[i + 1 :]:
                if b.crop_offset >= a.crop_offset + CLIP_SAMPLES:
                    break
                if b.split is not a.split:
                    out.append(f"{path}@{a.crop_offset}/{b.crop_offset}")
    return out


def leakage(manifest: ClipManifest) -> List[str]:
    """Audio shared between splits.

    Returns content hashes of clips found in more than one split, plus
    ``<path>@<offset>/<offset>`` for silence crops of different splits whose
    sample ranges overlap.
    """
    seen: Dict[str, set] = {}
    crops = []
    for e in manifest.entries:
        if e.crop_offset is not None:
            crops.append(e)
            continue
        digest = content_hash(manifest.corpus_root / e.path)
        seen.setdefault(digest, set()).add(e.split)
    return sorted(h for h, splits in seen.items() if len(splits) > 1) + sorted(_crop_overlaps(crops))


def split_summary(manifest: ClipManifest) -> Dict[str, Dict[str, int]]:
    """Clip counts per split and class name, for logging."""
    out: Dict[str, Dict[str, int]] = {s.value: {} for s in Split}
    for (split, name), n in sorted(manifest.counts().items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        out[split.value][name] = n
    return out


# --- line formats -----------------------------------------------------------


def write_manifest(manifest: ClipManifest, path: Path) -> None:
    lines = [
        f"#kws-manifest\t{MANIFEST_VERSION}\tseed={manifest.seed}\tstamp={manifest.stamp}"
        f"\troot={manifest.corpus_root.as_posix()}"
    ]
    for e in sorted(manifest.entries, key=lambda e: e.clip_id):
        lines.append("\t".join([e.clip_id, e.path, e.label.name, e.raw_word, e.split.value]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _header_fields(line: str, tag: str) -> Dict[str, str]:
    parts = line.rstrip("\n").split("\t")
    if not parts or parts[0] != tag or len(parts) < 2 or parts[1] != MANIFEST_VERSION:
        raise ValidationError(f"not a {tag} {MANIFEST_VERSION} file")
    return dict(p.split("=", 1) for p in parts[2:])


def read_manifest(path: Path, corpus_root: Optional[Path] = None) -> ClipManifest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValidationError(f"{path} is empty")
    header = _header_fields(lines[0], "#kws-manifest")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
        clip_id, rel, label, word, split = fields
        try:
            entries.append(
                ManifestEntry(clip_id, rel, ClassLabel.from_name(label), word, Split(split))
            )
        except ValueError as e:
            raise ValidationError(f"{path}:{lineno}: {e}") from e
    root = Path(corpus_root) if corpus_root is not None else Path(header["root"])
    return ClipManifest(
        corpus_root=root,
        entries=tuple(entries),
        seed=int(header["seed"]),
        stamp=header["stamp"],
    )


def write_test_list(test_list: TestList, path: Path) -> None:
    lines = [f"#kws-test-list\t{MANIFEST_VERSION}\tratio={test_list.ratio.value}"]
    lines.extend(sorted(test_list.entries))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_test_list(path: Path) -> TestList:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValidationError(f"{path} is empty")
    header = _header_fields(lines[0], "#kws-test-list")
    return TestList(ratio=TestRatio(header["ratio"]), entries=tuple(lines[1:]))


def entries_for(manifest: ClipManifest, clip_ids: Iterable[str]) -> List[ManifestEntry]:
    index = manifest.by_id()
    return [index[c] for c in clip_ids]

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

TARGET_WORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
SEEN_UNKNOWN_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
)
UNSEEN_UNKNOWN_WORDS = (
    "bed", "bird", "cat", "dog", "happy", "house", "marvin", "sheila", "tree", "wow",
)
NON_TARGET_WORDS = SEEN_UNKNOWN_WORDS + UNSEEN_UNKNOWN_WORDS

SILENCE_NAME = "_silence_"
UNKNOWN_NAME = "_unknown_"
BACKGROUND_NOISE_DIR = "_background_noise_"

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000


class LabelKind(str, Enum):
    TARGET = "target"
    SILENCE = "silence"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class ClassLabel:
    kind: LabelKind
    word: Optional[str] = None

    def __post_init__(self):
        if self.kind is LabelKind.TARGET and self.word not in TARGET_WORDS:
            raise ValueError(f"'{self.word}' is not a target word")
        if self.kind is not LabelKind.TARGET and self.word is not None:
            raise ValueError("only target labels carry a word")

    @property
    def name(self) -> str:
        if self.kind is LabelKind.TARGET:
            return self.word
        return SILENCE_NAME if self.kind is LabelKind.SILENCE else UNKNOWN_NAME

    @property
    def index(self) -> int:
        return CLASS_NAMES.index(self.name)

    @property
    def is_target(self) -> bool:
        """Silence counts as a target class (11 target classes in total)."""
        return self.kind is not LabelKind.UNKNOWN

    @classmethod
    def from_name(cls, name: str) -> "ClassLabel":
        if name == SILENCE_NAME:
            return SILENCE
        if name == UNKNOWN_NAME:
            return UNKNOWN
        return cls(LabelKind.TARGET, name)

    def __repr__(self):
        return f"<ClassLabel({self.name})>"


SILENCE = ClassLabel(LabelKind.SILENCE)
UNKNOWN = ClassLabel(LabelKind.UNKNOWN)

# Fixed class order: ties are always broken towards the earlier class.
CLASS_NAMES: Tuple[str, ...] = TARGET_WORDS + (SILENCE_NAME, UNKNOWN_NAME)
CLASS_ORDER: Tuple[ClassLabel, ...] = tuple(
    [ClassLabel(LabelKind.TARGET, w) for w in TARGET_WORDS] + [SILENCE, UNKNOWN]
)
NUM_CLASSES = len(CLASS_ORDER)
TARGET_CLASSES = CLASS_ORDER[:-1]
UNKNOWN_INDEX = NUM_CLASSES - 1


def label_for_word(raw_word: str) -> ClassLabel:
    if raw_word in TARGET_WORDS:
        return ClassLabel(LabelKind.TARGET, raw_word)
    if raw_word == SILENCE_NAME:
        return SILENCE
    return UNKNOWN


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: str  # relative to the corpus root
    label: ClassLabel
    raw_word: str
    split: Split

    @property
    def crop_offset(self) -> Optional[int]:
        """Sample offset of a silence crop, encoded in the clip id as ``@<offset>``."""
        if "@" not in self.clip_id:
            return None
        return int(self.clip_id.rsplit("@", 1)[1])


@dataclass(frozen=True)
class ClipManifest:
    corpus_root: Path
    entries: Tuple[ManifestEntry, ...]
    seed: int
    stamp: str = "base"

    def in_split(self, split: Split) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split is split]

    def by_id(self) -> dict:
        return {e.clip_id: e for e in self.entries}

    def counts(self) -> dict:
        """Clip counts keyed by (split, class name)."""
        out: dict = {}
        for e in self.entries:
            key = (e.split, e.label.name)
            out[key] = out.get(key, 0) + 1
        return out


class TestRatio(str, Enum):
    ORIGINAL_11_TO_1 = "11to1"
    BALANCED_1_TO_1 = "1to1"

    @property
    def known_per_unknown(self) -> int:
        return 11 if self is TestRatio.ORIGINAL_11_TO_1 else 1


@dataclass(frozen=True)
class TestList:
    __test__ = False  # not a pytest class

    ratio: TestRatio
    entries: Tuple[str, ...]


@dataclass(frozen=True)
class Decision:
    predicted: ClassLabel
    scores: np.ndarray = field(repr=False)  # one score per class, CLASS_ORDER

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "Decision":
        # np.argmax returns the first maximum, i.e. the fixed class order breaks ties
        return cls(predicted=CLASS_ORDER[int(np.argmax(scores))], scores=scores)

    def score_of(self, label: ClassLabel) -> float:
        return float(self.scores[label.index])


class EvalReport(BaseModel):
    total_acc_11to1: float = Field(ge=0.0, le=1.0)
    total_acc_1to1: float = Field(ge=0.0, le=1.0)
    target_acc: float = Field(ge=0.0, le=1.0)
    nontarget_acc: float = Field(ge=0.0, le=1.0)
    auc: float = Field(ge=0.0, le=1.0)
    map: float = Field(ge=0.0, le=1.0)
    curve: List[Tuple[float, float]] = Field(default_factory=list, exclude=True)

    @field_validator("curve")
    @classmethod
    def fa_rates_non_decreasing(cls, curve):
        fa = [p[0] for p in curve]
        if any(b < a for a, b in zip(fa, fa[1:])):
            raise ValueError("curve false-alarm rates must be non-decreasing")
        return curve

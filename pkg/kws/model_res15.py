"""res15 embedding network and the cross-entropy baseline head.

cnn1 (45 filters, dilation 1) -> 6 residual blocks, block i dilated by
2**(i // 3) -> cnn2 (dilation 16) -> global average pool -> fc to D.
Every conv is followed by batch norm and ReLU; a block adds its input after
its second conv's batch norm + ReLU.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from kws import nn_core as nn
from kws.errors import ShapeMismatch, ValidationError
from models import NUM_CLASSES, ClassLabel

logger = logging.getLogger(__name__)

N_MFCC = 40
N_FRAMES = 49


@dataclass(frozen=True)
class Res15Config:
    channels: int = 45
    n_res_blocks: int = 6
    embed_dim: int = 32
    n_mfcc: int = N_MFCC
    n_frames: int = N_FRAMES
    exit_dilation: int = 16

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValidationError("embedding dimension must be at least 2")

    def block_dilation(self, i: int) -> int:
        return 2 ** (i // 3)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(vars(self).items()))

    @classmethod
    def from_text(cls, text: str) -> "Res15Config":
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, value = line.split("=", 1)
                values[key.strip()] = int(value)
        return cls(**values)


@dataclass(frozen=True)
class EmbeddingBatch:
    vectors: nn.Tensor  # (B, D)
    labels: Sequence[ClassLabel]

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.labels):
            raise ShapeMismatch(f"{self.vectors.shape[0]} vectors but {len(self.labels)} labels")

    @property
    def class_indices(self) -> np.ndarray:
        return np.array([label.index for label in self.labels], dtype=np.int64)


class ConvBlock(nn.Module):
    """conv -> batch norm -> ReLU."""

    def __init__(self, in_channels, out_channels, dilation, rng, dtype):
        self.conv = nn.Conv2d(in_channels, out_channels, dilation, rng, dtype)
        self.bn = nn.BatchNorm2d(out_channels, dtype)

    def __call__(self, x: nn.Tensor) -> nn.Tensor:
        return nn.relu(self.bn(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, channels, dilation, rng, dtype):
        self.first = ConvBlock(channels, channels, dilation, rng, dtype)
        self.second = ConvBlock(channels, channels, dilation, rng, dtype)

    def __call__(self, x: nn.Tensor) -> nn.Tensor:
        return nn.add(self.second(self.first(x)), x)


class Res15(nn.Module):
    def __init__(self, config: Res15Config = Res15Config(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = dtype
        c = config.channels
        self.cnn1 = ConvBlock(1, c, 1, rng, dtype)
        self.blocks = [
            ResidualBlock(c, config.block_dilation(i), rng, dtype)
            for i in range(config.n_res_blocks)
        ]
        self.cnn2 = ConvBlock(c, c, config.exit_dilation, rng, dtype)
        self.fc = nn.Linear(c, config.embed_dim, rng, dtype=dtype)

    def __call__(self, features: np.ndarray) -> nn.Tensor:
        """Embed a batch of feature maps shaped (B, 1, 40, 49) or (B, 40, 49)."""
        x = np.asarray(features, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        expected = (1, self.config.n_mfcc, self.config.n_frames)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeMismatch(f"expected (B, {', '.join(map(str, expected))}), got {x.shape}")
        h = self.cnn1(nn.Tensor(x))
        for block in self.blocks:
            h = block(h)
        h = self.cnn2(h)
        return self.fc(nn.global_avg_pool2d(h))

    def forward(self, features: np.ndarray, labels: Sequence[ClassLabel], training: bool) -> EmbeddingBatch:
        self.train(training)
        return EmbeddingBatch(vectors=self(features), labels=tuple(labels))


class ClassifierHead(nn.Module):
    """Linear D -> 12 layer used only by the cross-entropy baseline."""

    def __init__(self, embed_dim: int, seed: int = 0, dtype=np.float32):
        self.fc = nn.Linear(embed_dim, NUM_CLASSES, np.random.default_rng(seed + 1), dtype=dtype)

    def __call__(self, e: EmbeddingBatch) -> nn.Tensor:
        if e.vectors.shape[1] != self.fc.weight.shape[1]:
            raise ShapeMismatch(f"head expects D={self.fc.weight.shape[1]}, got {e.vectors.shape[1]}")
        return self.fc(e.vectors)


def expected_parameter_count(config: Res15Config = Res15Config()) -> int:
    """Closed-form learnable parameter count of the layer table."""
    c = config.channels
    conv = lambda cin: cin * c * 9  # noqa: E731
    bn = 2 * c
    blocks = config.n_res_blocks * 2 * (conv(c) + bn)
    return conv(1) + bn + blocks + conv(c) + bn + c * config.embed_dim + config.embed_dim


def embed_features(model: Res15, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings for a stack of feature maps, without recording a graph."""
    model.eval()
    out = []
    with nn.no_grad():
        for start in range(0, len(features), batch_size):
            out.append(model(features[start : start + batch_size]).values)
    if not out:
        return np.zeros((0, model.config.embed_dim), dtype=model.dtype)
    return np.concatenate(out, axis=0)


def save_model(model: Res15, directory: Path, extra: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """Write ``checkpoint.bin`` (model plus any objective state) and ``model_config.txt``."""
    directory = Path(directory)
    state = model.state_dict()
    if extra:
        state.update(extra)
    path = directory / "checkpoint.bin"
    nn.save_checkpoint(path, state)
    (directory / "model_config.txt").write_text(model.config.to_text(), encoding="utf-8")
    return path


def load_model(directory: Path, seed: int = 0):
    """Rebuild a Res15 from a run directory; returns (model, full checkpoint state)."""
    directory = Path(directory)
    config = Res15Config.from_text((directory / "model_config.txt").read_text(encoding="utf-8"))
    state = nn.load_checkpoint(directory / "checkpoint.bin")
    model = Res15(config, seed=seed)
    own = {k: v for k, v in state.items() if not k.startswith("objective.")}
    model.load_state_dict(own)
    return model, state

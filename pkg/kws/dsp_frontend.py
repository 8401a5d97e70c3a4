"""WAV decoding, 40-dimensional MFCC and time-shift augmentation.

Frame layout: 40 ms periodic Hann window (640 samples), 20 ms hop (320
samples), no end padding, so a 1-second clip yields 49 frames. Each frame is
zero-padded to a 1024-point real FFT; the power spectrum goes through 40
triangular mel filters spanning 20-8000 Hz, the mel energies are floored at
1e-10 before the natural log, and an orthonormal DCT-II keeps all 40
coefficients. No pre-emphasis, mean normalisation or liftering.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.signal import get_window
from tqdm import tqdm

from kws.errors import DecodeError, SampleRateMismatch
from models import CLIP_SAMPLES, SAMPLE_RATE, ManifestEntry
from utils.binary import read_array, read_header, write_array, write_header

logger = logging.getLogger(__name__)

FRAME_LENGTH = 640
HOP_LENGTH = 320
N_FFT = 1024
N_MELS = 40
N_MFCC = 40
F_MIN = 20.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
N_FRAMES = (CLIP_SAMPLES - FRAME_LENGTH) // HOP_LENGTH + 1  # 49

SHIFT_PROBABILITY = 0.2
MAX_SHIFT = 10

CACHE_MAGIC = b"KWSF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class FeatureMap:
    coeffs: np.ndarray  # (N_MFCC, frames)
    frame_ms: int = 40
    hop_ms: int = 20


def fit_length(samples: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Zero-pad at the end or center-crop to exactly ``length`` samples."""
    n = samples.shape[0]
    if n < length:
        return np.concatenate([samples, np.zeros(length - n, dtype=samples.dtype)])
    if n > length:
        start = (n - length) // 2
        return samples[start : start + length]
    return samples


def load_clip(path: Path, offset: Optional[int] = None) -> Waveform:
    """Decode a PCM WAV file into a 1-second mono waveform in [-1, 1].

    Args:
        path (Path): RIFF/PCM WAV file
        offset (Optional[int]): read a 1-second crop starting at this sample
            instead of the whole file (silence clips)

    Returns:
        Waveform: exactly 16000 samples

    Raises:
        DecodeError: the file is not readable PCM WAV
        SampleRateMismatch: the file is not 16 kHz (no resampling is done)
    """
    try:
        info = sf.info(str(path))
    except Exception as e:
        raise DecodeError(f"{path}: {e}") from e
    if not info.subtype.startswith("PCM"):
        raise DecodeError(f"{path}: unsupported encoding {info.subtype}")
    if info.samplerate != SAMPLE_RATE:
        raise SampleRateMismatch(f"{path}: {info.samplerate} Hz, expected {SAMPLE_RATE} Hz")

    try:
        if offset is None:
            data, _ = sf.read(str(path), dtype="float64", always_2d=True)
        else:
            data, _ = sf.read(
                str(path), start=offset, frames=CLIP_SAMPLES, dtype="float64", always_2d=True
            )
    except Exception as e:
        raise DecodeError(f"{path}: {e}") from e

    samples = data.mean(axis=1) if data.shape[1] > 1 else data[:, 0]
    return Waveform(samples=fit_length(np.clip(samples, -1.0, 1.0)))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> np.ndarray:
    """Triangular filters of unit peak, evaluated at the FFT bin frequencies.

    Returns:
        np.ndarray: (n_mels, n_fft // 2 + 1)
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_WINDOW = get_window("hann", FRAME_LENGTH, fftbins=True)
_FILTERS = mel_filterbank()


def mfcc(w: Waveform) -> FeatureMap:
    """40 x 49 MFCC matrix of a 1-second waveform."""
    frames = sliding_window_view(w.samples.astype(np.float64), FRAME_LENGTH)[::HOP_LENGTH]
    spectrum = np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel = power @ _FILTERS.T
    log_mel = np.log(np.maximum(mel, LOG_FLOOR))
    coeffs = dct(log_mel, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    return FeatureMap(coeffs=np.ascontiguousarray(coeffs.T))


def shift_frames(coeffs: np.ndarray, t: int) -> np.ndarray:
    """Move content ``t`` frames later (earlier for negative t), zero-filling the gap."""
    out = np.zeros_like(coeffs)
    n = coeffs.shape[1]
    if abs(t) >= n:
        return out
    if t >= 0:
        out[:, t:] = coeffs[:, : n - t]
    else:
        out[:, : n + t] = coeffs[:, -t:]
    return out


def augment_time_shift(
    f: FeatureMap,
    rng: np.random.Generator,
    probability: float = SHIFT_PROBABILITY,
    max_shift: int = MAX_SHIFT,
) -> FeatureMap:
    """With ``probability``, shift by t ~ U{-max_shift..max_shift} frames."""
    if rng.random() >= probability:
        return f
    t = int(rng.integers(-max_shift, max_shift + 1))
    if t == 0:
        return f
    return FeatureMap(coeffs=shift_frames(f.coeffs, t), frame_ms=f.frame_ms, hop_ms=f.hop_ms)


class FeatureCache:
    """One file per clip: 16-byte header then float32 little-endian, row-major."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, clip_id: str) -> Path:
        return self.root / f"{hashlib.sha1(clip_id.encode('utf-8')).hexdigest()}.feat"

    def get(self, clip_id: str) -> Optional[FeatureMap]:
        path = self._path(clip_id)
        if not path.exists():
            return None
        with open(path, "rb") as fh:
            rows, cols = read_header(fh, CACHE_MAGIC, CACHE_VERSION)
            values = read_array(fh, rows * cols, "<f4")
        return FeatureMap(coeffs=values.reshape(rows, cols))

    def put(self, clip_id: str, f: FeatureMap) -> None:
        rows, cols = f.coeffs.shape
        tmp = self._path(clip_id).with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            write_header(fh, CACHE_MAGIC, CACHE_VERSION, rows, cols)
            write_array(fh, f.coeffs, "<f4")
        tmp.replace(self._path(clip_id))


def clip_features(entry: ManifestEntry, corpus_root: Path, cache: Optional[FeatureCache] = None) -> FeatureMap:
    if cache is not None:
        cached = cache.get(entry.clip_id)
        if cached is not None:
            return cached
    f = mfcc(load_clip(Path(corpus_root) / entry.path, offset=entry.crop_offset))
    if cache is not None:
        cache.put(entry.clip_id, f)
    return f


def extract_features(
    entries: Iterable[ManifestEntry],
    corpus_root: Path,
    cache: Optional[FeatureCache] = None,
    workers: int = 4,
) -> Dict[str, np.ndarray]:
    """MFCC matrices (float32) for many clips, computed on a thread pool."""
    entries = list(entries)

    def work(entry: ManifestEntry):
        return entry.clip_id, clip_features(entry, corpus_root, cache).coeffs.astype(np.float32)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(tqdm(pool.map(work, entries), total=len(entries), desc="Extracting MFCC"))
    return dict(results)

"""Training-time augmentation: mixup, spectrogram masking, background noise."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .frontend import Waveform, rms
from .tensor import ConfigError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    mixup: bool = True
    mixup_alpha: float = 0.5
    mask: bool = True
    n_freq_masks: int = 2
    freq_mask_max: int = 24
    n_time_masks: int = 2
    time_mask_max: int = 24
    noise: bool = True
    noise_gain: float = 0.25
    noise_prob: float = 1.0
    noise_dir: str | None = None

    def __post_init__(self):
        if self.mixup_alpha <= 0:
            raise ConfigError(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        if not 0 <= self.noise_gain <= 1:
            raise ConfigError(f"noise_gain must be in [0, 1], got {self.noise_gain}")
        if not 0 <= self.noise_prob <= 1:
            raise ConfigError(f"noise_prob must be in [0, 1], got {self.noise_prob}")
        for k in ("n_freq_masks", "freq_mask_max", "n_time_masks", "time_mask_max"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(mixup=False, mask=False, noise=False)

    def to_dict(self) -> dict:
        return asdict(self)


def mixup(x1: np.ndarray, x2: np.ndarray, y1: np.ndarray, y2: np.ndarray, lam: float):
    """Convex combination of two examples and their label vectors."""
    x1, x2, y1, y2 = map(np.asarray, (x1, x2, y1, y2))
    if x1.shape != x2.shape:
        raise ShapeError(f"mixup: inputs {x1.shape} and {x2.shape} differ")
    if y1.shape != y2.shape:
        raise ShapeError(f"mixup: labels {y1.shape} and {y2.shape} differ")
    if not 0 <= lam <= 1:
        raise ValueError(f"mixup: lambda {lam} outside [0, 1]")
    if lam == 1:
        return x1.copy(), y1.copy()
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


def mixup_batch(x: np.ndarray, y: np.ndarray, alpha: float, rng: np.random.Generator):
    """Mix each example with a random in-batch partner, one lambda per example."""
    B = len(x)
    perm = rng.permutation(B)
    lam = rng.beta(alpha, alpha, size=B)
    xs, ys = zip(*(mixup(x[i], x[perm[i]], y[i], y[perm[i]], float(lam[i])) for i in range(B)))
    return np.stack(xs).astype(x.dtype), np.stack(ys).astype(y.dtype)


def mask_bands(shape: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator):
    """Draw (freq_bands, time_bands) as lists of (start, width)."""
    H, W = shape
    if cfg.freq_mask_max > H or cfg.time_mask_max > W:
        raise ConfigError(f"mask extents ({cfg.freq_mask_max}, {cfg.time_mask_max}) exceed {shape}")

    def draw(n, max_w, size):
        bands = []
        for _ in range(n):
            width = int(rng.integers(0, max_w + 1))
            start = int(rng.integers(0, size - width + 1))
            bands.append((start, width))
        return bands

    return draw(cfg.n_freq_masks, cfg.freq_mask_max, H), draw(cfg.n_time_masks, cfg.time_mask_max, W)


def spec_mask(s: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Fill random row bands (frequency) and column bands (time) with the mean."""
    s = np.asarray(s)
    if cfg.n_freq_masks == 0 and cfg.n_time_masks == 0:
        return s.copy()
    freq, time = mask_bands(s.shape[-2:], cfg, rng)
    out = s.copy()
    fill = s.mean(dtype=np.float64).astype(s.dtype)
    for start, width in freq:
        out[..., start:start + width, :] = fill
    for start, width in time:
        out[..., :, start:start + width] = fill
    return out


def noise_window(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random-offset slice of ``noise``, tiled when shorter than ``length``."""
    if len(noise) < length:
        noise = np.tile(noise, -(-length // len(noise)) + 1)
    start = int(rng.integers(0, len(noise) - length + 1))
    return noise[start:start + length]


def add_background_noise(x: Waveform, noise: Waveform, gain: float = 0.25,
                         rng: np.random.Generator | None = None) -> Waveform:
    """Mix in noise at ``gain`` times the signal RMS, clipped to [-1, 1]."""
    if noise.sample_rate != x.sample_rate:
        raise ConfigError(f"noise is {noise.sample_rate} Hz, signal is {x.sample_rate} Hz")
    if gain == 0:
        return Waveform(x.samples.copy(), x.sample_rate)
    noise_rms = rms(noise.samples)
    if noise_rms == 0:
        log.warning("background noise clip is silent; skipping")
        return Waveform(x.samples.copy(), x.sample_rate)
    rng = rng or np.random.default_rng()
    win = noise_window(noise.samples, len(x), rng)
    out = x.samples + gain * rms(x.samples) / noise_rms * win
    return Waveform(np.clip(out, -1.0, 1.0), x.sample_rate)


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-example generator, independent of processing order."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))

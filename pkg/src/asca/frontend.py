"""WAV decoding and log-mel features on a fixed canvas."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import ConfigError

LOG_FLOOR = 1e-10


class DecodeError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendParams:
    sample_rate: int = 32000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fmin: float = 20.0
    fmax: float | None = None  # None: Nyquist
    center: bool = True  # reflection-pad so frame k is centred at k * hop
    canvas: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        top = self.top_hz
        if not 0 <= self.fmin < top:
            raise ConfigError(f"need 0 <= fmin < fmax, got fmin={self.fmin}, fmax={top}")
        if top > self.sample_rate / 2:
            raise ConfigError(f"fmax {top} exceeds Nyquist {self.sample_rate / 2}")

    @property
    def top_hz(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendParams":
        d = dict(d)
        if "canvas" in d:
            d["canvas"] = tuple(d["canvas"])
        return cls(**d)


@dataclass
class Spectrogram:
    values: np.ndarray  # n_mels x n_frames
    params: FrontendParams

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        yield cid, data[pos + 8:pos + 8 + size]
        pos += 8 + size + (size & 1)


def parse_wav(data: bytes) -> Waveform:
    if len(data) < 12:
        raise DecodeError("RIFF header: file shorter than 12 bytes")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF":
        raise DecodeError(f"RIFF header: chunk id is {riff!r}, expected b'RIFF'")
    if wave != b"WAVE":
        raise DecodeError(f"RIFF header: form type is {wave!r}, expected b'WAVE'")
    fmt = body = None
    for cid, chunk in _chunks(data):
        if cid == b"fmt ":
            fmt = chunk
        elif cid == b"data":
            body = chunk
    if fmt is None or len(fmt) < 16:
        raise DecodeError("fmt chunk: missing or shorter than 16 bytes")
    if body is None:
        raise DecodeError("data chunk: missing")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == 0xFFFE and len(fmt) >= 26:  # WAVE_FORMAT_EXTENSIBLE: real tag in the subformat GUID
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels < 1:
        raise DecodeError(f"fmt chunk: channel count {channels}")
    if rate <= 0:
        raise DecodeError(f"fmt chunk: sample rate {rate}")
    if tag == 1 and bits == 16:
        samples = np.frombuffer(body[: len(body) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        samples = np.frombuffer(body[: len(body) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise DecodeError(f"fmt chunk: unsupported format tag {tag} with {bits} bits per sample")
    n = len(samples) // channels
    samples = samples[: n * channels].reshape(n, channels).mean(axis=1)
    return Waveform(samples, rate)


def decode_wav(path) -> Waveform:
    """Read a 16-bit PCM or 32-bit float WAV file, down-mixed to mono."""
    return parse_wav(Path(path).read_bytes())


def encode_wav(samples: np.ndarray, sample_rate: int, float32: bool = False) -> bytes:
    """Inverse of :func:`parse_wav` for mono or (n, channels) arrays."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    channels = arr.shape[1]
    if float32:
        body, tag, bits = arr.astype("<f4").tobytes(), 3, 32
    else:
        body = np.clip(np.round(arr * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = 1, 16
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(body)) + body
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def write_wav(path, samples, sample_rate: int, float32: bool = False) -> None:
    Path(path).write_bytes(encode_wav(samples, sample_rate, float32))


# ---------------------------------------------------------------------------
# mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers_hz(params: FrontendParams) -> np.ndarray:
    """Filter edge frequencies: n_mels + 2 points equally spaced in mel."""
    mels = np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.top_hz), params.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(params: FrontendParams, sample_rate: int | None = None) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1), peak height 1."""
    sr = params.sample_rate if sample_rate is None else sample_rate
    if params.top_hz > sr / 2:
        raise ConfigError(f"fmax {params.top_hz} exceeds Nyquist {sr / 2}")
    n_fft = params.n_fft
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_centers_hz(params)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def hamming(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / (n - 1))


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    if len(x) < win:
        raise ConfigError(f"signal of {len(x)} samples is shorter than one {win}-sample window")
    n = (len(x) - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]


def log_mel_spectrogram(w: Waveform, params: FrontendParams | None = None) -> Spectrogram:
    params = params or FrontendParams(sample_rate=w.sample_rate)
    if params.sample_rate != w.sample_rate:
        raise ConfigError(f"waveform is {w.sample_rate} Hz but params expect {params.sample_rate} Hz")
    win, hop, n_fft = params.win_length, params.hop_length, params.n_fft
    x = w.samples
    if params.center:
        half = win // 2
        if len(x) <= half:
            raise ConfigError(f"signal of {len(x)} samples too short to reflect-pad by {half}")
        x = np.pad(x, (half, half), mode="reflect")
    frames = frame_signal(x, win, hop) * hamming(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = mel_filterbank(params, w.sample_rate) @ power.T
    return Spectrogram(np.log(np.maximum(mel, LOG_FLOOR)), params)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    left = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - left
    rows = np.arange(n_out)
    m[rows, left] = 1.0 - frac
    m[rows, left + 1] += frac
    return m


def resize_bilinear(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = values.shape
    return _interp_matrix(h, shape[0]) @ values @ _interp_matrix(w, shape[1]).T


def fit_to_canvas(s: Spectrogram | np.ndarray, canvas: tuple[int, int] | None = None,
                  eps: float = 1e-6) -> np.ndarray:
    """Resize to the canvas and standardize; returns float32 (1, H, W)."""
    values = s.values if isinstance(s, Spectrogram) else np.asarray(s, dtype=np.float64)
    if canvas is None:
        canvas = s.params.canvas if isinstance(s, Spectrogram) else (224, 224)
    if values.size and values.min() == values.max():
        return np.zeros((1, *canvas), dtype=np.float32)
    r = resize_bilinear(values, tuple(canvas))
    r = r - r.mean()
    std = r.std()
    r = r / max(std, eps)
    return r.astype(np.float32)[None]


def features(w: Waveform, params: FrontendParams) -> np.ndarray:
    return fit_to_canvas(log_mel_spectrogram(w, params), params.canvas)


def nearest_mel_bin(freq_hz: float, params: FrontendParams) -> int:
    return int(np.argmin(np.abs(mel_centers_hz(params)[1:-1] - freq_hz)))


def frame_count(n_samples: int, params: FrontendParams) -> int:
    n = n_samples + (2 * (params.win_length // 2) if params.center else 0)
    return (n - params.win_length) // params.hop_length + 1


def rms(x: np.ndarray) -> float:
    return math.sqrt(float(np.mean(np.square(x)))) if len(x) else 0.0

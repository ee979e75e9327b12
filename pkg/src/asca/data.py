"""Datasets: manifests, audio-backed and in-memory examples, synthetic sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, add_background_noise
from .frontend import FrontendParams, Waveform, decode_wav, features, write_wav
from .tensor import ConfigError


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    classes: list[str]
    rows: list[tuple[str, list[int]]]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.rows]

    def targets(self) -> np.ndarray:
        return multi_hot([labels for _, labels in self.rows], len(self.classes))


def multi_hot(label_lists, num_classes: int) -> np.ndarray:
    y = np.zeros((len(label_lists), num_classes), dtype=np.float32)
    for i, labels in enumerate(label_lists):
        y[i, list(labels)] = 1.0
    return y


def load_manifest(path, classes_path=None) -> DatasetManifest:
    """Read a ``path,labels`` CSV; labels are space-separated class names.

    Classes come from ``classes_path`` (one per line), else ``classes.txt``
    next to the manifest, else the sorted unique names in the file.
    """
    path = Path(path)
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty file")
        if [h.strip() for h in header] != ["path", "labels"]:
            raise ManifestError(f"{path}: row 1: header must be 'path,labels', got {','.join(header)!r}")
        raw = []
        for rowno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}: row {rowno}: expected 2 fields, got {len(row)}")
            raw.append((rowno, row[0].strip(), row[1].split()))
    if not raw:
        raise ManifestError(f"{path}: no data rows")
    if classes_path is None and (path.parent / "classes.txt").exists():
        classes_path = path.parent / "classes.txt"
    if classes_path is not None:
        classes = [ln.strip() for ln in Path(classes_path).read_text().splitlines() if ln.strip()]
    else:
        classes = sorted({name for _, _, names in raw for name in names})
    index = {c: i for i, c in enumerate(classes)}
    seen: set[str] = set()
    rows = []
    for rowno, p, names in raw:
        if p in seen:
            raise ManifestError(f"{path}: row {rowno}: duplicate path {p!r}")
        seen.add(p)
        unknown = [n for n in names if n not in index]
        if unknown:
            raise ManifestError(f"{path}: row {rowno}: unknown class {unknown[0]!r}")
        rows.append((p, sorted({index[n] for n in names})))
    return DatasetManifest(classes, rows)


def write_manifest(path, manifest: DatasetManifest, write_classes: bool = True) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["path", "labels"])
        for p, labels in manifest.rows:
            w.writerow([p, " ".join(manifest.classes[i] for i in labels)])
    if write_classes:
        (path.parent / "classes.txt").write_text("\n".join(manifest.classes) + "\n")


# ---------------------------------------------------------------------------
# datasets


class ArrayDataset:
    """Precomputed canvases (N, 1, H, W) with multi-hot targets (N, K)."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, classes: list[str] | None = None):
        if len(inputs) != len(targets):
            raise ValueError(f"{len(inputs)} inputs but {len(targets)} targets")
        self.inputs = np.asarray(inputs, dtype=np.float32)
        self.targets = np.asarray(targets, dtype=np.float32)
        self.classes = classes or [str(k) for k in range(self.targets.shape[1])]

    def __len__(self) -> int:
        return len(self.inputs)

    def example(self, i: int, rng=None, aug: AugmentConfig | None = None, train: bool = False) -> np.ndarray:
        return self.inputs[i]

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=int)
        return ArrayDataset(self.inputs[idx], self.targets[idx], self.classes)


class AudioDataset:
    """Manifest rows decoded from WAV under ``root``; background noise is
    mixed in the waveform domain before the frontend during training."""

    def __init__(self, manifest: DatasetManifest, root, params: FrontendParams,
                 noise: list[Waveform] | None = None, indices=None):
        self.manifest = manifest
        self.root = Path(root)
        self.params = params
        self.noise = noise or []
        self.indices = list(range(len(manifest))) if indices is None else list(indices)
        self.targets = manifest.targets()[self.indices]
        self.classes = manifest.classes
        self._canvas: dict[int, np.ndarray] = {}
        self._wave: dict[int, Waveform] = {}

    def __len__(self) -> int:
        return len(self.indices)

    def waveform(self, i: int) -> Waveform:
        j = self.indices[i]
        if j not in self._wave:
            w = decode_wav(self.root / self.manifest.rows[j][0])
            if w.sample_rate != self.params.sample_rate:
                raise ConfigError(f"{self.manifest.rows[j][0]}: {w.sample_rate} Hz, expected {self.params.sample_rate} Hz")
            self._wave[j] = w
        return self._wave[j]

    def example(self, i: int, rng=None, aug: AugmentConfig | None = None, train: bool = False) -> np.ndarray:
        if train and aug is not None and aug.noise and self.noise and rng is not None:
            if rng.random() < aug.noise_prob:
                clip = self.noise[int(rng.integers(len(self.noise)))]
                return features(add_background_noise(self.waveform(i), clip, aug.noise_gain, rng), self.params)
        j = self.indices[i]
        if j not in self._canvas:
            self._canvas[j] = features(self.waveform(i), self.params)
        return self._canvas[j]

    def subset(self, idx) -> "AudioDataset":
        sub = AudioDataset(self.manifest, self.root, self.params, self.noise, [self.indices[i] for i in idx])
        sub._canvas, sub._wave = self._canvas, self._wave
        return sub


def load_noise_dir(path, sample_rate: int) -> list[Waveform]:
    clips = []
    for p in sorted(Path(path).glob("*.wav")):
        w = decode_wav(p)
        if w.sample_rate != sample_rate:
            raise ConfigError(f"noise clip {p.name} is {w.sample_rate} Hz, expected {sample_rate} Hz")
        clips.append(w)
    return clips


def primary_labels(targets: np.ndarray) -> np.ndarray:
    return np.argmax(targets, axis=1)


def stratified_split(targets: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (by first positive label) holdout; every class keeps at
    least one training example."""
    if fraction <= 0:
        return np.arange(len(targets)), np.array([], dtype=int)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    primary = primary_labels(targets)
    train, val = [], []
    for k in np.unique(primary):
        members = rng.permutation(np.flatnonzero(primary == k))
        n_val = min(int(round(fraction * len(members))), len(members) - 1)
        val.extend(members[:n_val])
        train.extend(members[n_val:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    n: int = 32
    num_classes: int = 4
    canvas: tuple[int, int] = (224, 224)
    seed: int = 0
    noise: float = 0.5
    bands: int = 3
    jitter: int = 4
    class_names: list[str] = field(default_factory=list)


def synthetic_spectrograms(spec: SyntheticSpec | None = None, **kw) -> ArrayDataset:
    """Standardized canvases where each class owns a set of horizontal
    frequency bands with a class-specific temporal modulation, plus noise.
    Examples cycle through the classes so counts are balanced."""
    spec = spec or SyntheticSpec(**kw)
    rng = np.random.default_rng(spec.seed)
    H, W = spec.canvas
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    centers = [rng.choice(np.arange(8, H - 8), spec.bands, replace=False) for _ in range(spec.num_classes)]
    rates = rng.uniform(1.0, 6.0, spec.num_classes)
    xs = np.empty((spec.n, 1, H, W), dtype=np.float32)
    ys = np.zeros((spec.n, spec.num_classes), dtype=np.float32)
    for i in range(spec.n):
        k = i % spec.num_classes
        shift = rng.integers(-spec.jitter, spec.jitter + 1)
        phase = rng.uniform(0, 2 * np.pi)
        img = np.zeros((H, W))
        for c in centers[k]:
            img += np.exp(-0.5 * ((rows - c - shift) / 2.5) ** 2)
        img *= 0.6 + 0.4 * np.sin(2 * np.pi * rates[k] * cols / W + phase)
        img += spec.noise * rng.standard_normal((H, W))
        img = (img - img.mean()) / img.std()
        xs[i, 0] = img
        ys[i, k] = 1.0
    names = spec.class_names or [f"class{k}" for k in range(spec.num_classes)]
    return ArrayDataset(xs, ys, names)


def synthetic_audio(root, n_per_class: int = 4, num_classes: int = 4, sample_rate: int = 16000,
                    seconds: float = 1.0, seed: int = 0) -> DatasetManifest:
    """Write tone clips (one base frequency per class, with a harmonic and
    noise) plus ``manifest.csv`` and ``classes.txt`` under ``root``."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    t = np.arange(int(sample_rate * seconds)) / sample_rate
    base = np.geomspace(300, min(4000, sample_rate / 5), num_classes)
    classes = [f"tone{k}" for k in range(num_classes)]
    rows = []
    for k in range(num_classes):
        for j in range(n_per_class):
            f = base[k] * rng.uniform(0.97, 1.03)
            x = 0.4 * np.sin(2 * np.pi * f * t) + 0.15 * np.sin(4 * np.pi * f * t)
            x += 0.02 * rng.standard_normal(len(t))
            name = f"audio/{classes[k]}_{j}.wav"
            write_wav(root / name, x, sample_rate)
            rows.append((name, [k]))
    manifest = DatasetManifest(classes, rows)
    write_manifest(root / "manifest.csv", manifest)
    return manifest


def synthetic_noise(root, sample_rate: int = 16000, seconds: float = 0.5, seed: int = 1) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    x = 0.1 * np.random.default_rng(seed).standard_normal(int(sample_rate * seconds))
    write_wav(root / "noise0.wav", x, sample_rate)
    return root

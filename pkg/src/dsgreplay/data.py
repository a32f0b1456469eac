"""Datasets, the RFDS binary format, class-incremental task streams and a
synthetic multichannel sinusoid generator.

RFDS layout (little-endian)::

    magic "RFDS" | u32 version=1 | u32 count | u32 C | u32 L | u32 K | u8 has_labels
    float32 samples, sample-major, row-major (count * C * L)
    u16 labels (count), present only when has_labels == 1
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"RFDS"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIB")


class DatasetError(ValueError):
    code = "dataset"


class MagicMismatchError(DatasetError):
    code = "magic_mismatch"


class TruncatedPayloadError(DatasetError):
    code = "truncated_payload"


class LabelRangeError(DatasetError):
    code = "label_out_of_range"


@dataclass
class LabeledDataset:
    samples: np.ndarray  # (N, C, L) float64
    labels: np.ndarray | None  # (N,) int64, None for unlabeled dumps
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3:
            raise DatasetError(f"samples must be (N, C, L), got {self.samples.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.samples.shape[0],):
                raise DatasetError("samples and labels are not aligned")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def channels(self) -> int:
        return self.samples.shape[1]

    @property
    def length(self) -> int:
        return self.samples.shape[2]

    def subset(self, index) -> "LabeledDataset":
        labels = None if self.labels is None else self.labels[index]
        return LabeledDataset(self.samples[index], labels, self.num_classes)

    def classes(self) -> list[int]:
        return sorted(np.unique(self.labels).tolist())


def save_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    has_labels = dataset.labels is not None
    n, c, length = dataset.samples.shape
    chunks = [
        HEADER.pack(MAGIC, VERSION, n, c, length, dataset.num_classes, int(has_labels)),
        np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes(),
    ]
    if has_labels:
        chunks.append(dataset.labels.astype("<u2").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path: str | Path, *, channels: int | None = None, length: int | None = None,
                 num_classes: int | None = None, normalize: "ChannelStats | None" = None) -> LabeledDataset:
    """Read an RFDS file, or a CSV whose rows are a flattened (C*L) sample
    followed by an integer label (``channels`` and ``length`` required)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        ds = _load_csv(path, channels, length, num_classes)
    else:
        ds = _load_rfds(path)
    return normalize.apply(ds) if normalize is not None else ds


def _load_rfds(path: Path) -> LabeledDataset:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, n, c, length, k, has_labels = HEADER.unpack_from(raw)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    n_values = n * c * length
    expected = HEADER.size + 4 * n_values + (2 * n if has_labels else 0)
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes, header implies {expected}")
    samples = np.frombuffer(raw, dtype="<f4", count=n_values, offset=HEADER.size).reshape(n, c, length)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=HEADER.size + 4 * n_values).astype(np.int64)
        if labels.size and labels.max() >= k:
            raise LabelRangeError(f"{path}: label {labels.max()} outside [0, {k})")
    return LabeledDataset(samples, labels, k)


def _load_csv(path: Path, channels, length, num_classes) -> LabeledDataset:
    if channels is None or length is None:
        raise DatasetError("CSV ingestion needs channels and length")
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    if table.shape[1] != channels * length + 1:
        raise TruncatedPayloadError(f"{path}: rows have {table.shape[1]} columns, expected {channels * length + 1}")
    labels = table[:, -1].astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.min() < 0 or labels.max() >= k:
        raise LabelRangeError(f"{path}: labels outside [0, {k})")
    return LabeledDataset(table[:, :-1].reshape(-1, channels, length), labels, k)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, datasets: Sequence[LabeledDataset]) -> "ChannelStats":
        x = np.concatenate([d.samples for d in datasets])
        std = x.std(axis=(0, 2))
        return cls(x.mean(axis=(0, 2)), np.where(std > 0, std, 1.0))

    def apply(self, ds: LabeledDataset) -> LabeledDataset:
        x = (ds.samples - self.mean[None, :, None]) / self.std[None, :, None]
        return LabeledDataset(x, ds.labels, ds.num_classes)


# ---------------------------------------------------------------------------
# task streams
# ---------------------------------------------------------------------------


@dataclass
class Task:
    classes: list[int]
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class TaskStream:
    tasks: list[Task]
    num_classes: int
    class_order: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    @property
    def sample_shape(self) -> tuple[int, int]:
        t = self.tasks[0].train
        return t.channels, t.length


def stratified_split(labels: np.ndarray, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; the first ``round(ratio * n_class)`` indices of
    each class go to the first part.  Both parts keep every class when it has
    at least two samples."""
    first, second = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(ratio * idx.size))
        if idx.size >= 2:
            k = min(max(k, 1), idx.size - 1)
        first.append(idx[:k])
        second.append(idx[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def split_stream(dataset: LabeledDataset, classes_per_task: int, class_order: Sequence[int] | None = None,
                 train_ratio: float = 0.8, rng: np.random.Generator | None = None) -> TaskStream:
    k = dataset.num_classes
    order = list(range(k)) if class_order is None else [int(c) for c in class_order]
    if sorted(order) != list(range(k)):
        raise ValueError(f"class_order must be a permutation of 0..{k - 1}")
    if classes_per_task < 1 or k % classes_per_task:
        raise ValueError(f"{k} classes cannot be split into groups of {classes_per_task}")
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    tasks = []
    for start in range(0, k, classes_per_task):
        group = order[start : start + classes_per_task]
        idx = np.flatnonzero(np.isin(dataset.labels, group))
        if idx.size == 0:
            raise ValueError(f"task with classes {group} has no samples")
        tr, te = stratified_split(dataset.labels[idx], train_ratio, rng)
        tasks.append(Task(sorted(group), dataset.subset(idx[tr]), dataset.subset(idx[te])))
    return TaskStream(tasks, k, order)


# ---------------------------------------------------------------------------
# synthetic stream
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    num_classes: int = 6
    classes_per_task: int = 2
    channels: int = 2
    length: int = 64
    train_per_class: int = 200
    test_per_class: int = 50
    noise: float = 0.05
    phase_jitter: float = 0.2
    amplitude_jitter: float = 0.1
    frequencies: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.classes_per_task < 1 or self.num_classes % self.classes_per_task:
            raise ValueError("num_classes must be a positive multiple of classes_per_task")
        if self.noise < 0 or self.phase_jitter < 0 or self.amplitude_jitter < 0:
            raise ValueError("noise and jitter levels must be >= 0")
        if self.frequencies is not None and len(self.frequencies) != self.num_classes:
            raise ValueError("need one base frequency per class")

    @property
    def samples_per_class(self) -> int:
        return self.train_per_class + self.test_per_class

    @property
    def train_ratio(self) -> float:
        return self.train_per_class / self.samples_per_class


def make_synthetic(spec: SynthSpec) -> LabeledDataset:
    """Class k: per-channel sinusoids at a class frequency with class-specific
    amplitude and phase, small per-sample phase/amplitude jitter, plus white
    noise.  Values are rounded to float32 so RFDS round trips are exact.

    By default classes alternate between two base frequencies (2 and 3 cycles
    per window), so classes from different tasks overlap in frequency and are
    told apart only by their amplitude/phase signature across channels.
    """
    rng = np.random.default_rng(spec.seed)
    k, c, length, per = spec.num_classes, spec.channels, spec.length, spec.samples_per_class
    default = 2.0 + np.arange(k) % 2
    freqs = np.asarray(spec.frequencies if spec.frequencies is not None else default, dtype=np.float64)
    amps = rng.uniform(0.5, 1.5, size=(k, c))
    phases = rng.uniform(0.0, 2 * np.pi, size=(k, c))
    t = np.arange(length) / length
    samples = np.empty((k * per, c, length))
    labels = np.repeat(np.arange(k), per)
    for cls in range(k):
        jitter = rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=(per, c, 1))
        scale = 1.0 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter, size=(per, c, 1))
        wave = np.sin(2 * np.pi * freqs[cls] * t[None, None, :] + phases[cls][None, :, None] + jitter)
        block = amps[cls][None, :, None] * scale * wave + spec.noise * rng.standard_normal((per, c, length))
        samples[cls * per : (cls + 1) * per] = block
    return LabeledDataset(samples.astype(np.float32).astype(np.float64), labels, k)

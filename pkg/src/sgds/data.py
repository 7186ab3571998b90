"""Task streams: synthetic Gaussian-mixture classes, embedding files, splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractViolation
from .rng import TAG_DATA, TAG_SPLIT, stream_rng

EMB_MAGIC = b"SGDSEMB1"


class FormatError(ValueError):
    """Malformed embedding file; ``offset`` is the failing byte position."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Task:
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    input_dim: int

    def __post_init__(self):
        seen: set[int] = set()
        for t in self.tasks:
            cs = set(t.classes)
            if cs & seen:
                raise ContractViolation("task class sets must be disjoint")
            seen |= cs
            for y in np.concatenate([t.train_y, t.test_y]):
                if int(y) not in cs:
                    raise ContractViolation("sample label outside its task's class set")
            if t.train_x.shape[1] != self.input_dim or t.test_x.shape[1] != self.input_dim:
                raise ContractViolation("all tasks must share input_dim")

    @property
    def num_classes(self) -> int:
        return sum(len(t.classes) for t in self.tasks)


@dataclass
class SyntheticSpec:
    """Gaussian-mixture stream with grouped (semantically related) classes."""

    groups: int = 4
    classes_per_group: int = 5
    dim: int = 64
    within_group_angle: float = 0.25
    noise_sigma: float = 0.15
    samples_per_class_train: int = 100
    samples_per_class_test: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ContractViolation("noise_sigma must be positive")
        if self.dim < self.groups:
            raise ContractViolation("dim must be >= groups to orthogonalize bases")

    @property
    def num_classes(self) -> int:
        return self.groups * self.classes_per_group


def split_classes(num_classes: int, num_tasks: int, seed: int) -> list[list[int]]:
    """Seeded Fisher-Yates shuffle of class ids, chunked into equal tasks."""
    if num_classes % num_tasks != 0:
        raise ContractViolation("num_classes must be divisible by num_tasks")
    rng = stream_rng(seed, TAG_SPLIT)
    perm = list(range(num_classes))
    for i in range(num_classes - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    per = num_classes // num_tasks
    return [perm[i * per:(i + 1) * per] for i in range(num_tasks)]


def _class_means(spec: SyntheticSpec) -> np.ndarray:
    """Unit class means: per-group near-orthogonal bases, rotated per class."""
    rng = stream_rng(spec.seed, TAG_DATA, 0)
    raw = rng.normal(size=(spec.groups, spec.dim))
    bases, _ = np.linalg.qr(raw.T)  # columns orthonormal
    bases = bases.T[: spec.groups]
    means = np.empty((spec.num_classes, spec.dim))
    for g in range(spec.groups):
        base = bases[g]
        for k in range(spec.classes_per_group):
            u = rng.normal(size=spec.dim)
            u -= (u @ base) * base
            n = np.linalg.norm(u)
            u = u / n if n > 0 else u
            c = g * spec.classes_per_group + k
            means[c] = np.cos(spec.within_group_angle) * base \
                + np.sin(spec.within_group_angle) * u
    return means


def generate_class_pool(spec: SyntheticSpec):
    """Per-class train/test sample arrays: mean + isotropic Gaussian noise."""
    means = _class_means(spec)
    train, test = {}, {}
    for c in range(spec.num_classes):
        rng = stream_rng(spec.seed, TAG_DATA, 1, c)
        train[c] = means[c] + spec.noise_sigma * rng.normal(
            size=(spec.samples_per_class_train, spec.dim))
        test[c] = means[c] + spec.noise_sigma * rng.normal(
            size=(spec.samples_per_class_test, spec.dim))
    return train, test


def make_task_stream(train: dict, test: dict, dim: int,
                     num_tasks: int, seed: int) -> TaskStream:
    """Assemble a TaskStream from per-class sample dicts via split_classes."""
    partition = split_classes(len(train), num_tasks, seed)
    tasks = []
    for chunk in partition:
        tx = np.concatenate([train[c] for c in chunk])
        ty = np.concatenate([np.full(len(train[c]), c, dtype=np.int64) for c in chunk])
        ex = np.concatenate([test[c] for c in chunk])
        ey = np.concatenate([np.full(len(test[c]), c, dtype=np.int64) for c in chunk])
        tasks.append(Task(tuple(chunk), tx, ty, ex, ey))
    return TaskStream(tasks, dim)


def generate_synthetic(spec: SyntheticSpec, num_tasks: int,
                       split_seed: int | None = None) -> TaskStream:
    train, test = generate_class_pool(spec)
    seed = spec.seed if split_seed is None else split_seed
    return make_task_stream(train, test, spec.dim, num_tasks, seed)


def write_embeddings(path, x: np.ndarray, y: np.ndarray, num_classes: int) -> None:
    """Write samples in the SGDSEMB1 little-endian binary layout."""
    x = np.asarray(x, dtype="<f4")
    y = np.asarray(y, dtype=np.uint32)
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<III", x.shape[0], x.shape[1], num_classes))
        for label, vec in zip(y, x):
            f.write(struct.pack("<I", int(label)))
            f.write(vec.tobytes())


def load_embeddings(path):
    """Read an SGDSEMB1 file; returns (x, y, num_classes)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != EMB_MAGIC:
        raise FormatError("bad magic", 0)
    if len(blob) < 20:
        raise FormatError("truncated header", len(blob))
    num_samples, dim, num_classes = struct.unpack_from("<III", blob, 8)
    if dim == 0:
        raise FormatError("dim must be positive", 12)
    rec = 4 + 4 * dim
    expected = 20 + num_samples * rec
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes, got {len(blob)}",
                          min(len(blob), expected))
    x = np.empty((num_samples, dim), dtype=np.float64)
    y = np.empty(num_samples, dtype=np.int64)
    off = 20
    for i in range(num_samples):
        (label,) = struct.unpack_from("<I", blob, off)
        if label >= num_classes:
            raise FormatError(f"label {label} >= num_classes {num_classes}", off)
        y[i] = label
        x[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=off + 4)
        off += rec
    return x, y, num_classes


def embeddings_to_stream(x: np.ndarray, y: np.ndarray, num_classes: int,
                         num_tasks: int, seed: int,
                         test_per_class: int) -> TaskStream:
    """Split a loaded sample set into per-class train/test and chunk into tasks.

    The last ``test_per_class`` samples of each class (file order) are the
    test split.
    """
    train, test = {}, {}
    for c in range(num_classes):
        xc = x[y == c]
        if len(xc) <= test_per_class:
            raise ContractViolation(f"class {c} has too few samples for the test split")
        train[c] = xc[:-test_per_class] if test_per_class else xc
        test[c] = xc[len(xc) - test_per_class:]
    return make_task_stream(train, test, x.shape[1], num_tasks, seed)


def compute_prototypes(x: np.ndarray, y: np.ndarray, extractor) -> dict[int, np.ndarray]:
    """Class-mean of extractor outputs over each class's samples."""
    feats = extractor(x)
    protos = {}
    for c in np.unique(y):
        sel = feats[y == c]
        if len(sel) == 0:
            raise ContractViolation(f"class {c} has no samples")
        protos[int(c)] = sel.mean(axis=0)
    return protos

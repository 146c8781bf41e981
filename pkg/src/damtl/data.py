"""Corpora, task carving, and label maps.

A single base corpus plays the auxiliary role: its full class set is the
superset, and tasks are carved from subsets with a controlled number of
shared classes. Samples of a class shared by several tasks are partitioned,
never duplicated. All randomness flows through numpy SeedSequence streams
keyed by (seed, purpose, ...), so every split and batch order is a pure
function of its inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# SeedSequence purpose codes; keep stable or every seeded artifact changes.
_STREAM_SPLIT = 1
_STREAM_BATCH = 2
_STREAM_CORPUS = 3


@dataclass(frozen=True)
class LabeledSet:
    """Images (n, c, h, w) in [0, 1] with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise DataError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(
                f"labels outside [0, {self.class_count}): min={self.labels.min()}, max={self.labels.max()}"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class TaskDataset:
    """One task's 70/30 split with local labels and its local->global map."""

    task_id: int
    train: LabeledSet
    test: LabeledSet
    label_map: tuple  # local id -> global id, injective

    @property
    def class_count(self):
        return len(self.label_map)

    def to_global(self, local_labels: np.ndarray) -> np.ndarray:
        return np.asarray(self.label_map, dtype=np.int64)[local_labels]


@dataclass(frozen=True)
class OverlapSpec:
    """How to carve tasks out of the base class set.

    Consecutive tasks share exactly ``shared_classes`` global classes; the
    layout is a sliding window over a seeded permutation of the class ids.
    """

    tasks: int
    classes_per_task: int
    shared_classes: int
    seed: int

    def required_classes(self) -> int:
        return self.tasks * self.classes_per_task - (self.tasks - 1) * self.shared_classes

    def validate(self, class_count: int) -> None:
        if self.tasks < 1 or self.classes_per_task < 1:
            raise DataError("spec needs at least one task and one class per task")
        if not 0 <= self.shared_classes <= self.classes_per_task:
            raise DataError(
                f"shared_classes={self.shared_classes} must be in [0, {self.classes_per_task}]"
            )
        if self.tasks > 1 and self.shared_classes == self.classes_per_task:
            raise DataError("tasks would be identical: shared_classes == classes_per_task")
        need = self.required_classes()
        if need > class_count:
            raise DataError(
                f"infeasible spec: {self.tasks} tasks x {self.classes_per_task} classes with "
                f"{self.shared_classes} shared need {need} distinct classes, corpus has {class_count}"
            )


def load_idx(images_path, labels_path) -> LabeledSet:
    """Read a big-endian IDX image/label file pair, normalizing pixels to [0, 1]."""
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataError(f"{images_path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise DataError(f"{images_path}: expected {expected} bytes for {count} images, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).astype(np.float64) / 255.0
    images = pixels.reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError(f"{labels_path}: truncated IDX label header")
    magic, lcount = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: bad labels magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) != 8 + lcount:
        raise DataError(f"{labels_path}: expected {8 + lcount} bytes for {lcount} labels, got {len(raw)}")
    if lcount != count:
        raise DataError(f"image/label count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)

    class_count = int(labels.max()) + 1 if count else 0
    return LabeledSet(images, labels, class_count)


def load_csv(path) -> LabeledSet:
    """Read ``label,px0,...,pxN`` rows of [0, 1] floats as square 1-channel images."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        cols = header.split(",")
        if len(cols) < 2 or cols[0] != "label" or cols[1] != "px0":
            raise DataError(f"{path}: expected header 'label,px0,...', got {header[:60]!r}")
        pixel_count = len(cols) - 1
        side = int(round(pixel_count**0.5))
        if side * side != pixel_count:
            raise DataError(f"{path}: {pixel_count} pixels per row is not a square image")
        labels = []
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != pixel_count + 1:
                raise DataError(f"{path}:{lineno}: ragged row with {len(parts)} fields, expected {pixel_count + 1}")
            try:
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
    if not rows:
        raise DataError(f"{path}: no data rows")
    images = np.asarray(rows, dtype=np.float64).reshape(len(rows), 1, side, side)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return LabeledSet(images, labels, int(labels.max()) + 1)


def save_csv(path, ds: LabeledSet) -> None:
    """Write the csv form of a single-channel corpus (exact float round-trip)."""
    n, c, h, w = ds.images.shape
    if c != 1 or h != w:
        raise DataError(f"csv export needs square 1-channel images, got {ds.images.shape}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("label," + ",".join(f"px{i}" for i in range(h * w)) + "\n")
        flat = ds.images.reshape(n, h * w)
        for i in range(n):
            f.write(str(int(ds.labels[i])) + "," + ",".join(repr(v) for v in flat[i]) + "\n")


def make_synthetic(
    class_count: int = 10,
    samples_per_class: int = 500,
    image_size: int = 16,
    noise: float = 0.25,
    max_shift: int = 2,
    seed: int = 0,
) -> LabeledSet:
    """Generate a learnable image corpus: one smoothed template per class,
    jittered by circular shifts, brightness scaling, and pixel noise."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_CORPUS]))
    templates = rng.uniform(0.0, 1.0, size=(class_count, image_size + 2, image_size + 2))
    # 3x3 box smoothing gives spatial structure a small conv kernel can pick up.
    smoothed = np.zeros((class_count, image_size, image_size))
    for dy in range(3):
        for dx in range(3):
            smoothed += templates[:, dy : dy + image_size, dx : dx + image_size]
    smoothed /= 9.0

    n = class_count * samples_per_class
    images = np.empty((n, 1, image_size, image_size))
    labels = np.repeat(np.arange(class_count, dtype=np.int64), samples_per_class)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    brightness = rng.uniform(0.8, 1.2, size=n)
    pixel_noise = rng.normal(0.0, noise, size=(n, image_size, image_size))
    for i in range(n):
        base = np.roll(smoothed[labels[i]], tuple(shifts[i]), axis=(0, 1))
        images[i, 0] = base * brightness[i] + pixel_noise[i]
    np.clip(images, 0.0, 1.0, out=images)
    perm = rng.permutation(n)
    return LabeledSet(images[perm], labels[perm], class_count)


def split_tasks(
    base: LabeledSet,
    spec: OverlapSpec,
    train_fraction: float = 0.7,
    train_cap: int | None = None,
    test_cap: int | None = None,
):
    """Carve the base corpus into (aux corpus, per-task datasets).

    Task j's global classes are the window perm[j*(c_j-k) : j*(c_j-k)+c_j] of
    a seeded class permutation, so consecutive tasks share exactly k classes.
    Shared-class samples are partitioned among the owning tasks. Each task is
    shuffled and split train/test at ``train_fraction`` (train count rounded,
    so within half a sample of the exact fraction), then capped. The aux set
    keeps global labels and contains every sample of every chosen class.
    """
    spec.validate(base.class_count)
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _STREAM_SPLIT]))
    perm = rng.permutation(base.class_count)
    stride = spec.classes_per_task - spec.shared_classes
    task_globals = [
        [int(g) for g in perm[j * stride : j * stride + spec.classes_per_task]]
        for j in range(spec.tasks)
    ]

    by_class = {g: np.flatnonzero(base.labels == g) for g in set().union(*map(set, task_globals))}
    owners = {g: [j for j in range(spec.tasks) if g in task_globals[j]] for g in by_class}

    # Partition each class's samples among its owning tasks (seeded shuffle,
    # contiguous chunks): no sample lands in two tasks.
    share: dict[int, dict[int, np.ndarray]] = {j: {} for j in range(spec.tasks)}
    for g in sorted(by_class):
        idx = by_class[g][rng.permutation(len(by_class[g]))]
        chunks = np.array_split(idx, len(owners[g]))
        for j, chunk in zip(owners[g], chunks):
            share[j][g] = chunk

    tasks = []
    for j in range(spec.tasks):
        label_map = tuple(sorted(task_globals[j]))
        local_of = {g: i for i, g in enumerate(label_map)}
        idx = np.concatenate([share[j][g] for g in label_map])
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < 2:
            raise DataError(f"task {j} has too few samples ({len(idx)}) to split")
        n_train = int(round(train_fraction * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx, test_idx = idx[:n_train], idx[n_train:]
        if train_cap is not None:
            train_idx = train_idx[:train_cap]
        if test_cap is not None:
            test_idx = test_idx[:test_cap]

        def localize(indices):
            images = base.images[indices]
            labels = np.asarray([local_of[g] for g in base.labels[indices]], dtype=np.int64)
            return LabeledSet(images, labels, len(label_map))

        tasks.append(TaskDataset(j, localize(train_idx), localize(test_idx), label_map))

    aux_classes = sorted(set().union(*map(set, task_globals)))
    aux_idx = np.flatnonzero(np.isin(base.labels, aux_classes))
    aux = LabeledSet(base.images[aux_idx], base.labels[aux_idx], base.class_count)
    return aux, tasks


def split_manifest(spec: OverlapSpec, aux: LabeledSet, tasks) -> dict:
    """JSON-ready record of what the split produced."""
    return {
        "seed": spec.seed,
        "spec": {
            "tasks": spec.tasks,
            "classes_per_task": spec.classes_per_task,
            "shared_classes": spec.shared_classes,
        },
        "aux": {
            "classes": sorted(int(g) for g in np.unique(aux.labels)),
            "samples": len(aux),
        },
        "tasks": [
            {
                "task": t.task_id,
                "global_classes": [int(g) for g in t.label_map],
                "train_samples": len(t.train),
                "test_samples": len(t.test),
            }
            for t in tasks
        ],
    }


def manifest_json(spec: OverlapSpec, aux: LabeledSet, tasks) -> str:
    return json.dumps(split_manifest(spec, aux, tasks), indent=2, sort_keys=True) + "\n"


def batches(split: LabeledSet, batch_size: int, seed: int, epoch: int, task_id: int):
    """Seeded batch index arrays; the permutation depends only on
    (seed, epoch, task_id). The last batch may be short."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if n == 0:
        raise DataError("cannot batch an empty split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_BATCH, task_id, epoch]))
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]

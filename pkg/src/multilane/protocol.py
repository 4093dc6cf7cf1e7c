"""Benchmark structure for multi-label class-incremental learning plus a
synthetic scene generator for desk-scale experiments.

A benchmark is an ordered list of task specs with pairwise-disjoint class
sets. Task views project full ground-truth label vectors down to the classes
annotated at that step; images positive only for other steps' classes stay in
the view as all-negative samples, which is exactly the label-incompleteness
that makes this setting hard.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .archive import load_archive, save_archive
from .errors import ConfigError, IntegrityError
from .tensor import Tensor


@dataclass(frozen=True)
class TaskSpec:
    index: int                 # 1-based step number
    class_ids: Tuple[int, ...]


@dataclass(eq=False)
class MultiLabelDataset:
    """Images [N x C x H x W] with full binary labels [N x K] (generator-side
    ground truth; views restrict what training actually sees)."""

    images: np.ndarray
    labels: np.ndarray
    meta: Dict = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.ndim != 2:
            raise ConfigError(f"dataset ranks {self.images.ndim}/{self.labels.ndim}, want 4/2")
        if len(self.images) != len(self.labels):
            raise IntegrityError(f"{len(self.images)} images vs {len(self.labels)} label rows")
        if self.meta is None:
            self.meta = {}

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def image(self, i: int) -> Tensor:
        return Tensor(self.images[i], requires_grad=False)


@dataclass
class TaskView:
    """Read-only cursor over a dataset with labels restricted to one task."""

    dataset: MultiLabelDataset
    spec: TaskSpec

    def __len__(self):
        return len(self.dataset)

    def labels(self) -> np.ndarray:
        return project_labels(self.dataset.labels, self.spec.class_ids)

    def example(self, i: int) -> Tuple[Tensor, np.ndarray]:
        return self.dataset.image(i), self.dataset.labels[i, list(self.spec.class_ids)]


def project_labels(labels: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    ids = list(class_ids)
    if ids and (min(ids) < 0 or max(ids) >= labels.shape[1]):
        raise ConfigError(f"class ids {ids} outside label space of {labels.shape[1]}")
    return labels[:, ids]


def task_view(dataset: MultiLabelDataset, spec: TaskSpec) -> TaskView:
    project_labels(dataset.labels, spec.class_ids)  # range check up front
    return TaskView(dataset=dataset, spec=spec)


def make_task_splits(total_classes: int, base: int, increment: int,
                     class_order_seed: Optional[int] = None) -> List[TaskSpec]:
    """B{base}-C{increment} task partition over a seeded class permutation.

    base = 0 means every task (including the first) carries `increment`
    classes; otherwise task 1 carries `base` and the rest carry `increment`.
    """
    if total_classes < 1:
        raise ConfigError(f"total_classes must be positive, got {total_classes}")
    if base != 0 and not 1 <= base < total_classes:
        raise ConfigError(f"base {base} outside {{0}} u [1, {total_classes})")
    if increment < 1:
        raise ConfigError(f"increment must be positive, got {increment}")
    first = base if base > 0 else increment
    rest = total_classes - first
    if rest < 0 or rest % increment != 0:
        raise ConfigError(
            f"{rest} classes after the first task are not divisible by increment {increment}")
    sizes = [first] + [increment] * (rest // increment)
    if class_order_seed is None:
        order = np.arange(total_classes)
    else:
        order = np.random.default_rng(class_order_seed).permutation(total_classes)
    specs = []
    off = 0
    for i, size in enumerate(sizes, start=1):
        specs.append(TaskSpec(index=i, class_ids=tuple(int(c) for c in order[off:off + size])))
        off += size
    return specs


@dataclass
class MLCILBenchmark:
    tasks: List[TaskSpec]
    train: Optional[MultiLabelDataset] = None
    test: Optional[MultiLabelDataset] = None

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def seen_classes(self, step: int) -> List[int]:
        """Evaluation class set after step t: everything annotated so far."""
        out: List[int] = []
        for spec in self.tasks[:step]:
            out.extend(spec.class_ids)
        return out

    def train_view(self, step: int) -> TaskView:
        return task_view(self.train, self.tasks[step - 1])

    def test_view(self, step: int) -> TaskView:
        return task_view(self.test, self.tasks[step - 1])


def make_benchmark(total_classes: int, base: int, increment: int,
                   class_order_seed: Optional[int] = None,
                   train: Optional[MultiLabelDataset] = None,
                   test: Optional[MultiLabelDataset] = None) -> MLCILBenchmark:
    for ds, name in ((train, "train"), (test, "test")):
        if ds is not None and ds.num_classes != total_classes:
            raise IntegrityError(f"{name} dataset has {ds.num_classes} classes, benchmark {total_classes}")
    return MLCILBenchmark(tasks=make_task_splits(total_classes, base, increment, class_order_seed),
                          train=train, test=test)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def class_stamps(num_classes: int, seed: int, channels: int, cell: int) -> np.ndarray:
    """Deterministic signed pattern per class, [K x channels x cell x cell].

    Each class activates its own random half of the cell's pixels with
    uniform magnitudes and fixed random signs. Sparse supports keep the
    magnitude patterns of distinct classes distinguishable, signs keep them
    near-orthogonal and uncorrelated with flat background noise -- both
    matter for the generator-honesty template match.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    shape = (num_classes, channels, cell, cell)
    mask = rng.random(shape) < 0.5
    mags = rng.uniform(0.4, 1.0, size=shape)
    signs = rng.choice([-1.0, 1.0], size=shape)
    return (mask * mags * signs).astype(np.float32)


def synth_generate(seed: int, num_classes: int, num_images: int,
                   max_objects: int = 4, tail_exponent: float = 0.0,
                   image_size: int = 32, cell: int = 8, channels: int = 3,
                   noise: float = 0.02, stamp_seed: Optional[int] = None,
                   sign_flip_prob: float = 0.0, copies: int = 1,
                   distractor_prob: float = 0.0) -> MultiLabelDataset:
    """Multi-label scenes: a present class stamps its pattern into ``copies``
    distinct grid cells; presence follows a (k+1)^-tail law with at least one
    and at most max_objects positives per image.

    ``stamp_seed`` fixes the class patterns independently of scene sampling,
    so train/test splits of the same world share stamps but not scenes; it
    defaults to ``seed``.

    ``sign_flip_prob`` is the probability that an occurrence is stamped
    negated (contrast-inverted); ``distractor_prob`` adds, per absent class,
    a single-cell unlabeled clutter stamp of that class with the given
    probability. With copies >= 2 plus distractors, class presence means
    "this pattern occurs `copies` times" -- a count that softmax-pooled
    single-layer summaries are nearly blind to (a convex combination of one
    matching token equals that of two), while the frozen attention mixing
    writes token counts into every deeper tap. That gives the random desk
    backbone a usable stand-in for a pretrained model's feature hierarchy.
    """
    if num_classes < 2:
        raise ConfigError(f"need >= 2 classes, got {num_classes}")
    if image_size % cell != 0:
        raise ConfigError(f"image_size {image_size} not divisible by cell {cell}")
    if copies < 1:
        raise ConfigError(f"copies must be >= 1, got {copies}")
    grid = image_size // cell
    n_cells = grid * grid
    if max_objects < 1 or max_objects * copies > n_cells:
        raise ConfigError(
            f"max_objects {max_objects} x {copies} copies exceeds {n_cells} cells")

    if stamp_seed is None:
        stamp_seed = seed
    stamps = class_stamps(num_classes, stamp_seed, channels, cell)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))

    weights = (np.arange(num_classes) + 1.0) ** (-float(tail_exponent))
    target_mean = (1.0 + max_objects) / 2.0
    probs = np.clip(weights * (target_mean / weights.sum()), 0.0, 0.95)
    pick_p = weights / weights.sum()

    images = np.empty((num_images, channels, image_size, image_size), dtype=np.float32)
    labels = np.zeros((num_images, num_classes), dtype=np.float32)
    for i in range(num_images):
        present = np.flatnonzero(rng.random(num_classes) < probs)
        if len(present) > max_objects:
            present = rng.choice(present, size=max_objects, replace=False)
        elif len(present) == 0:
            present = np.array([rng.choice(num_classes, p=pick_p)])
        present = np.sort(present)
        absent = np.setdiff1d(np.arange(num_classes), present)
        distract = absent[rng.random(len(absent)) < distractor_prob] if distractor_prob > 0 else []
        spare = n_cells - len(present) * copies
        if len(distract) > spare:
            distract = rng.choice(distract, size=spare, replace=False)
        n_stamps = len(present) * copies + len(distract)
        cells = rng.choice(n_cells, size=n_stamps, replace=False)
        img = rng.uniform(0.0, noise, size=(channels, image_size, image_size)).astype(np.float32)

        def put(k, cidx):
            gy, gx = divmod(int(cidx), grid)
            sign = -1.0 if (sign_flip_prob > 0.0 and rng.random() < sign_flip_prob) else 1.0
            img[:, gy * cell:(gy + 1) * cell, gx * cell:(gx + 1) * cell] += sign * stamps[k]

        pos = 0
        for k in present:
            for _ in range(copies):
                put(k, cells[pos])
                pos += 1
            labels[i, k] = 1.0
        for k in distract:
            put(int(k), cells[pos])
            pos += 1
        images[i] = img

    meta = {
        "seed": int(seed),
        "stamp_seed": int(stamp_seed),
        "num_classes": int(num_classes),
        "num_images": int(num_images),
        "max_objects": int(max_objects),
        "tail_exponent": float(tail_exponent),
        "image_size": int(image_size),
        "cell": int(cell),
        "channels": int(channels),
        "noise": float(noise),
        "sign_flip_prob": float(sign_flip_prob),
        "copies": int(copies),
        "distractor_prob": float(distractor_prob),
        "class_order": list(range(num_classes)),
        "class_counts": [int(x) for x in labels.sum(axis=0)],
    }
    return MultiLabelDataset(images=images, labels=labels, meta=meta)


def contains_stamp(image: np.ndarray, stamp: np.ndarray, cell: int,
                   threshold: float = 0.5) -> bool:
    """Template-match a class stamp against every grid cell of an image.

    Correlation is matched in absolute value so sign-flipped occurrences
    count as present.
    """
    channels, size, _ = image.shape
    grid = size // cell
    flat = stamp.reshape(-1).astype(np.float64)
    flat_norm = np.linalg.norm(flat)
    for gy in range(grid):
        for gx in range(grid):
            patch = image[:, gy * cell:(gy + 1) * cell, gx * cell:(gx + 1) * cell]
            vec = patch.reshape(-1).astype(np.float64)
            denom = max(np.linalg.norm(vec) * flat_norm, 1e-12)
            if abs(float(vec @ flat)) / denom > threshold:
                return True
    return False


def count_stamp_cells(image: np.ndarray, stamp: np.ndarray, cell: int,
                      threshold: float = 0.5) -> int:
    """Number of grid cells matching a class stamp (absolute correlation, so
    contrast-inverted occurrences count). With copies >= 2 generators, a
    class is present exactly when this count reaches `copies`."""
    channels, size, _ = image.shape
    grid = size // cell
    flat = stamp.reshape(-1).astype(np.float64)
    flat_norm = np.linalg.norm(flat)
    hits = 0
    for gy in range(grid):
        for gx in range(grid):
            patch = image[:, gy * cell:(gy + 1) * cell, gx * cell:(gx + 1) * cell]
            vec = patch.reshape(-1).astype(np.float64)
            denom = max(np.linalg.norm(vec) * flat_norm, 1e-12)
            if abs(float(vec @ flat)) / denom > threshold:
                hits += 1
    return hits


# ---------------------------------------------------------------------------
# serialization: one MLTA archive + JSON sidecar manifest
# ---------------------------------------------------------------------------

def save_dataset(path_prefix: str, dataset: MultiLabelDataset) -> None:
    save_archive(f"{path_prefix}.mlta", {"images": dataset.images, "labels": dataset.labels})
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(dataset.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path_prefix: str) -> MultiLabelDataset:
    entries = load_archive(f"{path_prefix}.mlta")
    for name in ("images", "labels"):
        if name not in entries:
            raise IntegrityError(f"dataset archive lacks '{name}' entry")
    try:
        with open(f"{path_prefix}.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    return MultiLabelDataset(images=entries["images"], labels=entries["labels"], meta=meta)

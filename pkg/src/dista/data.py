"""Datasets: CIFAR-10 binary batches, direct encoding, and a synthetic
temporal-order task whose classes differ only in the order of their frames."""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import records
from .records import FormatError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataError(ValueError):
    """Well-formed file with invalid content."""


class SpecError(ValueError):
    pass


@dataclass
class Sample:
    input: np.ndarray
    label: int


@dataclass
class Dataset:
    """Inputs plus integer labels.

    ``kind`` is ``"image"`` (inputs ``(n, C, H, W)`` in [0, 1], standardized
    on the fly with ``mean``/``std``) or ``"sequence"`` (inputs
    ``(n, T, N, F)``; batches come out time-major).
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    kind: str = "sequence"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        idx = np.asarray(idx)
        y = self.labels[idx]
        x = self.inputs[idx]
        if self.kind == "image":
            x = standardize(x, self.mean, self.std)
        else:
            x = np.ascontiguousarray(np.swapaxes(x, 0, 1))
        return x, y

    def samples(self):
        for x, y in zip(self.inputs, self.labels):
            yield Sample(x, int(y))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.kind, self.mean, self.std)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


def parse_cifar_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Split a binary batch into uint8 images ``(n, 3, 32, 32)`` and labels."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"batch size {len(raw)} is not a multiple of {CIFAR_RECORD} bytes")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"record {bad} has label byte {labels[bad]} > 9")
    return arr[:, 1:].reshape((-1,) + CIFAR_SHAPE).copy(), labels


def serialize_cifar_records(images: np.ndarray, labels) -> bytes:
    """Inverse of :func:`parse_cifar_records`."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    out = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = np.asarray(labels, dtype=np.uint8)
    out[:, 1:] = images
    return out.tobytes()


def _read_batches(paths):
    imgs, labs = [], []
    for p in paths:
        with open(p, "rb") as fh:
            im, lb = parse_cifar_records(fh.read())
        imgs.append(im)
        labs.append(lb)
    return np.concatenate(imgs), np.concatenate(labs)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std of ``(n, C, H, W)`` images."""
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    return ((images - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def load_cifar10(dir_path, classes=None, train_limit: int | None = None,
                 test_limit: int | None = None) -> tuple[Dataset, Dataset]:
    """Read the standard binary distribution from ``dir_path``.

    ``classes`` optionally keeps a subset of labels, relabelled to
    ``0..len(classes)-1`` in the given order.  Standardization statistics
    come from the (possibly subset) training split.
    """
    d = Path(dir_path)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 batch files missing from {d}: {', '.join(missing)}")
    tr_x, tr_y = _read_batches([d / f for f in CIFAR_TRAIN_FILES])
    te_x, te_y = _read_batches([d / CIFAR_TEST_FILE])
    num_classes = 10
    if classes is not None:
        classes = list(classes)
        remap = np.full(10, -1, dtype=np.int64)
        remap[classes] = np.arange(len(classes))
        keep_tr, keep_te = remap[tr_y] >= 0, remap[te_y] >= 0
        tr_x, tr_y = tr_x[keep_tr], remap[tr_y[keep_tr]]
        te_x, te_y = te_x[keep_te], remap[te_y[keep_te]]
        num_classes = len(classes)
    if train_limit:
        tr_x, tr_y = tr_x[:train_limit], tr_y[:train_limit]
    if test_limit:
        te_x, te_y = te_x[:test_limit], te_y[:test_limit]
    tr = (tr_x.astype(np.float32) / 255.0)
    te = (te_x.astype(np.float32) / 255.0)
    mean, std = channel_stats(tr)
    return (Dataset(tr, tr_y, num_classes, "image", mean, std),
            Dataset(te, te_y, num_classes, "image", mean, std))


def encode_direct(image: np.ndarray, T: int, mean=None, std=None) -> np.ndarray:
    """Replicate a (standardized) image as the input current for ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    x = np.asarray(image, dtype=np.float32)
    if mean is not None:
        x = standardize(x[None], np.asarray(mean), np.asarray(std))[0]
    return np.broadcast_to(x, (T,) + x.shape).copy()


# ---------------------------------------------------------------------------
# synthetic temporal-order task
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Classes share the same frames and differ only in their order.

    With ``random_phase`` each sample starts its class's cycle at a random
    frame, so every timestep shows each frame equally often regardless of
    class; classes are then the distinct *cyclic* orders.
    """

    num_classes: int = 4
    num_frames: int = 4
    frame_size: int = 8
    timesteps: int = 8
    noise_rate: float = 0.05
    train_size: int = 4000
    test_size: int = 1000
    seed: int = 0
    density: float = 0.5
    random_phase: bool = True
    permutations: list[tuple[int, ...]] | None = None
    frames: np.ndarray | None = field(default=None, repr=False)


def _canonical_cycle(p):
    i = p.index(0)
    return tuple(p[i:] + p[:i])


def _check_permutations(perms, k, random_phase):
    for p in perms:
        if sorted(p) != list(range(k)):
            raise SpecError(f"{p} is not a permutation of {k} frames")
    keys = [_canonical_cycle(list(p)) if random_phase else tuple(p) for p in perms]
    if len(set(keys)) != len(keys):
        raise SpecError("class orderings are not pairwise distinct" +
                        (" up to rotation" if random_phase else ""))


def synthetic_structure(spec: SyntheticSpec):
    """Frames and per-class orderings, drawn from ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 0])
    k, f = spec.num_frames, spec.frame_size
    frames = spec.frames
    if frames is None:
        while True:
            frames = (rng.random((k, f, f)) < spec.density).astype(np.float32)
            if len({fr.tobytes() for fr in frames}) == k:
                break
    perms = spec.permutations
    if perms is None:
        if spec.random_phase:
            pool = [(0,) + p for p in itertools.permutations(range(1, k))]
        else:
            pool = list(itertools.permutations(range(k)))
        if spec.num_classes > len(pool):
            raise SpecError(f"only {len(pool)} distinct orderings of {k} frames exist")
        choice = rng.choice(len(pool), size=spec.num_classes, replace=False)
        perms = [pool[i] for i in sorted(choice)]
    perms = [tuple(int(i) for i in p) for p in perms]
    if len(perms) != spec.num_classes:
        raise SpecError("need one ordering per class")
    _check_permutations(perms, k, spec.random_phase)
    return frames, perms


def _make_split(n, frames, perms, spec, rng):
    c, k, T = spec.num_classes, spec.num_frames, spec.timesteps
    labels = rng.permutation(np.arange(n) % c)
    phase = rng.integers(0, k, size=n) if spec.random_phase else np.zeros(n, dtype=np.int64)
    slot = (np.arange(T) * k) // T
    perm_arr = np.asarray(perms)
    frame_idx = perm_arr[labels[:, None], (slot[None, :] + phase[:, None]) % k]
    x = frames[frame_idx]
    if spec.noise_rate > 0:
        flips = rng.random(x.shape) < spec.noise_rate
        x = np.where(flips, 1.0 - x, x).astype(np.float32)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), c, "sequence")


def gen_temporal_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Train/test splits of ``(T, N, F)`` binary sequences.

    Frame ``perm[(floor(t*K/T) + phase) mod K]`` is shown at step ``t``;
    rows of a frame are tokens.  Class counts are exactly balanced when the
    split size is a multiple of ``num_classes``.
    """
    frames, perms = synthetic_structure(spec)
    rng = np.random.default_rng([spec.seed, 1, spec.timesteps])
    train = _make_split(spec.train_size, frames, perms, spec, rng)
    test = _make_split(spec.test_size, frames, perms, spec, rng)
    return train, test


def save_dataset(path, dataset: Dataset, note: str = "") -> int:
    """Write a dataset to the tensor-record container."""
    header = f"kind = {dataset.kind}\nnum_classes = {dataset.num_classes}\n{note}"
    tensors = [("inputs", dataset.inputs.astype(np.float32)), ("labels", dataset.labels.astype(np.int64))]
    if dataset.mean is not None:
        tensors += [("mean", np.asarray(dataset.mean, np.float32)), ("std", np.asarray(dataset.std, np.float32))]
    return records.write(path, header, tensors)


def load_dataset(path) -> Dataset:
    header, tensors = records.read(path)
    meta = dict(line.split(" = ", 1) for line in header.splitlines() if " = " in line)
    t = dict(tensors)
    try:
        ds = Dataset(t["inputs"], t["labels"], int(meta["num_classes"]), meta["kind"],
                     t.get("mean"), t.get("std"))
    except KeyError as exc:
        raise FormatError(f"dataset container lacks {exc}") from None
    if len(ds.inputs) != len(ds.labels):
        raise FormatError("inputs and labels disagree on sample count")
    if ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() >= ds.num_classes):
        raise DataError("label outside [0, num_classes)")
    return ds


def batch_iter(samples, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch, shuffled by ``(seed, epoch)``.

    A trailing batch of fewer than two samples is dropped.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = samples if isinstance(samples, (int, np.integer)) else len(samples)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def default_cifar_dir() -> str:
    return os.environ.get("DISTA_CIFAR10_DIR", "data/cifar-10-batches-bin")

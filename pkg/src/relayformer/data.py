"""Skeleton sequence datasets: a deterministic synthetic generator, the
on-disk container format, rotation augmentation and batch assembly.

Container layout: a directory holding ``manifest.json`` with
``{"V", "T", "C", "classes", "samples"}`` plus one little-endian float32
binary per sample in ``(T, V, C)`` row-major order. ``skeleton.json``
rides along so training can rebuild the graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .topology import SkeletonGraph, chain_skeleton, load_skeleton_json, save_skeleton_json


class DataError(ValueError):
    """Raised for malformed containers or invalid generator arguments."""


@dataclass
class SkeletonSequence:
    """One captured clip: ``(T, V, C)`` coordinates and its action label."""

    coordinates: np.ndarray
    label: int


@dataclass
class Dataset:
    num_joints: int
    frames: int
    channels: int
    label_names: list[str]
    samples: list[SkeletonSequence]
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def split(self, name: str) -> list[SkeletonSequence]:
        if name not in self.splits:
            raise DataError(f"dataset has no {name!r} split")
        indices = self.splits[name]
        if not indices:
            raise DataError(f"requested split {name!r} is empty")
        return [self.samples[i] for i in indices]


# -- synthetic generator --------------------------------------------------------


def synth_dataset(num_classes: int, per_class: int, num_joints: int, frames: int,
                  seed: int, noise: float = 0.05) -> Dataset:
    """Separable-by-construction motion families.

    Each class oscillates its joint groups at a distinct frequency and
    phase around a fixed rest pose; samples add a small phase jitter and
    coordinate noise. Frequencies survive rigid rotation, so rotation
    augmentation never destroys class identity.
    """
    if min(num_classes, per_class, num_joints, frames) < 1:
        raise DataError("num_classes, per_class, num_joints and frames must be positive")
    rng = np.random.default_rng(seed)
    rest = rng.normal(0.0, 1.0, (num_joints, 3))
    group = np.arange(num_joints) % 3
    samples: list[SkeletonSequence] = []
    t_grid = np.arange(frames) / frames
    for label in range(num_classes):
        freq = 1.0 + 0.75 * label
        phase = 2.0 * np.pi * label / num_classes
        axis_gain = 0.6 + 0.4 * np.cos(phase + np.array([0.0, 2.1, 4.2]))
        for _ in range(per_class):
            jitter = rng.uniform(-0.2, 0.2)
            angle = (
                2.0 * np.pi * freq * t_grid[:, None]
                + phase + jitter
                + (2.0 * np.pi / 3.0) * group[None, :]
            )
            motion = np.sin(angle)[:, :, None] * axis_gain[None, None, :]
            coords = rest[None, :, :] + 0.5 * motion
            coords = coords + rng.normal(0.0, noise, coords.shape)
            samples.append(SkeletonSequence(coords.astype(np.float32), label))
    dataset = Dataset(
        num_joints=num_joints, frames=frames, channels=3,
        label_names=[f"motion-{i}" for i in range(num_classes)],
        samples=samples,
    )
    dataset.splits = three_way_split(len(samples), seed)
    return dataset


def three_way_split(count: int, seed: int,
                    fractions: tuple[float, float] = (0.7, 0.15)) -> dict[str, list[int]]:
    """Seeded shuffle into train/val/test index lists (70/15/15 default)."""
    order = np.random.default_rng(seed + 1).permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    return {
        "train": order[:n_train].tolist(),
        "val": order[n_train:n_train + n_val].tolist(),
        "test": order[n_train + n_val:].tolist(),
    }


def nearest_centroid_accuracy(dataset: Dataset, fit: str = "train",
                              score: str = "val") -> float:
    """Sanity oracle: flattened-sequence nearest-centroid classification."""
    train = dataset.split(fit)
    centroids = {}
    for label in range(dataset.num_classes):
        members = [s.coordinates.reshape(-1) for s in train if s.label == label]
        if members:
            centroids[label] = np.mean(members, axis=0)
    hits = 0
    target = dataset.split(score)
    for sample in target:
        flat = sample.coordinates.reshape(-1)
        best = min(centroids, key=lambda l: float(np.sum((flat - centroids[l]) ** 2)))
        hits += int(best == sample.label)
    return hits / len(target)


# -- container io ----------------------------------------------------------------

_MANIFEST = "manifest.json"
_SKELETON = "skeleton.json"


def save_dataset(dataset: Dataset, directory: str | Path,
                 graph: SkeletonGraph | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index_to_split = {}
    for split_name, indices in dataset.splits.items():
        for i in indices:
            index_to_split[i] = split_name
    entries = []
    for i, sample in enumerate(dataset.samples):
        filename = f"sample_{i:05d}.bin"
        arr = np.ascontiguousarray(sample.coordinates, dtype="<f4")
        if arr.shape != (dataset.frames, dataset.num_joints, dataset.channels):
            raise DataError(
                f"sample {i} has shape {arr.shape}, expected "
                f"({dataset.frames}, {dataset.num_joints}, {dataset.channels})")
        (directory / filename).write_bytes(arr.tobytes())
        entries.append({
            "file": filename,
            "label": int(sample.label),
            "split": index_to_split.get(i, "train"),
        })
    manifest = {
        "V": dataset.num_joints,
        "T": dataset.frames,
        "C": dataset.channels,
        "classes": dataset.label_names,
        "samples": entries,
    }
    (directory / _MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    if graph is None:
        graph = chain_skeleton(dataset.num_joints)
    save_skeleton_json(graph, directory / _SKELETON)
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / _MANIFEST
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {directory}")
    manifest = json.loads(manifest_path.read_text())
    v, t, c = manifest["V"], manifest["T"], manifest["C"]
    samples = []
    splits: dict[str, list[int]] = {}
    for i, entry in enumerate(manifest["samples"]):
        raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f4")
        coords = raw.reshape(t, v, c).astype(np.float32)
        label = int(entry["label"])
        if not 0 <= label < len(manifest["classes"]):
            raise DataError(f"sample {i} label {label} out of range")
        samples.append(SkeletonSequence(coords, label))
        splits.setdefault(entry.get("split", "train"), []).append(i)
    return Dataset(
        num_joints=v, frames=t, channels=c,
        label_names=list(manifest["classes"]),
        samples=samples, splits=splits,
    )


def load_dataset_graph(directory: str | Path) -> SkeletonGraph:
    skeleton_path = Path(directory) / _SKELETON
    if skeleton_path.exists():
        return load_skeleton_json(skeleton_path)
    manifest = json.loads((Path(directory) / _MANIFEST).read_text())
    return chain_skeleton(manifest["V"])


def bone_view(dataset: Dataset, graph: SkeletonGraph) -> Dataset:
    """The same dataset with every clip mapped to bone-offset features."""
    from .model import bone_features

    samples = [
        SkeletonSequence(bone_features(s.coordinates, graph).astype(np.float32), s.label)
        for s in dataset.samples
    ]
    return Dataset(
        num_joints=dataset.num_joints, frames=dataset.frames,
        channels=dataset.channels, label_names=list(dataset.label_names),
        samples=samples, splits={k: list(v) for k, v in dataset.splits.items()},
    )


# -- augmentation and batching ----------------------------------------------------


def rotation_matrix(angles: np.ndarray) -> np.ndarray:
    """Composed rotation ``Rx @ Ry @ Rz`` from per-axis angles (radians)."""
    ax, ay, az = float(angles[0]), float(angles[1]), float(angles[2])
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def random_rotation_augment(sequence: np.ndarray, max_angle: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Rigidly rotate a whole ``(T, V, 3)`` clip by one random rotation."""
    seq = np.asarray(sequence)
    if seq.ndim != 3 or seq.shape[2] != 3:
        raise DataError(f"rotation augmentation needs (T, V, 3), got {seq.shape}")
    angles = rng.uniform(-max_angle, max_angle, size=3)
    rot = rotation_matrix(angles).astype(seq.dtype)
    return seq @ rot.T


def resample_frames(sequence: np.ndarray, target: int) -> np.ndarray:
    """Uniformly sample a clip to ``target`` frames (identity if equal)."""
    t = sequence.shape[0]
    if t == target:
        return sequence
    idx = np.round(np.linspace(0.0, t - 1, target)).astype(np.int64)
    return sequence[idx]


def assemble_batch(sequences: list[np.ndarray], frames: int) -> np.ndarray:
    """Stack ``(T, V, C)`` clips into a ``(B, C, V, T)`` float32 batch."""
    stacked = np.stack([resample_frames(s, frames) for s in sequences])
    return np.ascontiguousarray(stacked.transpose(0, 3, 2, 1), dtype=np.float32)

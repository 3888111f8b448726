"""Synthetic domain-shift generators and a directory-format image loader."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons

logger = logging.getLogger(__name__)

# Midpoint between the two moon arcs. Removing it makes the target rotation an
# in-place transform of the point cloud instead of rotation plus translation.
_MOONS_CENTER = np.array([0.5, 0.25])


@dataclass
class UnlabeledDataset:
    """Feature rows with unique sample ids and a shared class vocabulary."""

    ids: np.ndarray
    X: np.ndarray
    class_names: list[str]
    _row_of: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float32)
        if self.ids.shape[0] != self.X.shape[0]:
            raise ValueError("ids and X must have the same length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("sample ids must be unique")
        self._row_of = {int(s): i for i, s in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def row_of(self, sample_id: int) -> int:
        return self._row_of[int(sample_id)]


@dataclass
class LabeledDataset(UnlabeledDataset):
    """UnlabeledDataset plus integer class labels in ``[0, n_classes)``."""

    labels: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape[0] != len(self.ids):
            raise ValueError("labels and ids must have the same length")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    def without_labels(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.ids.copy(), self.X.copy(), list(self.class_names))

    def ids_by_class(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {c: [] for c in range(self.n_classes)}
        for sid, label in zip(self.ids, self.labels):
            out[int(label)].append(int(sid))
        return out


def _rotation_matrix(degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def make_two_moons_shift(n_per_domain, rotation_degrees, noise=0.1,
                         seed=0) -> tuple[LabeledDataset, LabeledDataset]:
    """Two-moons source plus a target drawn from the same generator and rotated.

    The target is an independent draw rotated by ``rotation_degrees`` about
    the origin (both clouds are centered first). Target labels are retained
    for evaluation only.
    """
    if n_per_domain < 2:
        raise ValueError(f"n_per_domain must be >= 2, got {n_per_domain}")
    if not 0.0 <= rotation_degrees < 180.0:
        raise ValueError(f"rotation must lie in [0, 180), got {rotation_degrees}")
    src_seed, tgt_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    xs, ys = make_moons(n_samples=n_per_domain, noise=noise, random_state=src_seed)
    xt, yt = make_moons(n_samples=n_per_domain, noise=noise, random_state=tgt_seed)
    xs = xs - _MOONS_CENTER
    xt = (xt - _MOONS_CENTER) @ _rotation_matrix(rotation_degrees).T
    names = ["moon0", "moon1"]
    ids = np.arange(n_per_domain)
    return (LabeledDataset(ids, xs, names, labels=ys),
            LabeledDataset(ids.copy(), xt, names, labels=yt))


def make_blob_shift(n_classes, n_per_class, mean_shift=0.0, covariance_scale=1.0,
                    seed=0, dim=2, class_spread=4.0) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian class clusters; target means translated and covariances scaled.

    The translation is ``mean_shift`` along the normalized all-ones direction,
    applied to every class, so ``mean_shift=0`` and ``covariance_scale=1``
    leave the domains identically distributed.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if covariance_scale <= 0.0:
        raise ValueError(f"covariance_scale must be positive, got {covariance_scale}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, class_spread, size=(n_classes, dim))
    shift = mean_shift * np.ones(dim) / np.sqrt(dim)
    xs = np.concatenate(
        [centers[c] + rng.normal(0.0, 1.0, size=(n_per_class, dim))
         for c in range(n_classes)])
    xt = np.concatenate(
        [centers[c] + shift + np.sqrt(covariance_scale)
         * rng.normal(0.0, 1.0, size=(n_per_class, dim))
         for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    names = [f"class{c}" for c in range(n_classes)]
    ids = np.arange(n_classes * n_per_class)
    return (LabeledDataset(ids, xs, names, labels=labels.copy()),
            LabeledDataset(ids.copy(), xt, names, labels=labels.copy()))


def load_image_folder(root_path, domain_name, resolution=64) -> LabeledDataset:
    """Load ``root/<domain>/<class>/<file>`` images as flattened float vectors.

    Class indices follow sorted class-directory names. Unreadable files are
    skipped with a warning; a domain with no readable images is rejected.
    """
    from PIL import Image

    domain_dir = Path(root_path) / domain_name
    if not domain_dir.is_dir():
        raise ValueError(f"domain directory does not exist: {domain_dir}")
    class_dirs = sorted(d for d in domain_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"domain directory has no class subdirectories: {domain_dir}")
    rows, labels = [], []
    for class_index, class_dir in enumerate(class_dirs):
        for path in sorted(p for p in class_dir.iterdir() if p.is_file()):
            try:
                with Image.open(path) as img:
                    arr = np.asarray(
                        img.convert("RGB").resize((resolution, resolution)),
                        dtype=np.float32) / 255.0
            except Exception as exc:  # noqa: BLE001 - any unreadable file is skipped
                logger.warning("skipping unreadable image %s: %s", path, exc)
                continue
            rows.append(arr.reshape(-1))
            labels.append(class_index)
    if not rows:
        raise ValueError(f"no readable images under {domain_dir}")
    return LabeledDataset(
        ids=np.arange(len(rows)),
        X=np.stack(rows),
        class_names=[d.name for d in class_dirs],
        labels=np.array(labels),
    )


def export_delimited(dataset: LabeledDataset, path, delimiter=",") -> None:
    """Write rows of (id, features..., label) as delimited text with a header."""
    n_features = dataset.X.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["id", *[f"x{i}" for i in range(n_features)], "label"])
        for sid, row, label in zip(dataset.ids, dataset.X, dataset.labels):
            writer.writerow([int(sid), *[repr(float(v)) for v in row], int(label)])

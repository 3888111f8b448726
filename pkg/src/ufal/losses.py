"""Uncertain feature means, the uncertain feature loss, smoothed source loss, and filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np
import torch

if TYPE_CHECKING:
    from .pseudo_labels import PseudoLabelStore

_LOG_FLOOR = 1e-12


class ColdMeansError(RuntimeError):
    """No class has ever received an assignment; the distance term must be skipped."""


@dataclass
class ClassMeans:
    """Per-class feature means with availability flags.

    ``means`` holds a vector only for available classes; a class becomes
    available once it has ever received an assignment and carries its last
    mean forward through rebuilds that leave it empty.
    """

    n_classes: int
    means: dict[int, np.ndarray]
    assignments: dict[int, int]

    def is_available(self, c: int) -> bool:
        return c in self.means

    @property
    def available_classes(self) -> list[int]:
        return sorted(self.means)


@dataclass(frozen=True)
class FilterDecision:
    kept: bool
    top_k_mass: float
    k: int


def top_k_count(n_classes: int) -> int:
    """k = n_classes/4, rounded half-up and floored at 1."""
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    return max(1, math.floor(n_classes / 4.0 + 0.5))


def ubf(p_tilde, n_classes, phi) -> FilterDecision:
    """Keep a sample iff the mass of its k most likely classes exceeds ``phi``."""
    p = np.asarray(p_tilde, dtype=np.float64)
    if p.shape != (n_classes,):
        raise ValueError(f"p_tilde must have length {n_classes}, got shape {p.shape}")
    k = top_k_count(n_classes)
    mass = float(np.partition(p, n_classes - k)[n_classes - k:].sum())
    return FilterDecision(kept=mass > phi, top_k_mass=mass, k=k)


def resample_assignments(store: "PseudoLabelStore", rng: np.random.Generator,
                         kept: Iterable[int] | None = None) -> dict[int, int]:
    """Draw one class per sample with probability proportional to its MC average."""
    kept_set = None if kept is None else set(kept)
    out: dict[int, int] = {}
    for sid in sorted(store.records):
        if kept_set is not None and sid not in kept_set:
            continue
        record = store.records[sid]
        if record.p_tilde is None:
            raise ValueError(f"sample {sid} has no MC-averaged probabilities; refresh first")
        p = record.p_tilde / record.p_tilde.sum()
        out[sid] = int(rng.choice(len(p), p=p))
    return out


def build_ufm(features: Mapping[int, np.ndarray], assignments: Mapping[int, int],
              n_classes: int, previous: ClassMeans | None = None) -> ClassMeans:
    """Average features per assigned class; empty classes carry forward their previous mean."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for sid, c in assignments.items():
        if not 0 <= c < n_classes:
            raise ValueError(f"assignment {c} for sample {sid} out of range")
        vec = np.asarray(features[sid], dtype=np.float64)
        if c in sums:
            sums[c] += vec
            counts[c] += 1
        else:
            sums[c] = vec.copy()
            counts[c] = 1
    means = {c: sums[c] / counts[c] for c in sums}
    if previous is not None:
        for c, mean in previous.means.items():
            means.setdefault(c, mean)
    if not means:
        raise ColdMeansError("no class has ever received an assignment")
    return ClassMeans(n_classes=n_classes, means=means, assignments=dict(assignments))


def _restricted_p_tilde(p_tilde: np.ndarray, classes: list[int]) -> np.ndarray:
    restricted = np.asarray(p_tilde, dtype=np.float64)[classes]
    total = restricted.sum()
    if total <= 0.0:
        return np.full(len(classes), 1.0 / len(classes))
    return restricted / total


def ufl_terms(x_feature, model_probs, p_tilde, p_hat, means: ClassMeans):
    """Distance-based and prediction-based terms of the uncertain feature loss.

    The distance term is the cross-entropy between the MC-averaged
    probabilities (restricted and renormalized over available classes) and
    the softmax over negative squared Euclidean distances to the class
    means. The prediction term is the pseudo-label cross-entropy. Means are
    constants: no gradient flows through them.
    """
    x = torch.as_tensor(x_feature)
    probs = torch.as_tensor(model_probs)
    if not 0 <= p_hat < means.n_classes:
        raise ValueError(f"pseudo-label {p_hat} out of range for {means.n_classes} classes")
    prediction = -torch.log(probs[p_hat].clamp_min(_LOG_FLOOR))
    available = means.available_classes
    if len(available) < 2:
        return x.sum() * 0.0, prediction
    if p_hat not in means.means:
        raise ValueError(f"pseudo-label {p_hat} is not an available class")
    mean_matrix = torch.as_tensor(
        np.stack([means.means[c] for c in available]), dtype=x.dtype)
    sq_dist = ((x.unsqueeze(0) - mean_matrix) ** 2).sum(dim=1)
    log_q = torch.log_softmax(-sq_dist, dim=0)
    target = torch.as_tensor(_restricted_p_tilde(p_tilde, available), dtype=x.dtype)
    distance = -(target * log_q).sum()
    return distance, prediction


def ufl(x_feature, model_probs, p_tilde, p_hat, means: ClassMeans):
    """Scalar uncertain feature loss: distance term plus prediction term."""
    distance, prediction = ufl_terms(x_feature, model_probs, p_tilde, p_hat, means)
    return distance + prediction


def ufl_batch(features: torch.Tensor, log_probs: torch.Tensor, p_tilde: np.ndarray,
              p_hats: np.ndarray, means: ClassMeans | None):
    """Vectorized UFL terms for a batch of target samples.

    Takes log-probabilities for numerical stability; the prediction term per
    sample equals ``-log_probs[i, p_hat_i]``. When ``means`` is missing or has
    fewer than two available classes the distance terms are zero.
    """
    p_hat_idx = torch.as_tensor(np.asarray(p_hats, dtype=np.int64))
    prediction = -log_probs.gather(1, p_hat_idx.unsqueeze(1)).squeeze(1)
    if means is None or len(means.available_classes) < 2:
        return torch.zeros_like(prediction), prediction
    available = means.available_classes
    mean_matrix = torch.as_tensor(
        np.stack([means.means[c] for c in available]), dtype=features.dtype)
    sq_dist = ((features.unsqueeze(1) - mean_matrix.unsqueeze(0)) ** 2).sum(dim=2)
    log_q = torch.log_softmax(-sq_dist, dim=1)
    restricted = np.asarray(p_tilde, dtype=np.float64)[:, available]
    totals = restricted.sum(axis=1, keepdims=True)
    uniform = np.full_like(restricted, 1.0 / len(available))
    with np.errstate(invalid="ignore", divide="ignore"):
        normalized = np.where(totals > 0.0, restricted / totals, uniform)
    target = torch.as_tensor(normalized, dtype=features.dtype)
    distance = -(target * log_q).sum(dim=1)
    return distance, prediction


def source_loss(model_probs, true_label, smoothing=0.0):
    """Cross-entropy against a label-smoothed one-hot target."""
    probs = torch.as_tensor(model_probs)
    n = probs.shape[-1]
    if not 0 <= int(true_label) < n:
        raise ValueError(f"label {true_label} out of range for {n} classes")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    if smoothing > 0.0 and n < 2:
        raise ValueError("label smoothing needs at least two classes")
    target = torch.full((n,), smoothing / (n - 1) if n > 1 else 0.0, dtype=probs.dtype)
    target[int(true_label)] = 1.0 - smoothing
    return -(target * torch.log(probs.clamp_min(_LOG_FLOOR))).sum()


def source_loss_batch(log_probs: torch.Tensor, labels, smoothing=0.0):
    """Per-sample smoothed cross-entropy from log-probabilities."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    n = log_probs.shape[1]
    idx = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    picked = log_probs.gather(1, idx.unsqueeze(1)).squeeze(1)
    if smoothing == 0.0:
        return -picked
    rest = log_probs.sum(dim=1) - picked
    return -((1.0 - smoothing) * picked + smoothing / (n - 1) * rest)


def filtered_fraction(store: "PseudoLabelStore", n_classes: int, phi: float) -> float:
    """Fraction of stored samples the UBF rule would remove from training."""
    if not store.records:
        raise ValueError("store is empty")
    removed = sum(
        0 if ubf(rec.p_tilde, n_classes, phi).kept else 1
        for rec in store.records.values())
    return removed / len(store.records)

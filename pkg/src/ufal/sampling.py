"""Binned instance sampling: confidence-binned target draws with class-matched source draws."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .datasets import LabeledDataset
from .pseudo_labels import PseudoLabelStore

SOURCE = "source"
TARGET = "target"


class EmptyClassError(ValueError):
    """Raised when a class has no sampled candidates; callers redraw."""


class Slot(NamedTuple):
    sample_id: int
    domain: str
    label: int


@dataclass(frozen=True)
class BinSpec:
    """Bin count and per-bin draw quotas, non-increasing from most confident."""

    n_bins: int
    quotas: tuple[int, ...]

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        object.__setattr__(self, "quotas", tuple(int(q) for q in self.quotas))
        if len(self.quotas) != self.n_bins:
            raise ValueError("quotas must have one entry per bin")
        if any(q < 0 for q in self.quotas):
            raise ValueError("quotas must be non-negative")
        if any(a < b for a, b in zip(self.quotas, self.quotas[1:])):
            raise ValueError("quotas must be non-increasing")
        if sum(self.quotas) < 1:
            raise ValueError("quotas must sum to at least 1")

    @property
    def total(self) -> int:
        return sum(self.quotas)


DEFAULT_BIN_SPEC = BinSpec(n_bins=4, quotas=(4, 2, 1, 1))


@dataclass
class SampledHalf:
    """Ordered class-contiguous entries for one domain, half of a batch."""

    entries: list[Slot]

    def __len__(self):
        return len(self.entries)

    def label_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for slot in self.entries:
            out[slot.label] = out.get(slot.label, 0) + 1
        return out


def group_and_sort(store: PseudoLabelStore) -> dict[int, list[int]]:
    """Group target ids by pseudo-label, each list sorted by confidence descending.

    Ties are broken by ascending sample id so the ordering is deterministic.
    """
    kappa: dict[int, list[int]] = {c: [] for c in range(store.n_classes)}
    for sid, rec in store.records.items():
        kappa[rec.p_hat].append(sid)
    for c, ids in kappa.items():
        ids.sort(key=lambda sid: (-store.records[sid].confidence, sid))
    return kappa


def sample_class(kappa_c: Sequence[int], spec: BinSpec,
                 rng: np.random.Generator) -> list[int]:
    """Draw the per-bin quotas from contiguous confidence slices of ``kappa_c``.

    Slices have size ``len(kappa_c) // n_bins`` with the final slice absorbing
    the remainder. A slice holding fewer candidates than its quota is drawn
    with replacement; the result keeps confidence order.
    """
    length = len(kappa_c)
    if length == 0:
        raise EmptyClassError("cannot sample from an empty class")
    base = length // spec.n_bins
    chosen: list[int] = []
    for i, quota in enumerate(spec.quotas):
        if quota == 0:
            continue
        start = i * base
        end = length if i == spec.n_bins - 1 else (i + 1) * base
        if start >= end:
            # Fewer candidates than bins: only the final slice is populated,
            # so redirect the draw to the full list.
            start, end = 0, length
        size = end - start
        picks = rng.choice(np.arange(start, end), size=quota, replace=size < quota)
        chosen.extend(int(p) for p in picks)
    chosen.sort()
    return [kappa_c[p] for p in chosen]


def assemble_halves(store: PseudoLabelStore, source_data: LabeledDataset,
                    spec: BinSpec, batch_size: int,
                    rng: np.random.Generator) -> tuple[SampledHalf, SampledHalf]:
    """Assemble the source and target halves of one batch.

    Classes are drawn uniformly without within-batch repetition (repetition
    is re-allowed once every non-empty class has been used); each drawn
    class contributes a binned target block and an equal-sized block of
    uniformly drawn source instances of the same true class. The final
    block is truncated to the highest-confidence ids if it overshoots.
    """
    if batch_size < 2 or batch_size % 2 != 0:
        raise ValueError(f"batch size must be even and positive, got {batch_size}")
    half = batch_size // 2
    kappa = group_and_sort(store)
    nonempty = [c for c in sorted(kappa) if kappa[c]]
    if not nonempty:
        raise EmptyClassError("every pseudo-label class is empty")
    by_class = source_data.ids_by_class()
    source_entries: list[Slot] = []
    target_entries: list[Slot] = []
    pool: list[int] = []
    while len(target_entries) < half:
        if not pool:
            pool = list(nonempty)
            rng.shuffle(pool)
        c = pool.pop()
        target_ids = sample_class(kappa[c], spec, rng)[:half - len(target_entries)]
        candidates = by_class.get(c, [])
        if not candidates:
            raise ValueError(f"source domain has no instances of class {c}")
        source_ids = rng.choice(candidates, size=len(target_ids),
                                replace=len(candidates) < len(target_ids))
        target_entries.extend(Slot(int(sid), TARGET, c) for sid in target_ids)
        source_entries.extend(Slot(int(sid), SOURCE, c) for sid in source_ids)
    return SampledHalf(source_entries), SampledHalf(target_entries)

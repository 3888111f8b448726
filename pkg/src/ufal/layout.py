"""Batch layout planners: smart batch layout and the baseline orderings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import SOURCE, SampledHalf, Slot

SBL = "sbl"
SOURCE_FIRST = "source_first"
TARGET_FIRST = "target_first"
RANDOM = "random"
SBL_RANDOM_ORDER = "sbl_random_order"
LAYOUT_MODES = (SBL, SOURCE_FIRST, TARGET_FIRST, RANDOM, SBL_RANDOM_ORDER)


@dataclass
class BatchPlan:
    """Ordered slot assignment; replica r owns the r-th contiguous slot chunk."""

    slots: list[Slot]
    n_replicas: int

    def __post_init__(self):
        if self.n_replicas < 1:
            raise ValueError(f"n_replicas must be >= 1, got {self.n_replicas}")
        if len(self.slots) % self.n_replicas != 0:
            raise ValueError(
                f"{len(self.slots)} slots cannot be split into {self.n_replicas} replicas")

    def __len__(self):
        return len(self.slots)

    @property
    def replica_size(self) -> int:
        return len(self.slots) // self.n_replicas

    def replica(self, r: int) -> list[Slot]:
        size = self.replica_size
        return self.slots[r * size:(r + 1) * size]

    def render(self) -> str:
        """Text grid of the plan, one row per replica, one cell per slot."""
        rows = []
        for r in range(self.n_replicas):
            cells = " ".join(f"{s.domain[0].upper()}:{s.label}" for s in self.replica(r))
            rows.append(f"replica {r} | {cells}")
        return "\n".join(rows)


def _check_halves(source_half: SampledHalf, target_half: SampledHalf, n_replicas: int):
    if len(source_half) != len(target_half):
        raise ValueError("source and target halves must have equal length")
    if n_replicas < 1:
        raise ValueError(f"n_replicas must be >= 1, got {n_replicas}")
    batch = 2 * len(source_half)
    if len(source_half) % n_replicas != 0:
        raise ValueError(
            f"batch size {batch} not divisible by 2 * {n_replicas} replicas")


def _interleave(source_entries, target_entries, n_replicas) -> list[Slot]:
    per_replica = len(source_entries) // n_replicas
    slots: list[Slot] = []
    for r in range(n_replicas):
        slots.extend(source_entries[r * per_replica:(r + 1) * per_replica])
        slots.extend(target_entries[r * per_replica:(r + 1) * per_replica])
    return slots


def plan_sbl(source_half: SampledHalf, target_half: SampledHalf,
             n_replicas: int) -> BatchPlan:
    """Smart batch layout: equal source/target shares per replica, classes paired.

    The halves share one class-block sequence, so consuming both in order
    exhausts each class pairwise; blocks that straddle a replica boundary
    spill into the next replica with the pairing intact. Within a replica
    all source slots precede all target slots (chunk statistics are
    order-invariant, the order is fixed for determinism).
    """
    _check_halves(source_half, target_half, n_replicas)
    return BatchPlan(_interleave(source_half.entries, target_half.entries, n_replicas),
                     n_replicas)


def plan_baseline(source_half: SampledHalf, target_half: SampledHalf, n_replicas: int,
                  mode: str, rng: np.random.Generator | None = None) -> BatchPlan:
    """Baseline layouts: source_first, target_first, random, sbl_random_order."""
    _check_halves(source_half, target_half, n_replicas)
    if mode == SOURCE_FIRST:
        slots = list(source_half.entries) + list(target_half.entries)
    elif mode == TARGET_FIRST:
        slots = list(target_half.entries) + list(source_half.entries)
    elif mode == RANDOM:
        if rng is None:
            raise ValueError(f"mode {mode!r} needs an rng")
        merged = list(source_half.entries) + list(target_half.entries)
        slots = [merged[i] for i in rng.permutation(len(merged))]
    elif mode == SBL_RANDOM_ORDER:
        if rng is None:
            raise ValueError(f"mode {mode!r} needs an rng")
        src = [source_half.entries[i] for i in rng.permutation(len(source_half))]
        tgt = [target_half.entries[i] for i in rng.permutation(len(target_half))]
        slots = _interleave(src, tgt, n_replicas)
    else:
        raise ValueError(f"unknown layout mode {mode!r}")
    return BatchPlan(slots, n_replicas)


def plan_layout(source_half: SampledHalf, target_half: SampledHalf, n_replicas: int,
                mode: str, rng: np.random.Generator | None = None) -> BatchPlan:
    """Dispatch to :func:`plan_sbl` or :func:`plan_baseline` by mode name."""
    if mode == SBL:
        return plan_sbl(source_half, target_half, n_replicas)
    return plan_baseline(source_half, target_half, n_replicas, mode, rng)


def source_fraction_per_replica(plan: BatchPlan) -> list[float]:
    """Fraction of source slots in each replica chunk; handy for layout checks."""
    out = []
    for r in range(plan.n_replicas):
        chunk = plan.replica(r)
        out.append(sum(1 for s in chunk if s.domain == SOURCE) / len(chunk))
    return out

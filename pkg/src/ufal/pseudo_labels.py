"""Per-target-sample uncertainty cache and its refresh schedule."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .datasets import UnlabeledDataset
from .losses import top_k_count
from .models import ModelBundle, UncertaintyRecord, mc_dropout_probs_from_features

_SWEEP_CHUNK = 256


@dataclass
class PseudoLabelStore:
    """Maps target sample ids to cached UncertaintyRecords plus refresh bookkeeping.

    A refresh recomputes features, softmax probabilities, pseudo-labels, and
    MC-averaged probabilities for the whole target set, with BN layers in
    eval mode so the cache reflects inference-time behavior. Between
    refreshes the records are immutable snapshots.
    """

    refresh_period: int = 50
    resample_period: int = 5
    records: dict[int, UncertaintyRecord] = field(default_factory=dict)
    last_refresh_step: int | None = None

    def __post_init__(self):
        if self.refresh_period < 1 or self.resample_period < 1:
            raise ValueError("refresh_period and resample_period must be >= 1")

    def __len__(self):
        return len(self.records)

    @property
    def n_classes(self) -> int:
        if not self.records:
            raise ValueError("store is empty")
        return len(next(iter(self.records.values())).p)

    def due_for_refresh(self, current_step: int) -> bool:
        if current_step < 0:
            raise ValueError(f"current_step must be >= 0, got {current_step}")
        if not self.records or self.last_refresh_step is None:
            return True
        return current_step - self.last_refresh_step >= self.refresh_period

    def refresh(self, model: ModelBundle, target_data: UnlabeledDataset,
                n_mc=20, rate=0.85, generator=None, step=0) -> None:
        """Recompute every record with a full eval-mode sweep over the target set."""
        if len(target_data) == 0:
            raise ValueError("target dataset is empty")
        was_training = model.training
        model.eval()
        try:
            records: dict[int, UncertaintyRecord] = {}
            param = next(model.parameters())
            for start in range(0, len(target_data), _SWEEP_CHUNK):
                ids = target_data.ids[start:start + _SWEEP_CHUNK]
                x = torch.as_tensor(target_data.X[start:start + _SWEEP_CHUNK],
                                    dtype=param.dtype)
                with torch.no_grad():
                    features, logits = model(x)
                    probs = torch.softmax(logits, dim=1).double().numpy()
                p_tilde = mc_dropout_probs_from_features(model, features, n_mc, rate,
                                                         generator)
                feats = features.double().numpy()
                for i, sid in enumerate(ids):
                    records[int(sid)] = UncertaintyRecord(
                        p=probs[i],
                        p_hat=int(np.argmax(probs[i])),
                        feature=feats[i],
                        p_tilde=p_tilde[i],
                    )
        finally:
            model.train(was_training)
        self.records = records
        self.last_refresh_step = int(step)

    def features(self) -> dict[int, np.ndarray]:
        return {sid: rec.feature for sid, rec in self.records.items()}

    def dump(self, path) -> None:
        """Write (sample_id, p_hat, max_p, top_k_mass) rows for inspection."""
        if not self.records:
            raise ValueError("store is empty")
        k = top_k_count(self.n_classes)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "p_hat", "max_p", f"top{k}_p_tilde_mass"])
            for sid in sorted(self.records):
                rec = self.records[sid]
                mass = float(np.sort(rec.p_tilde)[-k:].sum()) if rec.p_tilde is not None else ""
                writer.writerow([sid, rec.p_hat, repr(rec.confidence), repr(mass) if mass != "" else ""])

"""Two-phase training: supervised source pretraining, then the adaptation loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .datasets import LabeledDataset, UnlabeledDataset
from .ghost_bn import GhostBatchNorm1d
from .layout import LAYOUT_MODES, plan_layout
from .losses import (ClassMeans, ColdMeansError, build_ufm, resample_assignments,
                     source_loss_batch, ubf, ufl_batch)
from .models import ModelBundle
from .pseudo_labels import PseudoLabelStore
from .sampling import BinSpec, SOURCE, assemble_halves

logger = logging.getLogger(__name__)

ACCURACY = "accuracy"
MEAN_CLASS_ACCURACY = "mean_class_accuracy"
METRICS = (ACCURACY, MEAN_CLASS_ACCURACY)


@dataclass
class TrainConfig:
    """Hyperparameters and schedules for both training phases."""

    batch_size: int = 32
    n_replicas: int = 4
    n_mc: int = 20
    mc_rate: float = 0.85
    refresh_period: int = 50
    resample_period: int = 5
    phi: float = 0.5
    bin_quotas: tuple[int, ...] = (4, 2, 1, 1)
    learning_rate: float = 0.01
    momentum: float = 0.95
    source_epochs: int = 30
    adapt_steps: int = 300
    seed: int = 0
    label_smoothing: float = 0.1
    layout_mode: str = "sbl"
    use_ufl: bool = True
    use_ubf: bool = True
    use_ufm: bool = True
    source_weight: float = 1.0
    target_weight: float = 1.0
    lr_schedule: str = "cosine"
    eval_metric: str = ACCURACY
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 64
    debug_batches: bool = False

    def __post_init__(self):
        self.bin_quotas = tuple(int(q) for q in self.bin_quotas)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self):
        if self.batch_size % (2 * self.n_replicas) != 0:
            raise ValueError(
                f"batch size {self.batch_size} must be divisible by "
                f"2 * n_replicas = {2 * self.n_replicas}")
        if min(self.refresh_period, self.resample_period) < 1:
            raise ValueError("refresh_period and resample_period must be >= 1")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if not 0.0 <= self.mc_rate < 1.0:
            raise ValueError("mc_rate must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")
        if self.layout_mode not in LAYOUT_MODES:
            raise ValueError(f"layout_mode must be one of {LAYOUT_MODES}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if self.eval_metric not in METRICS:
            raise ValueError(f"eval_metric must be one of {METRICS}")
        if self.source_epochs < 0 or self.adapt_steps < 0:
            raise ValueError("source_epochs and adapt_steps must be >= 0")
        BinSpec(len(self.bin_quotas), self.bin_quotas)

    @property
    def bin_spec(self) -> BinSpec:
        return BinSpec(len(self.bin_quotas), self.bin_quotas)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bin_quotas"] = list(self.bin_quotas)
        out["hidden_dims"] = list(self.hidden_dims)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)


@dataclass
class StepRecord:
    step: int
    loss: float
    source_loss: float
    ufl_distance: float
    ufl_prediction: float
    filtered_fraction: float
    lr: float


@dataclass
class RefreshEvent:
    step: int
    filtered_fraction: float
    eval_accuracy: Optional[float] = None


@dataclass
class AdaptationTrace:
    """Per-step loss records plus per-refresh filtering/evaluation events."""

    steps: list[StepRecord] = field(default_factory=list)
    refreshes: list[RefreshEvent] = field(default_factory=list)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for event in self.refreshes:
                fh.write(json.dumps({"kind": "refresh", **asdict(event)}) + "\n")
            for step in self.steps:
                fh.write(json.dumps({"kind": "step", **asdict(step)}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "AdaptationTrace":
        trace = cls()
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                kind = row.pop("kind")
                if kind == "refresh":
                    trace.refreshes.append(RefreshEvent(**row))
                elif kind == "step":
                    trace.steps.append(StepRecord(**row))
                else:
                    raise ValueError(f"unknown trace record kind {kind!r}")
        trace.steps.sort(key=lambda s: s.step)
        trace.refreshes.sort(key=lambda r: r.step)
        return trace


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _mask_generator(seed: int, step: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(np.random.SeedSequence([seed, 4, step]).generate_state(1)[0]))
    return gen


def _make_optimizer(model: ModelBundle, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                           momentum=config.momentum,
                           nesterov=config.momentum > 0.0)


def _learning_rate(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "constant" or total <= 1:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _check_replicas(model: ModelBundle, config: TrainConfig) -> None:
    for module in model.modules():
        if isinstance(module, GhostBatchNorm1d) and module.n_replicas != config.n_replicas:
            raise ValueError(
                f"model BN layers simulate {module.n_replicas} replicas but the "
                f"config asks for {config.n_replicas}")


def train_source(model: ModelBundle, source_data: LabeledDataset,
                 config: TrainConfig) -> ModelBundle:
    """Supervised pretraining with smoothed cross-entropy and SGD + Nesterov momentum."""
    if len(source_data) == 0:
        raise ValueError("source dataset is empty")
    _check_replicas(model, config)
    if config.source_epochs == 0:
        return model
    optimizer = _make_optimizer(model, config)
    order_rng = _rng(config.seed, 0)
    param = next(model.parameters())
    x_all = torch.as_tensor(source_data.X, dtype=param.dtype)
    y_all = source_data.labels
    batches_per_epoch = len(source_data) // config.batch_size
    if batches_per_epoch == 0:
        raise ValueError(
            f"source dataset ({len(source_data)} samples) smaller than one batch "
            f"({config.batch_size})")
    model.train()
    for epoch in range(config.source_epochs):
        perm = order_rng.permutation(len(source_data))
        for b in range(batches_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            _, logits = model(x_all[idx])
            log_probs = torch.log_softmax(logits, dim=1)
            loss = source_loss_batch(log_probs, y_all[idx], config.label_smoothing).mean()
            if not math.isfinite(loss.item()):
                raise RuntimeError(
                    f"source training diverged at epoch {epoch}, batch {b}: "
                    f"loss={loss.item()}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    model.eval()
    return model


def _kept_ids(store: PseudoLabelStore, n_classes: int, config: TrainConfig) -> set[int]:
    if not config.use_ubf:
        return set(store.records)
    return {sid for sid, rec in store.records.items()
            if ubf(rec.p_tilde, n_classes, config.phi).kept}


def _dump_batch(step, plan, store):
    lines = [f"step {step} batch"]
    for pos, slot in enumerate(plan.slots):
        conf = (repr(store.records[slot.sample_id].confidence)
                if slot.domain != SOURCE else "")
        lines.append(f"  {pos}\t{slot.domain}\t{slot.label}\t{slot.sample_id}\t{conf}")
    logger.debug("\n".join(lines))


def adapt(model: ModelBundle, source_data: LabeledDataset,
          target_data: UnlabeledDataset, config: TrainConfig,
          eval_data: Optional[LabeledDataset] = None
          ) -> tuple[ModelBundle, AdaptationTrace]:
    """Run the adaptation loop and return the adapted model plus its trace.

    Each step refreshes the pseudo-label store when due, resamples class
    assignments and rebuilds the uncertain means on their own cadence,
    assembles one binned batch, lays it out for the simulated replicas,
    and takes one SGD step on the smoothed source loss plus the target
    loss over unfiltered samples. ``eval_data`` (labels used for reporting
    only) is scored at every refresh.
    """
    config.validate()
    _check_replicas(model, config)
    trace = AdaptationTrace()
    if config.adapt_steps == 0:
        return model, trace
    if len(target_data) == 0:
        raise ValueError("target dataset is empty")
    n_classes = model.n_classes
    spec = config.bin_spec
    sample_rng = _rng(config.seed, 1)
    assign_rng = _rng(config.seed, 2)
    layout_rng = _rng(config.seed, 3)
    store = PseudoLabelStore(refresh_period=config.refresh_period,
                             resample_period=config.resample_period)
    optimizer = _make_optimizer(model, config)
    param = next(model.parameters())
    means: Optional[ClassMeans] = None
    kept: set[int] = set()
    for step in range(config.adapt_steps):
        if store.due_for_refresh(step):
            store.refresh(model, target_data, n_mc=config.n_mc, rate=config.mc_rate,
                          generator=_mask_generator(config.seed, step), step=step)
            kept = _kept_ids(store, n_classes, config)
            fraction = 1.0 - len(kept) / len(store.records)
            accuracy = (evaluate(model, eval_data, config.eval_metric)
                        if eval_data is not None else None)
            trace.refreshes.append(RefreshEvent(step, fraction, accuracy))
        if config.use_ufl and step % config.resample_period == 0:
            if config.use_ufm:
                assignments = resample_assignments(store, assign_rng, kept=kept)
            else:
                assignments = {sid: store.records[sid].p_hat for sid in sorted(kept)}
            try:
                means = build_ufm(store.features(), assignments, n_classes,
                                  previous=means)
            except ColdMeansError:
                means = None
        source_half, target_half = assemble_halves(store, source_data, spec,
                                                   config.batch_size, sample_rng)
        plan = plan_layout(source_half, target_half, config.n_replicas,
                           config.layout_mode, rng=layout_rng)
        if config.debug_batches:
            _dump_batch(step, plan, store)
        rows = torch.as_tensor(
            np.stack([source_data.X[source_data.row_of(s.sample_id)]
                      if s.domain == SOURCE
                      else target_data.X[target_data.row_of(s.sample_id)]
                      for s in plan.slots]), dtype=param.dtype)
        model.train()
        features, logits = model(rows)
        log_probs = torch.log_softmax(logits, dim=1)
        source_pos = [i for i, s in enumerate(plan.slots) if s.domain == SOURCE]
        target_pos = [i for i, s in enumerate(plan.slots) if s.domain != SOURCE]
        source_labels = [plan.slots[i].label for i in source_pos]
        source_term = source_loss_batch(log_probs[source_pos], source_labels,
                                        config.label_smoothing).mean()
        kept_pos = [i for i in target_pos if plan.slots[i].sample_id in kept]
        filtered_fraction = 1.0 - len(kept_pos) / len(target_pos)
        if kept_pos:
            kept_ids = [plan.slots[i].sample_id for i in kept_pos]
            p_tilde = np.stack([store.records[sid].p_tilde for sid in kept_ids])
            p_hats = np.array([store.records[sid].p_hat for sid in kept_ids])
            distance_vec, prediction_vec = ufl_batch(
                features[kept_pos], log_probs[kept_pos], p_tilde, p_hats,
                means if config.use_ufl else None)
            distance = distance_vec.mean()
            prediction = prediction_vec.mean()
            target_term = distance + prediction
        else:
            logger.warning("step %d: every sampled target sample is filtered; "
                           "training on source loss only", step)
            distance = prediction = target_term = torch.zeros((), dtype=param.dtype)
        loss = config.source_weight * source_term + config.target_weight * target_term
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"adaptation diverged at step {step}: loss={loss.item()}")
        lr = _learning_rate(config, step, config.adapt_steps)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.steps.append(StepRecord(
            step=step,
            loss=float(loss.item()),
            source_loss=float(source_term.item()),
            ufl_distance=float(distance.item()),
            ufl_prediction=float(prediction.item()),
            filtered_fraction=filtered_fraction,
            lr=lr,
        ))
    model.eval()
    return model, trace


def evaluate(model: ModelBundle, labeled_data: LabeledDataset,
             metric: str = ACCURACY, batch_size: int = 512) -> float:
    """Score the model on labeled data with BN in evaluation mode."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if labeled_data is None or len(labeled_data) == 0:
        raise ValueError("evaluation dataset is empty")
    was_training = model.training
    model.eval()
    param = next(model.parameters())
    preds = []
    try:
        with torch.no_grad():
            for start in range(0, len(labeled_data), batch_size):
                x = torch.as_tensor(labeled_data.X[start:start + batch_size],
                                    dtype=param.dtype)
                _, logits = model(x)
                preds.append(logits.argmax(dim=1).numpy())
    finally:
        model.train(was_training)
    preds = np.concatenate(preds)
    labels = labeled_data.labels
    if metric == ACCURACY:
        return float(np.mean(preds == labels))
    per_class = []
    for c in range(labeled_data.n_classes):
        mask = labels == c
        if not mask.any():
            logger.info("class %d absent from evaluation data; excluded from mean", c)
            continue
        per_class.append(float(np.mean(preds[mask] == labels[mask])))
    return float(np.mean(per_class))

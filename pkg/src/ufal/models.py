"""Feature-extractor/classifier bundle with MC-dropout uncertainty estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .ghost_bn import GhostBatchNorm1d


@dataclass
class UncertaintyRecord:
    """Cached per-sample outputs: softmax probabilities, MC average, pseudo-label, feature.

    ``p_hat`` is always the argmax of ``p`` with ties broken by the lowest
    class index; ``p`` and ``p_tilde`` are probability vectors summing to 1.
    """

    p: np.ndarray
    p_hat: int
    feature: np.ndarray
    p_tilde: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)
        _check_probability_vector(self.p, "p")
        if self.p_hat != int(np.argmax(self.p)):
            raise ValueError(f"p_hat={self.p_hat} is not the argmax of p")
        if self.p_tilde is not None:
            self.p_tilde = np.asarray(self.p_tilde, dtype=np.float64)
            if self.p_tilde.shape != self.p.shape:
                raise ValueError("p and p_tilde must have the same length")
            _check_probability_vector(self.p_tilde, "p_tilde")

    @property
    def confidence(self) -> float:
        """Softmax probability of the pseudo-label class."""
        return float(self.p[self.p_hat])


def _check_probability_vector(p, name, tol=1e-6):
    if p.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {p.shape}")
    if np.any(p < -tol) or np.any(p > 1.0 + tol):
        raise ValueError(f"{name} components must lie in [0, 1]")
    if abs(float(p.sum()) - 1.0) > tol:
        raise ValueError(f"{name} must sum to 1 within {tol}, got {p.sum()}")


class MLPFeatureExtractor(nn.Module):
    """Small fully connected backbone: Linear -> ghost BN -> ReLU blocks plus a linear head."""

    def __init__(self, in_dim, hidden_dims=(64, 64), feature_dim=64, n_replicas=1,
                 bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        layers = []
        prev = in_dim
        for width in hidden_dims:
            layers.append(nn.Linear(prev, width))
            layers.append(GhostBatchNorm1d(width, n_replicas, bn_momentum, bn_eps))
            layers.append(nn.ReLU())
            prev = width
        layers.append(nn.Linear(prev, feature_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ModelBundle(nn.Module):
    """A feature extractor plus an affine classifier over its features.

    The forward pass returns ``(features, logits)``. The bundle is
    deterministic whenever dropout is not applied externally; the only
    stochastic element of this module family is the Bernoulli feature mask
    drawn by :func:`mc_dropout_predict`.
    """

    def __init__(self, feature_extractor: nn.Module, classifier: nn.Linear, arch: dict):
        super().__init__()
        self.feature_extractor = feature_extractor
        self.classifier = classifier
        self.arch = dict(arch)
        if "in_dim" not in self.arch:
            raise ValueError("arch descriptor must record 'in_dim'")

    @property
    def in_dim(self) -> int:
        return int(self.arch["in_dim"])

    @property
    def feature_dim(self) -> int:
        return self.classifier.in_features

    @property
    def n_classes(self) -> int:
        return self.classifier.out_features

    def forward(self, x):
        features = self.feature_extractor(x)
        return features, self.classifier(features)


def build_mlp_bundle(in_dim, n_classes, hidden_dims=(64, 64), feature_dim=64,
                     n_replicas=1, seed=0) -> ModelBundle:
    """Build an MLP bundle with deterministic initialization under ``seed``."""
    torch.manual_seed(seed)
    arch = {
        "kind": "mlp",
        "in_dim": int(in_dim),
        "n_classes": int(n_classes),
        "hidden_dims": tuple(int(h) for h in hidden_dims),
        "feature_dim": int(feature_dim),
        "n_replicas": int(n_replicas),
    }
    extractor = MLPFeatureExtractor(in_dim, hidden_dims, feature_dim, n_replicas)
    classifier = nn.Linear(feature_dim, n_classes)
    return ModelBundle(extractor, classifier, arch)


def _as_input_batch(model: ModelBundle, x) -> torch.Tensor:
    param = next(model.parameters())
    xt = torch.as_tensor(x, dtype=param.dtype)
    if xt.dim() == 1:
        xt = xt.unsqueeze(0)
    if xt.dim() != 2 or xt.shape[1] != model.in_dim:
        raise ValueError(
            f"input has shape {tuple(xt.shape)}, expected (*, {model.in_dim})"
        )
    return xt


def predict(model: ModelBundle, x) -> UncertaintyRecord:
    """Deterministic single-sample prediction; no dropout, BN in eval mode."""
    xt = _as_input_batch(model, x)
    if xt.shape[0] != 1:
        raise ValueError("predict takes a single sample; use predict_batch for batches")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            features, logits = model(xt)
            p = torch.softmax(logits, dim=1)
    finally:
        model.train(was_training)
    p = p[0].double().numpy()
    return UncertaintyRecord(p=p, p_hat=int(np.argmax(p)),
                             feature=features[0].double().numpy())


def predict_batch(model: ModelBundle, x):
    """Eval-mode forward over a batch; returns float64 (features, probs, p_hats)."""
    xt = _as_input_batch(model, x)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            features, logits = model(xt)
            probs = torch.softmax(logits, dim=1)
    finally:
        model.train(was_training)
    probs = probs.double().numpy()
    return features.double().numpy(), probs, np.argmax(probs, axis=1)


def _bernoulli_masks(n_mc, dim, rate, dtype, generator):
    # Inverted-dropout convention: surviving features are scaled by 1/keep so
    # the feature expectation matches the mask-free forward pass.
    keep = 1.0 - rate
    u = torch.rand((n_mc, dim), generator=generator, dtype=dtype)
    return (u < keep).to(dtype) / keep


def mc_dropout_predict(model: ModelBundle, x, n_mc=20, rate=0.85,
                       generator=None) -> np.ndarray:
    """Average the classifier softmax over ``n_mc`` Bernoulli feature masks.

    The masks come from a single ``torch.rand((n_mc, feature_dim))`` draw on
    ``generator`` thresholded at the keep probability. ``rate=0`` short-circuits
    to the deterministic prediction, so the equality with :func:`predict` is
    exact rather than within float error.
    """
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    xt = _as_input_batch(model, x)
    if xt.shape[0] != 1:
        raise ValueError("mc_dropout_predict takes a single sample")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            features, logits = model(xt)
            if rate == 0.0:
                return torch.softmax(logits, dim=1)[0].double().numpy()
            masks = _bernoulli_masks(n_mc, model.feature_dim, rate, features.dtype,
                                     generator)
            mc_logits = model.classifier(features * masks)
            p_tilde = torch.softmax(mc_logits, dim=1).double().mean(dim=0)
    finally:
        model.train(was_training)
    return p_tilde.numpy()


def mc_dropout_probs_from_features(model: ModelBundle, features: torch.Tensor,
                                   n_mc, rate, generator) -> np.ndarray:
    """MC-averaged probabilities for a batch of precomputed feature vectors.

    One independent mask per (pass, sample). Used by the pseudo-label store
    refresh, which extracts features once and reuses them for every pass.
    """
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    with torch.no_grad():
        if rate == 0.0:
            return torch.softmax(model.classifier(features), dim=1).double().numpy()
        n, dim = features.shape
        keep = 1.0 - rate
        acc = torch.zeros((n, model.n_classes), dtype=torch.float64)
        for _ in range(n_mc):
            u = torch.rand((n, dim), generator=generator, dtype=features.dtype)
            masks = (u < keep).to(features.dtype) / keep
            logits = model.classifier(features * masks)
            acc += torch.softmax(logits, dim=1).double()
        return (acc / n_mc).numpy()


def save_checkpoint(model: ModelBundle, path) -> None:
    """Write parameters, BN running statistics, and the architecture manifest."""
    torch.save({"arch": model.arch, "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> ModelBundle:
    """Rebuild a bundle from a checkpoint; round-trips parameters bit-exactly."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    arch = payload["arch"]
    if arch.get("kind") != "mlp":
        raise ValueError(f"unsupported architecture kind: {arch.get('kind')!r}")
    model = build_mlp_bundle(
        in_dim=arch["in_dim"],
        n_classes=arch["n_classes"],
        hidden_dims=arch["hidden_dims"],
        feature_dim=arch["feature_dim"],
        n_replicas=arch["n_replicas"],
    )
    model.load_state_dict(payload["state_dict"])
    return model

"""Batch normalization with simulated logical replicas (ghost batch-norm)."""

import torch
from torch import nn


class GhostBatchNorm1d(nn.Module):
    """BatchNorm over ``(batch, channels)`` inputs computed per replica chunk.

    In training mode the batch is split into ``n_replicas`` contiguous,
    equally sized chunks (callers order the rows according to their batch
    plan) and each chunk is whitened with its own biased mean/variance.
    The population EMA is advanced from the *first* chunk only, emulating
    the replica that owns the population statistics in data-parallel
    training. In eval mode every row is whitened with the population
    statistics and no state is mutated.

    With ``n_replicas=1`` this is standard batch normalization, except that
    ``running_var`` stores the biased (population) estimator, i.e. the same
    quantity used for train-time normalization.
    """

    def __init__(self, num_features, n_replicas=1, momentum=0.1, eps=1e-5):
        super().__init__()
        if n_replicas < 1:
            raise ValueError(f"n_replicas must be >= 1, got {n_replicas}")
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must be in (0, 1], got {momentum}")
        if eps <= 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.num_features = num_features
        self.n_replicas = n_replicas
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.num_features:
            raise ValueError(
                f"expected (batch, {self.num_features}) input, got {tuple(x.shape)}"
            )
        if self.training:
            batch = x.shape[0]
            if batch % self.n_replicas != 0:
                raise ValueError(
                    f"batch size {batch} not divisible by {self.n_replicas} replicas"
                )
            chunks = x.view(self.n_replicas, batch // self.n_replicas, self.num_features)
            mean = chunks.mean(dim=1, keepdim=True)
            var = chunks.var(dim=1, unbiased=False, keepdim=True)
            x_hat = (chunks - mean) / torch.sqrt(var + self.eps)
            x_hat = x_hat.reshape(batch, self.num_features)
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1.0 - m).add_(m * mean[0, 0])
                self.running_var.mul_(1.0 - m).add_(m * var[0, 0])
        else:
            x_hat = (x - self.running_mean) / torch.sqrt(self.running_var + self.eps)
        return self.weight * x_hat + self.bias

    def extra_repr(self):
        return (
            f"{self.num_features}, n_replicas={self.n_replicas}, "
            f"momentum={self.momentum}, eps={self.eps}"
        )

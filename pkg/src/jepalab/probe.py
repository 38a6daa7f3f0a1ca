"""Linear probe on frozen features: non-affine batch norm followed by a linear layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from jepalab.config import ProbeConfig

SGD_NESTEROV_PRESET = ProbeConfig(optimizer="sgd_nesterov", epochs=28, lr=0.01, momentum=0.9, weight_decay=5e-4)


class ProbeHead(nn.Module):
    def __init__(self, dim: int, n_classes: int, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.norm = nn.BatchNorm1d(dim, affine=False, momentum=bn_momentum, eps=bn_eps)
        self.linear = nn.Linear(dim, n_classes)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    @property
    def n_classes(self) -> int:
        return self.linear.out_features

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(self.norm(x))


class LARS(torch.optim.Optimizer):
    """SGD with momentum where each matrix update is rescaled by ``eta * |w| / |g|``.

    Vectors (biases) take plain momentum SGD steps.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, trust_coefficient=0.001):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay, eta=trust_coefficient))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if p.ndim > 1:
                    g = g.add(p, alpha=group["weight_decay"])
                    p_norm = torch.norm(p)
                    g_norm = torch.norm(g)
                    trust = torch.where(
                        (p_norm > 0) & (g_norm > 0), group["eta"] * p_norm / g_norm, torch.ones_like(p_norm)
                    )
                    g = g.mul(trust)
                state = self.state[p]
                if "mu" not in state:
                    state["mu"] = torch.zeros_like(p)
                mu = state["mu"]
                mu.mul_(group["momentum"]).add_(g)
                p.add_(mu, alpha=-group["lr"])


def _make_optimizer(head: ProbeHead, cfg: ProbeConfig):
    if cfg.optimizer == "lars":
        return LARS(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                    trust_coefficient=cfg.trust_coefficient)
    if cfg.optimizer == "sgd_nesterov":
        return torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=True,
                               weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown probe optimizer {cfg.optimizer!r}")


def _features(x) -> Tensor:
    if hasattr(x, "Z"):
        x = x.Z
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def train_probe(features, labels, cfg: ProbeConfig | None = None, n_classes: int | None = None) -> ProbeHead:
    """Fit the probe on precomputed features; the backbone is never touched."""
    cfg = cfg or ProbeConfig()
    X = _features(features)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} features but {y.shape[0]} labels")
    C = int(y.max()) + 1 if n_classes is None else n_classes
    if C < 2 or len(torch.unique(y)) < 2:
        raise ValueError("linear probe needs at least 2 classes")
    head = ProbeHead(X.shape[1], C, cfg.bn_momentum, cfg.bn_eps)
    opt = _make_optimizer(head, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    head.train()
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            if len(idx) < 2:  # batch statistics need two rows
                continue
            loss = F.cross_entropy(head(X[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    head.eval()
    return head


@torch.no_grad()
def predict_probe(head: ProbeHead, features) -> np.ndarray:
    head.eval()
    # argmax returns the first maximal index, so ties go to the lowest class
    return torch.argmax(head(_features(features)), dim=1).numpy()


def evaluate_probe(head: ProbeHead, features, labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict_probe(head, features) == y))

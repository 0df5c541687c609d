"""Identity-classification and verification losses over zero-padded embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, NumericError, ShapeError
from .resolution import EmbeddingLayout


class PrototypeClassifier(nn.Module):
    """Bias-free identity classifier ``W`` of shape (d, C).

    Row block ``W_k`` lines up with sub-vector ``v_k`` of the layout, so a
    zero-padded level-k vector only ever reads ``W_1..W_k``.
    """

    def __init__(self, layout: EmbeddingLayout, num_classes: int, init_std: float = 0.01):
        super().__init__()
        if num_classes < 1:
            raise DomainError("classifier needs at least one identity")
        self.layout = layout
        self.weight = nn.Parameter(torch.randn(layout.total_dim, num_classes) * init_std)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def block(self, k: int) -> torch.Tensor:
        offs = self.layout.offsets
        return self.weight[offs[k - 1]:offs[k]]

    def forward(self, z_padded: torch.Tensor) -> torch.Tensor:
        return id_logits(z_padded, self)


class VerificationHead(nn.Module):
    """MLP f: R^d -> R scoring a feature difference; one tanh hidden layer of width d/4."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, dim // 4)
        self.hidden = nn.Linear(dim, hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, diff: torch.Tensor) -> torch.Tensor:
        return self.out(torch.tanh(self.hidden(diff))).squeeze(-1)


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5

    def __post_init__(self):
        if not self.lam >= 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")


class VerificationLoss(NamedTuple):
    total: torch.Tensor
    mean: torch.Tensor


def id_logits(z_padded: torch.Tensor, classifier: PrototypeClassifier) -> torch.Tensor:
    if z_padded.shape[-1] != classifier.weight.shape[0]:
        raise ShapeError(f"embedding length {z_padded.shape[-1]} != classifier rows {classifier.weight.shape[0]}")
    return z_padded @ classifier.weight


def id_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Softmax cross-entropy, averaged over the batch."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if logits.dim() == 1:
        logits, labels = logits[None], labels.reshape(1)
    num_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"label outside 0..{num_classes - 1}")
    return F.cross_entropy(logits, labels)


def verification_logits(v_i: torch.Tensor, v_j: torch.Tensor, head: VerificationHead) -> torch.Tensor:
    if v_i.shape != v_j.shape:
        raise ShapeError(f"pair shapes differ: {tuple(v_i.shape)} vs {tuple(v_j.shape)}")
    return head(v_i - v_j)


def verification_probability(v_i: torch.Tensor, v_j: torch.Tensor, head: VerificationHead) -> torch.Tensor:
    """p(same identity) = sigmoid(f(v_i - v_j)). Not symmetric in (i, j)."""
    return torch.sigmoid(verification_logits(v_i, v_j, head))


def verification_loss_from_logits(logits: torch.Tensor, targets) -> VerificationLoss:
    targets = torch.as_tensor(targets, dtype=logits.dtype, device=logits.device).reshape(logits.shape)
    if logits.numel() == 0:
        raise DomainError("verification loss needs at least one pair")
    per_pair = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return VerificationLoss(per_pair.sum(), per_pair.mean())


def verification_loss(v_i: torch.Tensor, v_j: torch.Tensor, targets, head: VerificationHead) -> VerificationLoss:
    """Binary cross-entropy over pairs, reported summed and averaged."""
    if v_i.dim() == 1:
        v_i, v_j = v_i[None], v_j[None]
    return verification_loss_from_logits(verification_logits(v_i, v_j, head), targets)


def total_loss(cls, verif, weights: LossWeights = LossWeights()):
    """``cls + lambda * verif``; raises instead of propagating NaN/inf."""
    for name, value in (("cls", cls), ("verif", verif)):
        x = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(x):
            raise NumericError(f"non-finite {name} loss: {x}")
    return cls + weights.lam * verif

"""Contrastive and segmentation objectives.

All contrastive losses work on unit-norm embeddings; similarities are plain
dot products divided by a fixed temperature.  Log-softmax is evaluated via
``torch.log_softmax`` which subtracts the row maximum before exponentiating.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


class TrainingDivergence(FloatingPointError):
    """A loss component became NaN (or infinite)."""


class EmptyOrgansError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lambda_ot: float = 0.5
    lambda_at: float = 0.5
    lambda_segm: float = 1.0
    dice_epsilon: float = 1e-5
    ce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for name in ("lambda_ot", "lambda_at", "lambda_segm", "ce_weight", "dice_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.dice_epsilon > 0:
            raise ValueError("dice_epsilon must be positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    l_ot: float
    l_at: float
    l_segm: float
    total: float

    def to_json(self) -> dict:
        return asdict(self)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("embeddings must be 2D (count, dim)")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")


def infonce_terms(Z: torch.Tensor, T: torch.Tensor, tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Image->text and text->image InfoNCE, each averaged over the M anchors.

    ``T`` holds ``M + B`` rows; the first ``M`` are the positives for the
    rows of ``Z``.  The image->text softmax runs over all ``M + B`` texts,
    the text->image softmax over the ``M`` images only.
    """
    _check_pair(Z, T)
    M = Z.shape[0]
    if M == 0:
        raise EmptyOrgansError("no organ embeddings")
    if T.shape[0] < M:
        raise ValueError(f"need at least {M} texts, got {T.shape[0]}")
    logits = Z @ T.T / tau
    idx = torch.arange(M)
    i2t = -torch.log_softmax(logits, dim=1)[idx, idx]
    t2i = -torch.log_softmax(logits[:, :M], dim=0)[idx, idx]
    return i2t.mean(), t2i.mean()


def grounded_infonce(Z: torch.Tensor, T: torch.Tensor, tau: float) -> torch.Tensor:
    i2t, t2i = infonce_terms(Z, T, tau)
    return i2t + t2i


def clip_batch_loss(V: torch.Tensor, T: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    if V.shape[0] != T.shape[0]:
        raise ValueError("image and text batches differ in size")
    return grounded_infonce(V, T, tau)


def organ_text_loss(Z: torch.Tensor, T: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    if Z.shape[0] != T.shape[0]:
        raise ValueError("organ and text counts differ")
    return grounded_infonce(Z, T, tau)


def abnormality_text_loss(Z: torch.Tensor, T: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    return grounded_infonce(Z, T, tau)


def segmentation_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    dice_epsilon: float = 1e-5,
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
) -> torch.Tensor:
    """Cross-entropy plus (1 - mean foreground soft dice).

    Accepts ``(K+1, D, H, W)`` logits with a ``(D, H, W)`` label map, or a
    leading batch axis on both; batched inputs are scored per image and
    averaged.
    """
    labels = torch.as_tensor(labels).long()
    if logits.ndim == 4:
        logits, labels = logits[None], labels[None]
    if logits.ndim != 5 or labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} are incompatible")
    n_classes = logits.shape[1]
    if n_classes < 2:
        raise ValueError("need at least background plus one foreground class")
    if labels.numel() and (int(labels.max()) >= n_classes or int(labels.min()) < 0):
        raise ValueError(f"label ids outside [0, {n_classes - 1}]")

    ce = F.cross_entropy(logits, labels, reduction="none").flatten(1).mean(dim=1)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * inter + dice_epsilon) / (denom + dice_epsilon)
    dice_loss = 1 - dice[:, 1:].mean(dim=1)
    return (ce_weight * ce + dice_weight * dice_loss).mean()


def weighted_total(l_ot, l_at, l_segm, cfg: LossConfig = LossConfig()):
    """Weighted sum; stays a tensor (with graph) when the inputs are tensors."""
    parts = (l_ot, l_at, l_segm)
    for name, v in zip(("l_ot", "l_at", "l_segm"), parts):
        value = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(value):
            raise TrainingDivergence(f"{name} is {value}")
    total = cfg.lambda_ot * l_ot + cfg.lambda_at * l_at + cfg.lambda_segm * l_segm
    return total


def total_loss(l_ot, l_at, l_segm, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    vals = [float(v.detach()) if torch.is_tensor(v) else float(v) for v in (l_ot, l_at, l_segm)]
    total = weighted_total(*vals, cfg)
    return LossBreakdown(*vals, total=float(total))

"""Loss functions and their equal-weight combination."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossValue:
    total: float
    supervised: float
    self_supervised: float
    task_accuracies: dict = field(default_factory=dict)


def cross_entropy(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean negative log-softmax of the target class, stabilised by max subtraction."""
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    n_classes = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= n_classes):
        raise ValueError(f"targets must lie in [0, {n_classes}), got range [{int(targets.min())}, {int(targets.max())}]")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_norm = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, targets[:, None])[:, 0]
    return (log_norm - picked).mean()


def accuracy(logits: torch.Tensor, targets) -> float:
    # torch.argmax returns the first maximal index: ties go to the lowest class.
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    return float((logits.argmax(dim=1) == targets).double().mean())


def prototypes(support_emb: torch.Tensor, support_labels, n_classes: int | None = None) -> torch.Tensor:
    labels = torch.as_tensor(support_labels, dtype=torch.long, device=support_emb.device)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    counts = torch.bincount(labels, minlength=n_classes)
    if (counts == 0).any():
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise ValueError(f"classes {missing} have no support examples")
    sums = torch.zeros(n_classes, support_emb.shape[1], dtype=support_emb.dtype, device=support_emb.device)
    sums = sums.index_add(0, labels, support_emb)
    return sums / counts[:, None].to(support_emb.dtype)


def prototype_logits(query_emb: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    """Negative squared Euclidean distance from each query to each prototype."""
    return -((query_emb[:, None, :] - protos[None, :, :]) ** 2).sum(-1)


def prototype_loss(support_emb, support_labels, query_emb, query_labels, n_classes: int | None = None):
    """Prototypical-network loss on the query set; returns ``(loss, accuracy, logits)``."""
    protos = prototypes(support_emb, support_labels, n_classes)
    logits = prototype_logits(query_emb, protos)
    return cross_entropy(logits, query_labels), accuracy(logits, query_labels), logits


def jigsaw_loss(logits: torch.Tensor, perm_indices):
    return cross_entropy(logits, perm_indices), accuracy(logits, perm_indices)


def rotation_loss(logits: torch.Tensor, angle_indices):
    return cross_entropy(logits, angle_indices), accuracy(logits, angle_indices)


def _finite(x) -> bool:
    return bool(torch.isfinite(x).all()) if torch.is_tensor(x) else math.isfinite(x)


def combine(supervised, self_supervised):
    """Equal-weight sum of the supervised and self-supervised losses."""
    if not _finite(supervised) or not _finite(self_supervised):
        sup, ssl = (float(x.detach()) if torch.is_tensor(x) else float(x) for x in (supervised, self_supervised))
        raise NonFiniteLossError(f"non-finite loss: supervised={sup}, self_supervised={ssl}")
    return supervised + self_supervised


"""Loss functions: negative cosine, symmetric two-view loss, supervised
contrastive loss over positives + pseudo-negatives, and log-variance fusion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
from torch import nn

from .errors import DatasetError, DegenerateBatchError
from .pseudolabel import FeatureBatch, PseudoNegativeSet, normalize_rows

if TYPE_CHECKING:  # pragma: no cover
    from .model import ViewEmbeddings

LOG_HEADER = "step,loss_cosine,loss_super,loss_total,v1,v2"


@dataclass
class SupConBatch:
    """Unit-row embeddings with class tags for the supervised contrastive loss.

    For each anchor i, the candidate set A(i) is every other row and the
    partner set P(i) is every other row sharing the anchor's label.
    """

    embeddings: torch.Tensor   # M x d, unit rows
    labels: torch.Tensor       # M integer class tags
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise DatasetError(f"temperature must be positive, got {self.temperature}")
        if self.embeddings.ndim != 2:
            raise DatasetError("embeddings must be an M x d matrix")
        if self.labels.shape[0] != self.embeddings.shape[0]:
            raise DatasetError("labels length must match embedding count")
        norms = torch.linalg.vector_norm(self.embeddings.detach(), dim=1)
        if not torch.all((norms - 1.0).abs() <= 1e-6):
            raise DatasetError("embedding rows must be unit-normalized")

    def partner_mask(self) -> torch.Tensor:
        """M x M boolean mask of P(i): same label, excluding self."""
        same = self.labels.view(-1, 1) == self.labels.view(1, -1)
        return same & ~torch.eye(len(self.labels), dtype=torch.bool)

    def candidate_mask(self) -> torch.Tensor:
        """M x M boolean mask of A(i): everything except self."""
        return ~torch.eye(len(self.labels), dtype=torch.bool)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


class UncertaintyWeights(nn.Module):
    """Trainable log-variance weights fusing the two loss branches."""

    def __init__(self, init_v1: float = 0.0, init_v2: float = 0.0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.v1 = nn.Parameter(torch.tensor(float(init_v1), dtype=dtype))
        self.v2 = nn.Parameter(torch.tensor(float(init_v2), dtype=dtype))

    def snapshot(self) -> tuple[float, float]:
        return float(self.v1.detach()), float(self.v2.detach())


@dataclass
class LossReport:
    """Per-step scalar losses and the current fusion weights."""

    loss_cosine: float | None
    loss_super: float | None
    loss_total: float
    v1: float
    v2: float

    def csv_row(self, step: int) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))
        return ",".join([str(step), fmt(self.loss_cosine), fmt(self.loss_super),
                         fmt(self.loss_total), repr(self.v1), repr(self.v2)])


def _unit(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    zero = (norms.detach().squeeze(1) == 0).nonzero(as_tuple=True)[0]
    if len(zero) > 0:
        raise ValueError(f"zero-norm vector in {name} at index {int(zero[0])}")
    return x / norms


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean negative cosine between rows of ``p`` and ``z``.

    ``z`` is treated as a constant: no gradient flows through it.
    """
    z = z.detach()
    return -(_unit(p, "p") * _unit(z, "z")).sum(dim=1).mean()


def simsiam_loss(e: "ViewEmbeddings") -> torch.Tensor:
    """Symmetric average of the two crossed negative-cosine terms."""
    return 0.5 * negative_cosine(e.p1, e.z2) + 0.5 * negative_cosine(e.p2, e.z1)


def supcon_loss(batch: SupConBatch, reduction: str = "sum") -> torch.Tensor:
    """Supervised contrastive loss over a labeled batch of unit embeddings.

    For each anchor with at least one same-label partner:

        -1/|P(i)| * sum_{p in P(i)} log[ exp(z_i.z_p / t) / sum_{a in A(i)} exp(z_i.z_a / t) ]

    computed with log-sum-exp stabilization. Anchors with empty P(i) are
    dropped. ``reduction`` is "sum" (the printed form, default) or "mean".

    Raises:
        DegenerateBatchError: if every anchor has an empty partner set.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if len(batch) < 2:
        raise DegenerateBatchError("degenerate batch: need at least 2 rows")

    pos_mask = batch.partner_mask()
    pos_counts = pos_mask.sum(dim=1)
    valid = pos_counts > 0
    if not bool(valid.any()):
        raise DegenerateBatchError("degenerate batch: every anchor has an empty partner set")

    sim = (batch.embeddings @ batch.embeddings.T) / batch.temperature
    eye = torch.eye(len(batch), dtype=torch.bool)
    candidates = sim.masked_fill(eye, float("-inf"))
    log_denom = torch.logsumexp(candidates, dim=1)
    log_prob = sim - log_denom.unsqueeze(1)

    per_anchor = -(log_prob * pos_mask).sum(dim=1) / pos_counts.clamp(min=1)
    selected = per_anchor[valid]
    return selected.sum() if reduction == "sum" else selected.mean()


def total_loss(loss1, loss2, w: UncertaintyWeights) -> torch.Tensor:
    """Log-variance weighted fusion: e^{-v1}*loss1 + v1 + e^{-v2}*loss2 + v2."""
    return (torch.exp(-w.v1) * loss1 + w.v1) + (torch.exp(-w.v2) * loss2 + w.v2)


def build_supcon_batch(
    positives: FeatureBatch,
    pseudo_negatives: PseudoNegativeSet,
    temperature: float = 0.1,
) -> SupConBatch:
    """Concatenate labeled positives with pseudo-negatives into one batch.

    Rows are normalized; labels are 1 for positives and 0 for pseudo-negatives.
    """
    if len(positives) == 0:
        raise DatasetError("positive feature batch is empty")
    if len(pseudo_negatives) == 0:
        raise DatasetError("pseudo-negative set is empty")
    pos = positives if positives.normalized else normalize_rows(positives)
    embeddings = torch.cat([pos.vectors, pseudo_negatives.vectors], dim=0)
    labels = torch.cat([
        torch.ones(len(pos), dtype=torch.long),
        torch.zeros(len(pseudo_negatives), dtype=torch.long),
    ])
    return SupConBatch(embeddings=embeddings, labels=labels, temperature=temperature)

"""Pseudo-negative synthesis by similarity ranking, and its purity calculus.

Unlabeled feature vectors are partitioned into fixed-size subgroups; within
each subgroup the member whose cosine similarity to a randomly drawn labeled
positive anchor sits at the lower median rank is promoted to the negative
class. Under extreme class imbalance the promoted member is almost surely a
true negative; :func:`purity_exact` quantifies exactly how surely.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)


@dataclass
class FeatureBatch:
    """A matrix of embedding vectors with provenance into the source dataset.

    Attributes:
        vectors: N x d float tensor.
        normalized: whether every row is unit L2 norm.
        source_indices: N indices into the originating dataset (defaults to
            0..N-1 when not supplied).
    """

    vectors: torch.Tensor
    normalized: bool = False
    source_indices: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DatasetError("FeatureBatch requires a non-empty N x d matrix")
        if self.source_indices is None:
            self.source_indices = np.arange(self.vectors.shape[0], dtype=np.int64)
        else:
            self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        if len(self.source_indices) != self.vectors.shape[0]:
            raise DatasetError("source_indices length must match vector count")
        if self.normalized:
            norms = torch.linalg.vector_norm(self.vectors.detach(), dim=1)
            if not torch.all((norms - 1.0).abs() <= 1e-6):
                raise DatasetError("normalized=True but rows are not unit norm")

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class PseudoConfig:
    """Knobs for pseudo-negative synthesis."""

    subgroup_size: int = 16
    anchor_seed: int = 0

    def __post_init__(self):
        if self.subgroup_size < 2:
            raise ConfigError(f"subgroup_size must be >= 2, got {self.subgroup_size}")


@dataclass
class PseudoNegativeSet:
    """Unlabeled features promoted to the negative class.

    One member is selected per subgroup; ``vectors`` keeps the autograd graph
    of the normalized inputs so downstream losses can backpropagate into the
    encoder through the selected features.
    """

    vectors: torch.Tensor            # G x d, unit rows
    source_indices: np.ndarray       # G indices into the originating dataset
    anchor_index: int                # row of the positive batch used as anchor
    similarities: np.ndarray         # G x k anchor-vs-member cosine values
    selected_rows: np.ndarray        # G row positions into the unlabeled batch
    dropped: int = 0                 # remainder rows that did not fill a subgroup

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class PurityEstimate:
    """Exact hypergeometric law of the positive count inside one draw."""

    pool_size: int
    positive_count: int
    draw_size: int
    probabilities: list[float]       # p(n) for n = 0..min(K, m)
    cumulative: list[float]          # p(n <= t) for the same support
    log_probabilities: list[float]   # log p(n); -inf where p(n) == 0

    def p_at_most(self, t: int) -> float:
        """Probability of drawing at most ``t`` positives."""
        t = min(t, len(self.cumulative) - 1)
        if t < 0:
            return 0.0
        return self.cumulative[t]


def normalize_rows(batch: FeatureBatch) -> FeatureBatch:
    """Scale every row of ``batch`` to unit L2 norm.

    Raises:
        ValueError: if any row has zero norm; the message names its index.
    """
    norms = torch.linalg.vector_norm(batch.vectors, dim=1, keepdim=True)
    zero = (norms.detach().squeeze(1) == 0).nonzero(as_tuple=True)[0]
    if len(zero) > 0:
        raise ValueError(f"cannot normalize zero-norm row at index {int(zero[0])}")
    return FeatureBatch(
        vectors=batch.vectors / norms,
        normalized=True,
        source_indices=batch.source_indices,
    )


def cosine_similarity(a, b) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1] against rounding."""
    av = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    bv = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    return float(torch.clamp(av @ bv, -1.0, 1.0))


def synthesize_pseudo_negatives(
    f_un: FeatureBatch,
    f_pos: FeatureBatch,
    cfg: PseudoConfig,
    rng: np.random.Generator | None = None,
) -> PseudoNegativeSet:
    """Promote one member of each unlabeled subgroup to the negative class.

    Both feature batches are row-normalized first. The unlabeled batch is
    partitioned in source order into floor(X/k) subgroups of exactly k rows
    (the remainder is dropped and logged). A single anchor is drawn uniformly
    from the positive batch; within each subgroup the member at the lower
    median rank of anchor similarity (rank ceil(k/2) ascending, ties broken by
    lower source index) is selected.
    """
    k = cfg.subgroup_size
    x = len(f_un)
    if x < k:
        raise DatasetError(f"need at least {k} unlabeled features, got {x}")
    if len(f_pos) < 1:
        raise DatasetError("need at least one positive feature")
    if rng is None:
        rng = np.random.default_rng(cfg.anchor_seed)

    un = f_un if f_un.normalized else normalize_rows(f_un)
    pos = f_pos if f_pos.normalized else normalize_rows(f_pos)

    groups = x // k
    dropped = x - groups * k
    if dropped:
        logger.debug("dropping %d remainder rows (%d %% %d)", dropped, x, k)

    anchor_index = int(rng.integers(len(pos)))
    anchor = pos.vectors[anchor_index].detach()
    sims = (un.vectors.detach() @ anchor).cpu().numpy().astype(np.float64)
    sims = sims[: groups * k].reshape(groups, k)

    # Stable ascending sort: within a subgroup, positions follow source order,
    # so ties resolve to the lower source index.
    order = np.argsort(sims, axis=1, kind="stable")
    median_rank = math.ceil(k / 2) - 1
    local_sel = order[:, median_rank]
    selected_rows = np.arange(groups) * k + local_sel

    return PseudoNegativeSet(
        vectors=un.vectors[selected_rows],
        source_indices=un.source_indices[selected_rows],
        anchor_index=anchor_index,
        similarities=sims,
        selected_rows=selected_rows,
        dropped=dropped,
    )


def purity_exact(pool_size: int, positive_count: int, draw_size: int) -> PurityEstimate:
    """Exact distribution of the positive count in one uniform draw.

    p(n) = C(K, n) * C(N-K, m-n) / C(N, m) for n = 0..min(K, m). Probabilities
    are computed as exact big-integer ratios (correctly rounded to double);
    log probabilities come from the log-gamma form, which stays finite for
    pool sizes where the tail terms underflow.
    """
    n_pool, k_pos, m = pool_size, positive_count, draw_size
    if not (0 <= k_pos <= n_pool):
        raise ConfigError(f"positive_count must be in [0, {n_pool}], got {k_pos}")
    if not (1 <= m <= n_pool):
        raise ConfigError(f"draw_size must be in [1, {n_pool}], got {m}")

    denom = math.comb(n_pool, m)
    log_denom = _log_comb(n_pool, m)
    probs: list[float] = []
    logps: list[float] = []
    for n in range(min(k_pos, m) + 1):
        num = math.comb(k_pos, n) * math.comb(n_pool - k_pos, m - n)
        probs.append(num / denom)
        if num == 0:
            logps.append(float("-inf"))
        else:
            logps.append(_log_comb(k_pos, n) + _log_comb(n_pool - k_pos, m - n) - log_denom)

    cumulative: list[float] = []
    acc = 0.0
    for p in probs:
        acc += p
        cumulative.append(acc)

    return PurityEstimate(
        pool_size=n_pool,
        positive_count=k_pos,
        draw_size=m,
        probabilities=probs,
        cumulative=cumulative,
        log_probabilities=logps,
    )


def _log_comb(n: int, r: int) -> float:
    if r < 0 or r > n:
        return float("-inf")
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)

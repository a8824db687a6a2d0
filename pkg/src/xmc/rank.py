"""Label-rank head: bottleneck projection plus learned label embeddings.

Scores each candidate label by the sigmoid of the dot product between its
embedding row and the bottleneck activation of the text representation.
The bottleneck keeps the head's size at L*b + b*(rep_width+1) parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as t
from .errors import ConfigError, ContractError, DimensionError
from .recall import CandidateSet
from .tensor import Tensor


@dataclass
class DiscriminatorParams:
    label_emb: Tensor  # (L, embed_dim), random init
    bottleneck_w: Tensor  # (embed_dim, rep_width)
    bottleneck_b: Tensor  # (embed_dim,)

    @property
    def num_labels(self) -> int:
        return self.label_emb.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.label_emb.shape[1]

    def param_count(self) -> int:
        return self.label_emb.size + self.bottleneck_w.size + self.bottleneck_b.size


def init_discriminator(
    num_labels: int, embed_dim: int, rep_width: int, rng: np.random.Generator
) -> DiscriminatorParams:
    return DiscriminatorParams(
        label_emb=Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(num_labels, embed_dim)),
            requires_grad=True,
        ),
        bottleneck_w=Tensor(rng.normal(0.0, 0.02, size=(embed_dim, rep_width)), requires_grad=True),
        bottleneck_b=Tensor(np.zeros(embed_dim), requires_grad=True),
    )


def gather_embeddings(label_emb: Tensor, candidates: CandidateSet | np.ndarray) -> Tensor:
    """Rows of the embedding matrix for the candidate labels (gradient scatters back)."""
    ids = candidates.labels if isinstance(candidates, CandidateSet) else np.asarray(candidates)
    if len(ids) and (ids.min() < 0 or ids.max() >= label_emb.shape[0]):
        raise ContractError(
            f"candidate label id outside [0, {label_emb.shape[0]})"
        )
    return t.embedding(label_emb, ids)


def bottleneck(rep_row: Tensor, params: DiscriminatorParams, activation: str = "sigmoid") -> Tensor:
    """Project a single representation row to (embed_dim, 1)."""
    if rep_row.ndim != 1 or rep_row.shape[0] != params.bottleneck_w.shape[1]:
        raise DimensionError(
            f"bottleneck: rep shape {rep_row.shape} vs weight {params.bottleneck_w.shape}"
        )
    pre = t.add(
        t.matmul(params.bottleneck_w, t.reshape(rep_row, (rep_row.shape[0], 1))),
        t.reshape(params.bottleneck_b, (params.embed_dim, 1)),
    )
    if activation == "sigmoid":
        return t.sigmoid(pre)
    if activation == "relu":
        return t.relu(pre)
    raise ConfigError(f"unknown bottleneck activation {activation!r}")


def rank_scores(
    rep_row: Tensor,
    gathered: Tensor,
    params: DiscriminatorParams,
    activation: str = "sigmoid",
) -> Tensor:
    """Per-candidate probabilities for one instance, shape (n,)."""
    h = bottleneck(rep_row, params, activation)
    logits = t.matmul(gathered, h)
    return t.reshape(t.sigmoid(logits), (gathered.shape[0],))


def rank_loss(scores: Tensor, is_positive: np.ndarray, invert_targets: bool = False) -> Tensor:
    """Summed BCE with positives as target 1 (``invert_targets`` is debug-only)."""
    flags = np.asarray(is_positive, dtype=bool)
    if flags.shape != scores.shape:
        raise DimensionError(f"rank_loss: {scores.shape} scores vs {flags.shape} flags")
    targets = (~flags if invert_targets else flags).astype(np.float64)
    return t.bce_loss(scores, targets)

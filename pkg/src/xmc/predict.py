"""End-to-end inference and P@k evaluation.

A label's final score is the product of its cluster's recall probability and
its own rank probability; predictions are the top-K labels by that product.
No positives are injected at inference, so fewer than K candidates may exist;
short result lists are returned as-is and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import tensor as t
from .cluster import ClusterMap
from .corpus import XmcDataset, batch_iter
from .encoder import encode
from .errors import ConfigError
from .rank import gather_embeddings, rank_scores
from .recall import recall_scores, top_clusters

if TYPE_CHECKING:  # pragma: no cover
    from .trainer import ModelBundle


@dataclass
class Prediction:
    labels: np.ndarray  # descending fused score, ties by ascending label id
    scores: np.ndarray
    short: bool = False  # fewer than K candidates were available

    def as_line(self) -> str:
        return " ".join(f"{l}:{s:.6g}" for l, s in zip(self.labels, self.scores))


@dataclass
class EvalReport:
    precision: dict[int, float]
    cluster_recall: float
    count: int
    used_swa: bool = False

    def table(self) -> str:
        rows = [f"{'metric':<18}{'value':>10}"]
        for k in sorted(self.precision):
            rows.append(f"{f'P@{k}':<18}{self.precision[k]:>10.4f}")
        rows.append(f"{'cluster_recall':<18}{self.cluster_recall:>10.4f}")
        rows.append(f"{'instances':<18}{self.count:>10d}")
        return "\n".join(rows)

    def machine_lines(self) -> str:
        parts = [f"p{k}={self.precision[k]:.6f}" for k in sorted(self.precision)]
        parts.append(f"cluster_recall={self.cluster_recall:.6f}")
        parts.append(f"instances={self.count}")
        parts.append(f"swa={int(self.used_swa)}")
        return " ".join(parts)


def _fused_candidates(bundle: "ModelBundle", rep_row, cluster_probs: np.ndarray, b_top: int):
    """(labels, fused scores) over the candidates of the top-b_top clusters."""
    cmap = bundle.cluster_map
    chosen = top_clusters(cluster_probs, b_top)
    labels = np.concatenate([cmap.members[c] for c in chosen])
    recall_part = np.concatenate(
        [np.full(len(cmap.members[c]), cluster_probs[c]) for c in chosen]
    )
    gathered = gather_embeddings(bundle.discriminator.label_emb, labels)
    rank_part = rank_scores(rep_row, gathered, bundle.discriminator, bundle.config.bottleneck_act).data
    return labels, recall_part * rank_part


def _top_k(labels: np.ndarray, fused: np.ndarray, k: int) -> Prediction:
    order = np.lexsort((labels, -fused))[:k]
    return Prediction(labels[order], fused[order], short=len(order) < k)


def predict_batch(
    token_ids: np.ndarray,
    mask: np.ndarray,
    bundle: "ModelBundle",
    b_top: int,
    k: int,
    use_swa: bool | None = None,
) -> list[Prediction]:
    """Top-K fused predictions for a padded batch (dropout off)."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    view = bundle.inference_params(use_swa)
    if not 1 <= b_top <= view.cluster_map.num_clusters:
        raise ConfigError(f"b_top={b_top} outside [1, {view.cluster_map.num_clusters}]")
    rep = encode(token_ids, mask, view.enc_config, view.params, training=False, rng=view.rng)
    cluster_probs = recall_scores(rep, view.generator).data
    out = []
    for i in range(token_ids.shape[0]):
        labels, fused = _fused_candidates(view, t.take(rep, i, axis=0), cluster_probs[i], b_top)
        out.append(_top_k(labels, fused, k))
    return out


def ensemble_predict(
    bundles: Sequence["ModelBundle"],
    token_ids: np.ndarray,
    mask: np.ndarray,
    b_top: int,
    k: int,
    use_swa: bool | None = None,
) -> list[Prediction]:
    """Average fused per-label scores across bundles (absent labels score 0)."""
    if not bundles:
        raise ConfigError("ensemble needs at least one bundle")
    num_labels = bundles[0].num_labels
    if any(b.num_labels != num_labels for b in bundles):
        raise ConfigError("ensemble bundles must share the label space")
    batch = token_ids.shape[0]
    totals = np.zeros((batch, num_labels))
    for bundle in bundles:
        view = bundle.inference_params(use_swa)
        rep = encode(token_ids, mask, view.enc_config, view.params, training=False, rng=view.rng)
        cluster_probs = recall_scores(rep, view.generator).data
        for i in range(batch):
            labels, fused = _fused_candidates(view, t.take(rep, i, axis=0), cluster_probs[i], min(b_top, view.cluster_map.num_clusters))
            totals[i, labels] += fused
    totals /= len(bundles)
    out = []
    for i in range(batch):
        present = np.flatnonzero(totals[i] > 0.0)
        out.append(_top_k(present, totals[i, present], k))
    return out


def precision_at_k(predicted: Iterable[int], truth: set[int], k: int) -> float:
    """|top-k of the ranking that are true| / k; missing slots count as misses."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    top = list(predicted)[:k]
    return sum(1 for label in top if label in truth) / k


def cluster_recall(
    scores_row: np.ndarray, truth: Iterable[int], cmap: ClusterMap, b_top: int
) -> float:
    """Fraction of positive labels whose cluster ranks in the top b_top."""
    truth = list(truth)
    if not truth:
        return 1.0
    chosen = set(top_clusters(np.asarray(scores_row), b_top).tolist())
    covered = sum(1 for label in truth if int(cmap.assign[label]) in chosen)
    return covered / len(truth)


def evaluate(
    dataset: XmcDataset,
    bundles: Sequence["ModelBundle"],
    b_top: int,
    ks: tuple[int, ...] = (1, 3, 5),
    use_swa: bool | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """P@k over a dataset plus micro-averaged cluster recall.

    With an ensemble, predictions use the score average; cluster recall is
    averaged over the member models.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    hits = {k: 0.0 for k in ks}
    covered = 0.0
    total_pos = 0
    used_swa = any(b.swa_available() for b in bundles) if use_swa is None else use_swa
    views = [b.inference_params(use_swa) for b in bundles]
    for batch in batch_iter(dataset, batch_size, seed=0, shuffle=False):
        if len(views) == 1:
            preds = predict_batch(batch.token_ids, batch.mask, views[0], b_top, max(ks), use_swa=False)
        else:
            preds = ensemble_predict(views, batch.token_ids, batch.mask, b_top, max(ks), use_swa=False)
        for view in views:
            rep = encode(batch.token_ids, batch.mask, view.enc_config, view.params, training=False, rng=view.rng)
            probs = recall_scores(rep, view.generator).data
            for i, labels in enumerate(batch.labels):
                if labels:
                    frac = cluster_recall(probs[i], labels, view.cluster_map, min(b_top, view.cluster_map.num_clusters))
                    covered += frac * len(labels) / len(views)
        for pred, labels in zip(preds, batch.labels):
            total_pos += len(labels)
            truth = set(labels)
            for k in ks:
                hits[k] += precision_at_k(pred.labels.tolist(), truth, k)
    n = len(dataset)
    return EvalReport(
        precision={k: hits[k] / n for k in ks},
        cluster_recall=covered / max(total_pos, 1),
        count=n,
        used_swa=used_swa,
    )

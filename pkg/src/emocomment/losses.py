"""Training objectives.

Teacher-forced negative log likelihood over comment tokens, plus a
sequence-level emotion loss: each step's distribution is summarized as a
probability-weighted sum of its top-K token embeddings, the per-step
summaries are averaged, and a linear classifier head must recover the
requested emotion from that average.  The total objective is the NLL
plus a small multiple of the emotion loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, TrainingError

EMOTION_LOSS_WEIGHT = 0.01
TOPK_DEFAULT = 50


@dataclass
class LossReport:
    """Scalar loss values for one batch, plus the tensor to backpropagate."""

    mle: float
    emo: float
    total: float
    token_count: int
    total_tensor: Tensor


def mle_loss(step_dists: list[Tensor], target_tokens: np.ndarray,
             mask: np.ndarray) -> Tensor:
    """Mean negative log likelihood of targets over unmasked positions.

    step_dists holds one (B, V) distribution per target column of
    target_tokens (B, L); mask (B, L) selects real positions.
    """
    target_tokens = np.asarray(target_tokens)
    if len(step_dists) != target_tokens.shape[1]:
        raise DataError(
            f"{len(step_dists)} step distributions for "
            f"{target_tokens.shape[1]} target positions")
    count = float(mask.sum())
    if count == 0:
        raise DataError("mle_loss: every target position is masked")
    total = None
    for t, dist in enumerate(step_dists):
        nll = ad.cross_entropy(dist, target_tokens[:, t])
        masked = ad.mul(nll, Tensor(mask[:, t].astype(dist.data.dtype)))
        step_sum = ad.tsum(masked)
        total = step_sum if total is None else ad.add(total, step_sum)
    return ad.mul(total, 1.0 / count)


def step_embedding(final_dist: Tensor, embedding_table: Tensor,
                   k: int) -> Tensor:
    """Probability-weighted sum of the embeddings of the K likeliest tokens.

    Ties select the lower token id.  The selection is fixed; gradients
    flow through the selected probabilities and the embedding rows.
    """
    b, v = final_dist.shape
    if not 1 <= k <= v:
        raise ConfigError(f"top-K must be in [1, {v}], got {k}")
    top_ids = np.argsort(-final_dist.data, axis=1, kind="stable")[:, :k]
    top_probs = ad.gather_last(final_dist, top_ids)
    top_embs = ad.embedding_lookup(embedding_table, top_ids)
    d = embedding_table.shape[1]
    return ad.tsum(ad.mul(top_embs, ad.reshape(top_probs, (b, k, 1))), axis=1)


def emotion_loss(step_dists: list[Tensor], embedding_table: Tensor,
                 head: Tensor, gold_labels: np.ndarray, k: int,
                 step_mask: np.ndarray | None = None) -> Tensor:
    """Negative log probability of the gold emotion under the head classifier.

    The classifier reads the mean over steps of the top-K step
    embeddings; head is (d_emb, n_labels).  With a (B, T) step_mask the
    mean runs over each row's unmasked steps only.
    """
    if not step_dists:
        raise DataError("emotion_loss needs at least one decoding step")
    gold_labels = np.asarray(gold_labels)
    n_labels = head.shape[1]
    if gold_labels.min() < 0 or gold_labels.max() >= n_labels:
        raise DataError(
            f"gold emotion labels must lie in [0, {n_labels}), got "
            f"{gold_labels.tolist()}")
    summaries = [step_embedding(dist, embedding_table, k)
                 for dist in step_dists]
    if step_mask is None:
        mean_summary = ad.mul(_sum_tensors(summaries), 1.0 / len(summaries))
    else:
        counts = step_mask.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise DataError("emotion_loss: a row has no unmasked step")
        stacked = ad.stack(summaries, axis=1)
        dtype = stacked.data.dtype
        weighted = ad.mul(stacked, Tensor(step_mask[:, :, None].astype(dtype)))
        mean_summary = ad.mul(ad.tsum(weighted, axis=1),
                              Tensor((1.0 / counts).astype(dtype)))
    label_dist = ad.softmax(ad.matmul(mean_summary, head), axis=1)
    return ad.tmean(ad.cross_entropy(label_dist, gold_labels))


def _sum_tensors(tensors: list[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return total


def total_loss(mle: Tensor, emo: Tensor | None, weight: float,
               token_count: int) -> LossReport:
    """Combine the objectives: total = mle + weight · emo."""
    mle_value = float(mle.data)
    emo_value = float(emo.data) if emo is not None else 0.0
    if not (np.isfinite(mle_value) and np.isfinite(emo_value)):
        raise TrainingError(
            f"non-finite loss: mle={mle_value}, emo={emo_value}")
    if emo is None or weight == 0.0:
        total = mle
    else:
        total = ad.add(mle, ad.mul(emo, weight))
    return LossReport(mle_value, emo_value, float(total.data),
                      token_count, total)

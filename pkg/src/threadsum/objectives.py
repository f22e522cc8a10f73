"""Pretraining losses: causal language modeling and thread prediction.

Thread prediction samples 20% of a conversation's utterances (at least one),
pairs them against every other utterance in both directions, and asks a
bilinear-sigmoid classifier whether the second utterance is a strict
ancestor of the first.  The loss is summed over the candidate set by
default; a mean reduction is available for LR stability at varying sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .conversation import ConversationTree
from .model import Model, ModelInput

__all__ = [
    "ThreadPairBatch",
    "clm_loss",
    "sample_thread_pairs",
    "pair_probability",
    "pair_probabilities",
    "thread_pred_loss",
    "total_loss",
    "instance_loss",
]


@dataclass
class ThreadPairBatch:
    sampled: np.ndarray  # utterance indices in C_s
    rows: np.ndarray  # pair left elements  (u_i)
    cols: np.ndarray  # pair right elements (u_j, candidate ancestor)
    labels: np.ndarray  # 1.0 where u_j is a strict ancestor of u_i

    @property
    def num_pairs(self) -> int:
        return len(self.rows)


def clm_loss(logits: Tensor, target_ids) -> Tensor:
    """Mean next-token cross-entropy over the summary."""
    return ad.cross_entropy(logits, target_ids)


def sample_thread_pairs(tree: Union[ConversationTree, np.ndarray],
                        rng: Union[int, np.random.Generator]) -> ThreadPairBatch:
    """Sample C_s (20% of utterances, min 1) and enumerate candidate pairs.

    Accepts a tree or a precomputed strict-ancestor matrix.  The candidate
    set is C_s x C union C x C_s minus self-pairs, deduplicated, in sorted
    order so a given sample yields one canonical batch.
    """
    ancestors = tree.ancestor_matrix() if isinstance(tree, ConversationTree) else np.asarray(tree)
    n = ancestors.shape[0]
    if n < 2:
        raise ValueError(f"thread prediction needs at least 2 utterances, got {n}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    n_sampled = max(1, round(0.2 * n))
    sampled = np.sort(rng.choice(n, size=n_sampled, replace=False))

    pairs = set()
    for s in sampled:
        for other in range(n):
            if other != s:
                pairs.add((int(s), other))
                pairs.add((other, int(s)))
    ordered = sorted(pairs)
    rows = np.array([i for i, _ in ordered], dtype=np.int64)
    cols = np.array([j for _, j in ordered], dtype=np.int64)
    labels = ancestors[rows, cols].astype(np.float64)
    return ThreadPairBatch(sampled=sampled, rows=rows, cols=cols, labels=labels)


def pair_probabilities(vectors: Tensor, w_a: Parameter, w_b: Parameter,
                       batch: ThreadPairBatch) -> Tensor:
    """sigmoid((v_i W_a) (v_j W_b)^T) for every candidate pair, as [|A|]."""
    va = ad.matmul(vectors, w_a)
    vb = ad.matmul(vectors, w_b)
    scores = ad.matmul(va, ad.transpose(vb))
    return ad.sigmoid(ad.gather_pairs(scores, batch.rows, batch.cols))


def pair_probability(vectors: Tensor, w_a: Parameter, w_b: Parameter, i: int, j: int) -> Tensor:
    """Single-pair convenience form of pair_probabilities."""
    one = ThreadPairBatch(sampled=np.array([i]), rows=np.array([i]),
                          cols=np.array([j]), labels=np.zeros(1))
    return pair_probabilities(vectors, w_a, w_b, one)


def thread_pred_loss(probs: Tensor, batch: ThreadPairBatch, reduction: str = "sum") -> Tensor:
    return ad.binary_cross_entropy(probs, batch.labels, reduction=reduction)


def total_loss(clm: Tensor, thread_pred: Optional[Tensor], lam: float) -> Tensor:
    if thread_pred is None or lam == 0.0:
        return clm
    return ad.add(clm, ad.scale(thread_pred, lam))


def instance_loss(model: Model, mi: ModelInput, rng=None, training: bool = False,
                  pair_batch: Optional[ThreadPairBatch] = None,
                  pair_rng: Union[int, np.random.Generator, None] = None):
    """Combined loss for one conversation; returns (loss, metrics dict).

    Thread-prediction inputs come from token-encoder bos outputs or the
    utterance encoder per config.thread_pred_source.  With lambda 0 the
    thread term is skipped entirely (fine-tuning mode).
    """
    cfg = model.config
    result = model.forward(mi, rng=rng, training=training)
    loss_clm = clm_loss(result.logits, mi.summary_target)

    lam = cfg.lambda_thread_pred
    if lam == 0.0:
        return loss_clm, {"loss_clm": loss_clm.item(), "loss_tp": 0.0}

    if pair_batch is None:
        if pair_rng is None:
            raise ValueError("need pair_batch or pair_rng when lambda_thread_pred != 0")
        pair_batch = sample_thread_pairs(mi.ancestors, pair_rng)
    vectors = result.token_bos if cfg.thread_pred_source == "token_bos" else result.utterance_states
    probs = pair_probabilities(vectors, model.params["tp.wa"], model.params["tp.wb"], pair_batch)
    loss_tp = thread_pred_loss(probs, pair_batch, reduction=cfg.thread_pred_reduction)
    loss = total_loss(loss_clm, loss_tp, lam)
    return loss, {"loss_clm": loss_clm.item(), "loss_tp": loss_tp.item()}

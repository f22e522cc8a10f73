"""
Thread-aware attention: what the relation term actually changes
===============================================================

Utterance-level attention scores are ((q + r)(k + r)^T - r r^T) / sqrt(d)
where r is an embedding of the pair's thread relation.  Off-path pairs
share one bucket; same-path pairs are bucketed by clipped depth delta.
This script shows the score surgery on a toy tree, with the content term
held fixed so only the structural contribution moves.
"""

import numpy as np

from threadsum.autodiff import Tensor
from threadsum.conversation import (
    ConversationTree,
    Utterance,
    num_relation_buckets,
    relation_index,
)
from threadsum.model import thread_attention_scores

np.set_printoptions(precision=2, suppress=True)

# two branches under one root; 4 and 5 extend opposite branches
tree = ConversationTree([
    Utterance(0, "a", "root", 0, None),
    Utterance(1, "b", "branch one", 1, 0),
    Utterance(2, "c", "branch two", 2, 0),
    Utterance(3, "d", "deeper in one", 3, 1),
    Utterance(4, "e", "deeper still", 4, 3),
    Utterance(5, "f", "deeper in two", 5, 2),
])
k = 2
buckets = relation_index(tree, k)
print(f"relation buckets (k={k}, {num_relation_buckets(k)} buckets, 0 = off-path):")
print(buckets)

n, dz = len(tree), 4
rng = np.random.default_rng(0)
q = rng.normal(size=(n, dz))
kk = rng.normal(size=(n, dz))

# structure off: a zero relation table leaves plain scaled dot-product scores
plain = thread_attention_scores(
    Tensor(q), Tensor(kk), Tensor(np.zeros((num_relation_buckets(k), dz))),
    buckets, dz).data
print("\ncontent-only scores (zero relation table):")
print(plain)

# structure on: give every same-path bucket a strong shared direction.  The
# delta (scores - plain) is q.r + k.r, so it never touches off-path pairs.
table = np.zeros((num_relation_buckets(k), dz))
table[1:] = -2.0 * rng.normal(size=dz)  # bucket 0 (off-path) stays zero
scored = thread_attention_scores(Tensor(q), Tensor(kk), Tensor(table), buckets, dz).data
delta = scored - plain
print("\nscore shift added by the relation term:")
print(delta)

on_path = buckets > 0
print(f"\nmean |shift| on-path  : {np.abs(delta[on_path]).mean():.3f}")
print(f"mean |shift| off-path : {np.abs(delta[~on_path]).mean():.3f}  (always 0 here)")
assert np.allclose(delta[~on_path], 0.0)

# per-row softmax: the structural term redistributes weight along the
# thread; off-path raw scores only move through renormalization
def softmax(e):
    w = np.exp(e - e.max(-1, keepdims=True))
    return w / w.sum(-1, keepdims=True)

row = 4  # deepest utterance of branch one; its thread is 0 -> 1 -> 3 -> 4
print(f"\nattention of utterance {row} (thread = 0,1,3,4; off-path = 2,5):")
print("  content only :", softmax(plain)[row])
print("  with relation:", softmax(scored)[row])

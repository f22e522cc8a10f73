"""Conversation trees: utterances with reply links, depth, and path relations.

A conversation is an ordered sequence of utterances where every utterance
except the first replies to an earlier one.  The reply links form a tree
rooted at the first utterance, and the tree structure is what the rest of
the package consumes: depth differences drive the relative attention
buckets, and ancestor relations label the thread-prediction pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Utterance",
    "ConversationTree",
    "ThreadRelation",
    "clip",
    "apply_role_template",
    "linearize",
    "relation_index",
    "num_relation_buckets",
]


class TreeError(ValueError):
    """Raised when utterances do not form a valid conversation tree."""


@dataclass(frozen=True)
class Utterance:
    """One turn of a conversation.

    ``id`` is the dense position index inside its tree (0..n-1); original
    external identifiers belong in ``meta``.  ``parent_id`` is None only for
    the root.  ``score`` carries net upvotes where the source provides them.
    """

    id: int
    author: str
    text: str
    timestamp: int = 0
    parent_id: Optional[int] = None
    role: Optional[str] = None
    score: Optional[int] = None
    meta: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class ThreadRelation:
    """Relation between two utterances: on one root-to-leaf path, or not.

    For a same-path pair the payload is the signed depth difference
    ``depth(u_i) - depth(u_j)``; unrelated pairs carry no payload.
    """

    on_same_path: bool
    delta: int = 0

    @classmethod
    def same_path(cls, delta: int) -> "ThreadRelation":
        return cls(True, delta)

    @classmethod
    def unrelated(cls) -> "ThreadRelation":
        return cls(False, 0)

    def flipped(self) -> "ThreadRelation":
        """Relation with the argument order swapped."""
        return ThreadRelation(self.on_same_path, -self.delta)


class ConversationTree:
    """Immutable tree of utterances, ordered by (timestamp, id).

    Invariants checked at construction:
      * utterance ``id`` equals its position (dense 0..n-1),
      * exactly one root, at position 0,
      * every parent precedes its child in the sequence,
      * a parent's timestamp is strictly below its child's.
    """

    __slots__ = ("utterances", "_depths")

    def __init__(self, utterances: Sequence[Utterance]):
        utterances = tuple(utterances)
        if not utterances:
            raise TreeError("a conversation tree needs at least one utterance")
        for pos, u in enumerate(utterances):
            if u.id != pos:
                raise TreeError(f"utterance ids must be dense: position {pos} has id {u.id}")
        if utterances[0].parent_id is not None:
            raise TreeError("the first utterance must be the root (no parent)")
        depths = [0] * len(utterances)
        for pos, u in enumerate(utterances[1:], start=1):
            if u.parent_id is None:
                raise TreeError(f"utterance {pos} has no parent but is not the root")
            if not 0 <= u.parent_id < pos:
                raise TreeError(f"utterance {pos} replies to {u.parent_id}, which does not precede it")
            parent = utterances[u.parent_id]
            if not parent.timestamp < u.timestamp:
                raise TreeError(
                    f"utterance {pos} (t={u.timestamp}) must come strictly after "
                    f"its parent {u.parent_id} (t={parent.timestamp})"
                )
            depths[pos] = depths[u.parent_id] + 1
        prev = utterances[0]
        for u in utterances[1:]:
            if (u.timestamp, u.id) <= (prev.timestamp, prev.id):
                raise TreeError("utterances must be sorted by (timestamp, id)")
            prev = u
        self.utterances = utterances
        self._depths = tuple(depths)

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]

    def __iter__(self):
        return iter(self.utterances)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConversationTree) and self.utterances == other.utterances

    def __repr__(self) -> str:
        return f"ConversationTree(n={len(self)})"

    @classmethod
    def from_records(cls, records: Iterable) -> "ConversationTree":
        """Build a tree from records carrying arbitrary (e.g. string) ids.

        Accepts ``Utterance`` objects or plain mappings with the same keys.
        Records are sorted by (timestamp, str(id)), re-indexed densely, and
        parent references remapped.  Original ids are kept under
        ``meta['source_id']``.
        """
        as_utts = [
            r if isinstance(r, Utterance) else Utterance(
                id=r["id"],
                author=r.get("author"),
                text=r.get("text", ""),
                timestamp=r.get("timestamp", 0),
                parent_id=r.get("parent_id"),
                role=r.get("role"),
                score=r.get("score"),
                meta=dict(r.get("meta", {})),
            )
            for r in records
        ]
        ordered = sorted(as_utts, key=lambda u: (u.timestamp, str(u.id)))
        remap = {u.id: pos for pos, u in enumerate(ordered)}
        rebuilt = []
        for pos, u in enumerate(ordered):
            parent = None
            if u.parent_id is not None:
                if u.parent_id not in remap:
                    raise TreeError(f"utterance {u.id} replies to unknown id {u.parent_id}")
                parent = remap[u.parent_id]
            meta = dict(u.meta)
            meta.setdefault("source_id", u.id)
            rebuilt.append(replace(u, id=pos, parent_id=parent, meta=meta))
        return cls(rebuilt)

    def depth(self, i: int) -> int:
        """Number of reply edges from utterance ``i`` up to the root."""
        return self._depths[i]

    def is_ancestor(self, j: int, i: int) -> bool:
        """True when utterance ``j`` is a strict ancestor of utterance ``i``."""
        self._check_index(i)
        self._check_index(j)
        if self._depths[j] >= self._depths[i]:
            return False
        node = i
        while self._depths[node] > self._depths[j]:
            node = self.utterances[node].parent_id
        return node == j

    def relation(self, i: int, j: int) -> ThreadRelation:
        """Path relation between utterances ``i`` and ``j``.

        Same-path means one is an ancestor of the other (or i == j); the
        payload is ``depth(i) - depth(j)``.  Everything else is unrelated.
        """
        self._check_index(i)
        self._check_index(j)
        if i == j:
            return ThreadRelation.same_path(0)
        if self.is_ancestor(j, i) or self.is_ancestor(i, j):
            return ThreadRelation.same_path(self._depths[i] - self._depths[j])
        return ThreadRelation.unrelated()

    def ancestor_matrix(self) -> np.ndarray:
        """Boolean [n, n] matrix with entry (i, j) true iff j is a strict ancestor of i."""
        n = len(self)
        out = np.zeros((n, n), dtype=bool)
        for i in range(n):
            node = self.utterances[i].parent_id
            while node is not None:
                out[i, node] = True
                node = self.utterances[node].parent_id
        return out

    def _check_index(self, i: int) -> None:
        if not 0 <= i < len(self.utterances):
            raise IndexError(f"utterance index {i} out of range for tree of size {len(self)}")


def clip(x: int, k: int) -> int:
    """Clamp ``x`` into [-k, k]."""
    if k < 1:
        raise ValueError(f"clip bound must be >= 1, got {k}")
    return max(-k, min(k, x))


def num_relation_buckets(k: int) -> int:
    """Size of the learnable relation table: one off-path bucket plus 2k+1 depth deltas."""
    return 2 * k + 2


def relation_index(tree: ConversationTree, k: int) -> np.ndarray:
    """Integer [n, n] matrix of relation-embedding indices for a tree.

    Bucket 0 holds off-path pairs; buckets 1..2k+1 hold same-path pairs,
    indexed by the clipped depth difference (bucket ``1 + k + clip(delta, k)``).
    """
    n = len(tree)
    anc = tree.ancestor_matrix()
    depths = np.array([tree.depth(i) for i in range(n)])
    same = anc | anc.T | np.eye(n, dtype=bool)
    delta = np.clip(depths[:, None] - depths[None, :], -k, k)
    return np.where(same, 1 + k + delta, 0).astype(np.int64)


ROLE_TEMPLATE = "{participant} of role {role} said: {utterance}"


def apply_role_template(u: Utterance) -> str:
    """Render an utterance with its speaker and role, when a role is known.

    Without a role the text passes through unchanged.
    """
    if u.role is None:
        return u.text
    return ROLE_TEMPLATE.format(participant=u.author or "", role=u.role, utterance=u.text)


def linearize(utterances: Sequence[Utterance]) -> ConversationTree:
    """Chain utterances into a single-path tree (each turn replies to the previous).

    Used for meetings and two-party dialogs whose reply structure is unknown.
    Ids are re-assigned densely; timestamps are kept when already strictly
    increasing and replaced by 0..n-1 otherwise.
    """
    if not utterances:
        raise TreeError("cannot linearize an empty utterance sequence")
    stamps = [u.timestamp for u in utterances]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        stamps = list(range(len(utterances)))
    chained = [
        replace(u, id=pos, parent_id=pos - 1 if pos else None, timestamp=stamps[pos])
        for pos, u in enumerate(utterances)
    ]
    return ConversationTree(chained)

import numpy as np
import pytest

from threadsum.conversation import (
    ConversationTree,
    ThreadRelation,
    TreeError,
    Utterance,
    apply_role_template,
    clip,
    linearize,
    num_relation_buckets,
    relation_index,
)


def u(i, parent, ts, text="x", **kw):
    return Utterance(id=i, author=f"a{i}", text=text, timestamp=ts, parent_id=parent, **kw)


def small_tree():
    # root -> {1 -> 4, 2, 3}
    return ConversationTree([
        u(0, None, 0),
        u(1, 0, 1),
        u(2, 0, 2),
        u(3, 0, 3),
        u(4, 1, 4),
    ])


class TestTreeInvariants:
    def test_depths(self):
        t = small_tree()
        assert [t.depth(i) for i in range(5)] == [0, 1, 1, 1, 2]

    def test_ancestor_is_strict(self):
        t = small_tree()
        assert t.is_ancestor(0, 4)
        assert t.is_ancestor(1, 4)
        assert not t.is_ancestor(4, 4)
        assert not t.is_ancestor(4, 1)
        assert not t.is_ancestor(2, 4)

    def test_relation_same_path_and_off_path(self):
        t = small_tree()
        assert t.relation(4, 1) == ThreadRelation.same_path(1)
        assert t.relation(1, 4) == ThreadRelation.same_path(-1)
        assert t.relation(4, 0) == ThreadRelation.same_path(2)
        assert t.relation(2, 3) == ThreadRelation.unrelated()
        assert t.relation(2, 4) == ThreadRelation.unrelated()

    def test_relation_self_is_same_path_zero(self):
        t = small_tree()
        assert t.relation(3, 3) == ThreadRelation.same_path(0)

    def test_relation_flip_symmetry(self):
        t = small_tree()
        for i in range(5):
            for j in range(5):
                assert t.relation(i, j) == t.relation(j, i).flipped()

    def test_ancestor_matrix_matches_pointwise(self):
        t = small_tree()
        m = t.ancestor_matrix()
        assert m.dtype == bool and m.shape == (5, 5)
        for i in range(5):
            for j in range(5):
                assert m[i, j] == t.is_ancestor(j, i)

    def test_rejects_nonzero_root(self):
        with pytest.raises(TreeError):
            ConversationTree([u(1, None, 0)])

    def test_rejects_root_with_parent(self):
        with pytest.raises(TreeError):
            ConversationTree([u(0, 0, 0)])

    def test_rejects_second_root(self):
        with pytest.raises(TreeError):
            ConversationTree([u(0, None, 0), u(1, None, 1)])

    def test_rejects_child_before_parent(self):
        with pytest.raises(TreeError):
            ConversationTree([u(0, None, 0), u(1, 2, 1), u(2, 0, 2)])

    def test_rejects_nonmonotone_timestamps(self):
        with pytest.raises(TreeError):
            ConversationTree([u(0, None, 5), u(1, 0, 3)])

    def test_rejects_gap_in_ids(self):
        with pytest.raises(TreeError):
            ConversationTree([u(0, None, 0), u(2, 0, 1)])

    def test_rejects_empty(self):
        with pytest.raises(TreeError):
            ConversationTree([])

    def test_from_records_reindexes(self):
        recs = [
            {"id": "t3_x", "parent_id": None, "author": "op", "text": "hi", "timestamp": 10},
            {"id": "c9", "parent_id": "t3_x", "author": "r", "text": "yo", "timestamp": 20},
        ]
        t = ConversationTree.from_records(recs)
        assert [x.id for x in t.utterances] == [0, 1]
        assert t.utterances[1].parent_id == 0
        assert t.utterances[0].meta["source_id"] == "t3_x"


class TestRelationBuckets:
    def test_bucket_count_formula(self):
        assert num_relation_buckets(9) == 20
        assert num_relation_buckets(3) == 8
        assert num_relation_buckets(1) == 4

    def test_clip_clamps_both_sides(self):
        assert clip(5, 3) == 3
        assert clip(-5, 3) == -3
        assert clip(2, 3) == 2
        assert clip(0, 3) == 0
        with pytest.raises(ValueError):
            clip(1, 0)

    def test_relation_index_small_tree(self):
        t = small_tree()
        k = 3
        idx = relation_index(t, k)
        # bucket layout: 0 = off-path, 1 + k + clip(delta, k) otherwise
        assert idx[4, 1] == 1 + k + 1
        assert idx[1, 4] == 1 + k - 1
        assert idx[4, 0] == 1 + k + 2
        assert idx[2, 2] == 1 + k
        assert idx[2, 3] == 0
        assert idx[3, 2] == 0

    def test_relation_index_clips_deep_chains(self):
        utts = [u(0, None, 0)] + [u(i, i - 1, i) for i in range(1, 8)]
        t = ConversationTree(utts)
        idx = relation_index(t, 3)
        assert idx[7, 0] == 1 + 3 + 3  # depth gap 7 clipped to 3
        assert idx[0, 7] == 1 + 3 - 3
        assert idx.max() < num_relation_buckets(3)

    def test_random_trees_depth_and_antisymmetry(self):
        rng = np.random.default_rng(20260815)
        for _ in range(20):
            n = int(rng.integers(2, 64))
            utts = [u(0, None, 0)]
            for i in range(1, n):
                utts.append(u(i, int(rng.integers(0, i)), i))
            t = ConversationTree(utts)
            for i in range(1, n):
                assert t.depth(i) == t.depth(utts[i].parent_id) + 1
            m = t.ancestor_matrix()
            assert not np.any(m & m.T)  # strict ancestry cannot hold both ways
            assert not np.any(np.diag(m))


class TestRoleTemplate:
    def test_template_applied_when_role_present(self):
        x = Utterance(id=0, author="alice", text="need the logs", timestamp=0,
                      parent_id=None, role="reporter")
        assert apply_role_template(x) == "alice of role reporter said: need the logs"

    def test_passthrough_without_role(self):
        x = Utterance(id=0, author="alice", text="need the logs", timestamp=0, parent_id=None)
        assert apply_role_template(x) == "need the logs"

    def test_missing_author_renders_empty(self):
        x = Utterance(id=0, author=None, text="t", timestamp=0, parent_id=None, role="x")
        assert apply_role_template(x) == " of role x said: t"


class TestLinearize:
    def test_chain_shape(self):
        t = small_tree()
        lin = linearize(t.utterances)
        assert len(lin.utterances) == 5
        for i in range(5):
            for j in range(5):
                assert lin.relation(i, j) == ThreadRelation.same_path(lin.depth(i) - lin.depth(j))

    def test_keeps_strictly_increasing_timestamps(self):
        utts = [u(0, None, 3), u(1, 0, 7), u(2, 0, 9)]
        lin = linearize(utts)
        assert [x.timestamp for x in lin.utterances] == [3, 7, 9]

    def test_rewrites_tied_timestamps(self):
        utts = [u(0, None, 5), u(1, 0, 5)]
        lin = linearize(utts)
        assert [x.timestamp for x in lin.utterances] == [0, 1]

    def test_empty_rejected(self):
        with pytest.raises(TreeError):
            linearize([])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempo_align import retrieval as rt
from tempo_align.errors import InvalidInputError


def oracle_recall(scores, relevance, k):
    """Full stable sort with relevant items placed after equal-scored
    non-relevant ones."""
    hits = 0
    for q, row in enumerate(scores):
        order = sorted(range(len(row)), key=lambda g: (-row[g], g in relevance[q]))
        first = next(pos for pos, g in enumerate(order) if g in relevance[q])
        hits += first < k
    return hits / len(scores)


def one_to_one(n):
    return rt.GroundTruth([[i] for i in range(n)], n)


class TestRankOfBestTarget:
    @pytest.mark.parametrize("scores, rel, rank", [
        ([0.9, 0.1, 0.5], {0}, 1), ([0.5, 0.5, 0.5], {2}, 3), ([0.2, 0.8, 0.6], {0, 2}, 2)])
    def test_examples(self, scores, rel, rank):
        assert rt.rank_of_best_target(scores, rel) == rank

    def test_empty_relevant(self):
        with pytest.raises(InvalidInputError):
            rt.rank_of_best_target([0.1, 0.2], set())


class TestRecall:
    def test_identity(self):
        assert rt.recall_at_k(one_to_one(5), np.eye(5), 1) == 1.0

    def test_anti_diagonal(self):
        gt = rt.GroundTruth([[9 - i] for i in range(10)], 10)
        assert rt.recall_at_k(gt, np.fliplr(np.eye(10)), 1) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            rt.recall_at_k(one_to_one(3), np.eye(4), 1)

    def test_degenerate_scores_are_pessimistic(self):
        assert rt.recall_at_k(one_to_one(6), np.zeros((6, 6)), 5) == 0.0
        assert rt.recall_at_k(one_to_one(6), np.zeros((6, 6)), 6) == 1.0

    @settings(max_examples=60)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 20))
    def test_matches_oracle_with_ties(self, seed, k):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 5, size=(20, 20)).astype(float)
        relevance = [set(rng.choice(20, size=rng.integers(1, 4), replace=False).tolist()) for _ in range(20)]
        gt = rt.GroundTruth(relevance, 20)
        assert rt.recall_at_k(gt, scores, k) == oracle_recall(scores, relevance, k)

    @given(st.integers(0, 2**32 - 1))
    def test_invariances(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal((8, 12))
        relevance = [rng.choice(12, size=2, replace=False) for _ in range(8)]
        gt = rt.GroundTruth(relevance, 12)
        base = [rt.recall_at_k(gt, scores, k) for k in range(1, 13)]
        assert all(b >= a for a, b in zip(base, base[1:])) and base[-1] == 1.0
        assert [rt.recall_at_k(gt, np.exp(3 * scores), k) for k in range(1, 13)] == base
        perm = rng.permutation(12)
        inv = np.argsort(perm)
        gt_p = rt.GroundTruth([[inv[g] for g in r] for r in relevance], 12)
        assert [rt.recall_at_k(gt_p, scores[:, perm], k) for k in range(1, 13)] == base

    @given(st.integers(0, 2**32 - 1))
    def test_duplicating_a_distractor_never_helps(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 4, size=(6, 6)).astype(float)
        gt = one_to_one(6)
        dup = int(rng.integers(6))
        bigger = np.concatenate([scores, scores[:, dup:dup + 1]], axis=1)
        gt2 = rt.GroundTruth([[i] for i in range(6)], 7)
        for k in range(1, 7):
            assert rt.recall_at_k(gt2, bigger, k) <= rt.recall_at_k(gt, scores, k)


class TestEvalAudioText:
    def test_captions_equal_audio(self):
        audio = np.eye(4, 8)
        caps = np.repeat(audio[:, None, :], 5, axis=1)
        t2a, a2t = rt.eval_audio_text(audio, caps)
        assert t2a.metrics[1] == a2t.metrics[1] == 1.0
        assert t2a.n_queries == 20 and a2t.n_queries == 4
        assert t2a.direction == "T->A" and a2t.direction == "A->T"

    def test_swapped_caption_set(self):
        # clip 0's captions point at clip 1 and vice versa, except caption 0 of clip 0
        audio = np.eye(2)
        caps = np.zeros((2, 5, 2))
        caps[0, :] = [0.0, 1.0]
        caps[1, :] = [1.0, 0.0]
        caps[0, 0] = [1.0, 0.0]
        t2a, a2t = rt.eval_audio_text(audio, caps, ks=(1, 5, 10))
        # T->A: only caption (0, 0) retrieves its clip
        assert t2a.metrics[1] == pytest.approx(1 / 10)
        # A->T: each clip's best own caption ties or trails five foreign ones, rank 6
        assert a2t.metrics == {1: 0.0, 5: 0.0, 10: 1.0}

    def test_caption_count_mismatch(self):
        with pytest.raises(InvalidInputError):
            rt.eval_audio_text(np.eye(3), np.zeros((3, 4, 3)))


class TestEvalAudioImage:
    def test_self_gallery(self):
        x = np.random.default_rng(0).standard_normal((7, 5))
        a2i, i2a = rt.eval_audio_image(x, x, ks=(1, 7))
        assert a2i.metrics == {1: 1.0, 7: 1.0} and i2a.metrics[1] == 1.0

    def test_multiframe_matches_oracle(self):
        from tempo_align.pairing import multiframe_sim
        rng = np.random.default_rng(1)
        a, i = rng.standard_normal((9, 4, 3)), rng.standard_normal((9, 4, 3))
        a2i, _ = rt.eval_audio_image(a, i, mode="multiframe", ks=(1, 5))
        scores = np.array([[multiframe_sim(a[q], i[g]) for g in range(9)] for q in range(9)])
        for k in (1, 5):
            assert a2i.metrics[k] == oracle_recall(scores, [{q} for q in range(9)], k)

    def test_mode_mismatch(self):
        with pytest.raises(InvalidInputError):
            rt.eval_audio_image(np.zeros((3, 4, 2)), np.zeros((3, 4, 2)), mode="single")
        with pytest.raises(InvalidInputError):
            rt.eval_audio_image(np.zeros((3, 2)), np.zeros((3, 2)), mode="softmax")


class TestReporting:
    def test_aggregate_and_table(self, tmp_path):
        reps = [rt.RetrievalReport("A->I", {1: v, 5: 1.0}, 10, seed=s) for s, v in enumerate([0.1, 0.3])]
        agg = rt.aggregate(reps)
        assert agg[1] == pytest.approx((0.2, 0.1))
        table = rt.format_table({"Random Match": {"A->I": reps}}, ["A->I"])
        assert "20.00 ± 10.00" in table and "A->I R@5" in table
        rt.dump_reports(tmp_path / "r.json", reps)
        assert (tmp_path / "r.json").read_text().count('"recall"') == 4

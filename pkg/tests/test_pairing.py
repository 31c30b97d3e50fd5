import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tempo_align import encoders as enc
from tempo_align import pairing as pr
from tempo_align.errors import InvalidInputError
from tempo_align.objective import LogitScale, cosine_sim, info_nce


def frames_with_sims(sims):
    """Unit frames whose cosine with e0 equals ``sims``."""
    out = []
    for s in sims:
        out.append([s, np.sqrt(1 - s * s), 0.0])
    return pr.FrameSet(np.array(out))


A0 = np.array([1.0, 0.0, 0.0])


class TestStrategyParsing:
    @pytest.mark.parametrize("text, kind, n", [
        ("random", "random", 0), ("nearest:15", "nearest", 15), ("multiframe", "multiframe", 0)])
    def test_roundtrip(self, text, kind, n):
        s = pr.PairingStrategy.parse(text)
        assert (s.kind, s.n) == (kind, n) and str(s) == text

    @pytest.mark.parametrize("text", ["nearest:-1", "random:3", "softmax", ""])
    def test_rejects(self, text):
        with pytest.raises(InvalidInputError):
            pr.PairingStrategy.parse(text)


class TestRandomMatch:
    def test_single_frame(self):
        rng = np.random.default_rng(0)
        fs = pr.FrameSet(np.ones((1, 3)))
        assert all(pr.random_match(fs, rng) == 0 for _ in range(100))

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(1)
        fs = pr.FrameSet(np.ones((4, 3)))
        counts = np.bincount([pr.random_match(fs, rng) for _ in range(100_000)], minlength=4)
        assert np.all(np.abs(counts / 1e5 - 0.25) < 0.015)

    def test_replay(self):
        fs = pr.FrameSet(np.ones((4, 3)))
        a = [pr.random_match(fs, pr.clip_rng(3, 2, i)) for i in range(50)]
        b = [pr.random_match(fs, pr.clip_rng(3, 2, i)) for i in range(50)]
        assert a == b

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            pr.FrameSet(np.zeros((0, 3)))


class TestNearestMatch:
    def test_argmax_example(self):
        fs = frames_with_sims([0.1, 0.9, 0.3, 0.5])
        assert pr.nearest_match(A0, fs, 20, 15, np.random.default_rng(0)) == 1

    def test_tie_goes_to_lowest_index(self):
        fs = pr.FrameSet(np.tile([0.3, 0.4, 0.5], (4, 1)))
        assert pr.nearest_match(A0, fs, 5, 5, np.random.default_rng(0)) == 0

    def test_gate_closed_is_uniform(self):
        fs = frames_with_sims([0.1, 0.9, 0.3, 0.5])
        picks = [pr.nearest_match(A0, fs, 3, 5, pr.clip_rng(0, 3, i)) for i in range(20_000)]
        freq = np.bincount(picks, minlength=4) / len(picks)
        assert np.all(np.abs(freq - 0.25) < 0.015)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.floats(0.01, 100))
    def test_brute_force_and_scale_invariance(self, seed, L, c):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal(5)
        frames = rng.standard_normal((L, 5))
        brute = max(range(L), key=lambda l: (cosine_sim(a, frames[l]), -l))
        assert pr.nearest_match(a, pr.FrameSet(frames), 1, 1, rng) == brute
        assert pr.nearest_match(a, pr.FrameSet(c * frames), 1, 1, rng) == brute


class TestMultiframeSim:
    def test_examples(self):
        blk = np.random.default_rng(0).standard_normal((4, 3))
        assert pr.multiframe_sim(blk, blk) == pytest.approx(1.0, abs=1e-8)
        assert pr.multiframe_sim([[1, 0, 0], [2, 0, 0]], [[0, 1, 0], [0, 0, 3]]) == pytest.approx(0.0, abs=1e-8)
        assert pr.multiframe_sim([[1, 0], [0, 1]], [[1, 0], [1, 0]]) == pytest.approx(0.5, abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            pr.multiframe_sim(np.ones((2, 3)), np.ones((3, 2)))

    @given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, seed, c1, c2):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        s = pr.multiframe_sim(a, b)
        assert s == pytest.approx(pr.multiframe_sim(b, a), abs=1e-12)
        assert s == pytest.approx(pr.multiframe_sim(c1 * a, c2 * b), abs=1e-12)


SPEC = enc.TokenGridSpec((64, 32), (32, 32), (16, 24))


@pytest.fixture(scope="module")
def tiny():
    params = enc.init_encoder(SPEC, 0, width=16, depth=1, dim=8)
    feats = torch.randn(5, 64, 32, generator=torch.Generator().manual_seed(0))
    ids = [f"c{i}" for i in range(5)]
    return params, feats, ids


class TestBuildBatchSims:
    def test_single_clip(self, tiny):
        params, feats, ids = tiny
        frames = np.random.default_rng(0).standard_normal((1, 4, 8))
        bs = pr.build_batch_sims(pr.PairingStrategy("random"), feats[:1], ids[:1], [0], params,
                                 frames, 0, 0, LogitScale())
        assert bs.sims.shape == (1, 1) and info_nce(bs.sims) == 0.0

    def test_nearest_with_self_frames_puts_max_on_diagonal(self, tiny):
        params, feats, ids = tiny
        audio = enc.encode_matrix(feats, params).detach().numpy().astype(float)
        rng = np.random.default_rng(1)
        frames = rng.standard_normal((5, 4, 8))
        slot = rng.integers(4, size=5)
        frames[np.arange(5), slot] = audio
        bs = pr.build_batch_sims(pr.PairingStrategy("nearest", 0), feats, ids, range(5), params,
                                 frames, 3, 0, LogitScale(0.0))
        assert [r["chosen_index"] for r in bs.records] == list(slot)
        assert np.all(np.diag(bs.sims) >= bs.sims.max(axis=1) - 1e-6)

    def test_multiframe_self_blocks(self, tiny):
        params, feats, ids = tiny
        segs = enc.encode_segments(feats, 2, params).detach().numpy().astype(float)
        scale = LogitScale(1.0)
        bs = pr.build_batch_sims(pr.PairingStrategy("multiframe"), feats, ids, range(5), params,
                                 segs, 0, 0, scale)
        np.testing.assert_allclose(np.diag(bs.sims), scale.value, rtol=1e-6)
        off = bs.sims - np.diag(np.full(5, np.inf))
        assert np.all(np.diag(bs.sims)[:, None] > off)
        assert bs.audio.shape == (5, 16)
        assert all(r["chosen_index"] is None and len(r["similarities"]) == 2 for r in bs.records)

    def test_non_selected_frames_do_not_matter(self, tiny):
        params, feats, ids = tiny
        frames = np.random.default_rng(2).standard_normal((5, 4, 8))
        strat = pr.PairingStrategy("random")
        a = pr.build_batch_sims(strat, feats, ids, range(5), params, frames, 2, 7, LogitScale())
        chosen = [r["chosen_index"] for r in a.records]
        other = frames.copy()
        for b, c in enumerate(chosen):
            for l in range(4):
                if l != c:
                    other[b, l] = np.random.default_rng(b * 10 + l).standard_normal(8)
        b_ = pr.build_batch_sims(strat, feats, ids, range(5), params, other, 2, 7, LogitScale())
        np.testing.assert_array_equal(a.sims, b_.sims)
        np.testing.assert_array_equal(a.targets, b_.targets)

    def test_selection_independent_of_batch_composition(self, tiny):
        params, feats, ids = tiny
        frames = np.random.default_rng(3).standard_normal((5, 4, 8))
        strat = pr.PairingStrategy("random")
        whole = pr.build_batch_sims(strat, feats, ids, range(5), params, frames, 1, 0, LogitScale())
        parts = [pr.build_batch_sims(strat, feats[i:i + 1], ids[i:i + 1], [i], params,
                                     frames[i:i + 1], 1, 0, LogitScale()) for i in range(5)]
        assert [r["chosen_index"] for r in whole.records] == [p.records[0]["chosen_index"] for p in parts]

    def test_audit_records(self, tiny, tmp_path):
        params, feats, ids = tiny
        frames = np.random.default_rng(4).standard_normal((5, 4, 8))
        bs = pr.build_batch_sims(pr.PairingStrategy("nearest", 2), feats, ids, range(5), params,
                                 frames, 4, 0, LogitScale())
        path = tmp_path / "audit.jsonl"
        with open(path, "w") as fh:
            pr.write_audit(fh, bs.records)
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        assert recs[0].keys() == {"clip_id", "epoch", "strategy", "chosen_index", "similarities"}
        assert recs[0]["strategy"] == "nearest:2" and len(recs[0]["similarities"]) == 4

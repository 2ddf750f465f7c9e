import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hgan.align import LossConfig, hierarchical_similarity
from hgan.evalkit import (
    DataError,
    embed_dataset,
    evaluate,
    recall_report,
    recall_report_bruteforce,
    similarity_matrix,
    word_similarity,
    word_similarity_csv,
)
from hgan.model import HGANModel, ModelConfig


def groups(n_img, per=5):
    return np.repeat(np.arange(n_img), per)


@pytest.fixture(scope="module")
def model():
    return HGANModel(ModelConfig(D0=8, D1=6, D=8, heads=2, layers=1, d_p=4, gru_hidden=3), seed=4)


class TestRecall:
    def test_perfect_ranking(self):
        S = np.kron(np.eye(4), np.ones((1, 5)))
        r = recall_report(S, groups(4))
        assert r.metrics() == dict(i2t_r1=100.0, i2t_r5=100.0, i2t_r10=100.0,
                                   t2i_r1=100.0, t2i_r5=100.0, t2i_r10=100.0, rsum=600.0)

    def test_third_place_everywhere(self):
        # 12 images x 12 captions, one caption per image; the match sits at rank 2 in both directions
        n = 12
        S = np.zeros((n, n))
        for a in range(n):
            S[a, a] = 0.5
            S[a, (a + 1) % n] = S[a, (a + 2) % n] = 1.0
        r = recall_report(S, np.arange(n))
        assert np.all(r.i2t_ranks == 2)
        assert (r.i2t_r1, r.i2t_r5, r.i2t_r10) == (0.0, 100.0, 100.0)
        assert np.all(r.t2i_ranks == 2)
        assert (r.t2i_r1, r.t2i_r5, r.t2i_r10) == (0.0, 100.0, 100.0)

    def test_ties_go_to_lower_index(self):
        S = np.ones((2, 2))
        r = recall_report(S, np.array([0, 1]))
        np.testing.assert_array_equal(r.i2t_ranks, [0, 1])
        np.testing.assert_array_equal(r.t2i_ranks, [0, 1])

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.integers(2, 20), st.booleans())
    def test_matches_python_sort_oracle(self, seed, n_img, quantize):
        rng = np.random.default_rng(seed)
        S = rng.standard_normal((n_img, 5 * n_img))
        if quantize:
            S = np.round(S, 1)  # force many ties
        cap = groups(n_img)
        r = recall_report(S, cap)
        vals, i2t, t2i = oracles.recall_by_sorting(S, cap)
        np.testing.assert_array_equal(r.i2t_ranks, i2t)
        np.testing.assert_array_equal(r.t2i_ranks, t2i)
        assert list(r.metrics().values())[:6] == vals

    def test_bruteforce_agrees(self, rng):
        S = rng.standard_normal((20, 100))
        a, b = recall_report(S, groups(20)), recall_report_bruteforce(S, groups(20))
        assert a.metrics() == b.metrics()

    def test_rank_invariance_under_monotone_map(self, rng):
        S = rng.standard_normal((10, 50))
        a, b = recall_report(S, groups(10)), recall_report(np.exp(3 * S) + 7, groups(10))
        assert a.metrics() == b.metrics()

    def test_monotone_and_rsum(self, rng):
        r = recall_report(rng.standard_normal((30, 150)), groups(30))
        assert r.i2t_r1 <= r.i2t_r5 <= r.i2t_r10 and r.t2i_r1 <= r.t2i_r5 <= r.t2i_r10
        assert r.rsum == pytest.approx(sum(list(r.metrics().values())[:6]))
        assert all(0 <= v <= 100 for v in list(r.metrics().values())[:6])

    def test_orphan_caption(self):
        with pytest.raises(DataError):
            recall_report(np.zeros((2, 3)), np.array([0, 1, 5]))

    def test_label_count_mismatch(self):
        with pytest.raises(DataError):
            recall_report(np.zeros((2, 3)), np.array([0, 1]))

    def test_serialization(self, rng):
        r = recall_report(rng.standard_normal((3, 15)), groups(3))
        doc = json.loads(r.to_json())
        assert doc["rsum"] == r.rsum and len(doc["t2i_ranks"]) == 15
        header, row = r.to_csv().splitlines()
        assert header.split(",")[-1] == "rsum" and len(row.split(",")) == 7


class TestSimilarityMatrix:
    def test_matches_per_pair_recomputation(self, model, small):
        sub = small.subset_groups(small.group_ids[:5])
        S = similarity_matrix(model, sub, LossConfig())
        assert S.shape == (5, 25)
        img, txt = embed_dataset(model, sub)
        for a in range(5):
            for c in range(25):
                ref = hierarchical_similarity(
                    img["local"][a][None], img["unified"][a][None], img["pooled"][a],
                    txt["tokens"][c][None], txt["pooled"][c],
                )
                assert S[a, c] == pytest.approx(ref.total, abs=1e-12)

    def test_single_pair_direct(self, model, small):
        one = small.subset_groups(small.group_ids[:1])
        S = similarity_matrix(model, one, LossConfig())
        s = one.sample(0)
        imgs = model.encode_images([s.global_grid], [s.regions], mode="eval")
        txt = model.encode_texts([s.tokens], mode="eval")
        ref = hierarchical_similarity(imgs["local"].value, imgs["unified"].value, imgs["pooled"].value[0],
                                      txt["tokens"].value, txt["pooled"].value[0])
        assert S[0, 0] == pytest.approx(ref.total, abs=1e-12)

    def test_embeddings_do_not_depend_on_chunking(self, model, small):
        a, _ = embed_dataset(model, small, chunk=2)
        b, _ = embed_dataset(model, small, chunk=100)
        np.testing.assert_allclose(a["pooled"], b["pooled"], atol=1e-12)

    def test_ablation_is_s3_only(self, model, small):
        full = similarity_matrix(model, small, LossConfig())
        s3 = similarity_matrix(model, small, LossConfig(enable_s1=False, enable_s2=False))
        assert np.all(np.abs(s3) <= 1 + 1e-12)
        assert not np.allclose(full, s3)

    def test_fold_average(self, model, small):
        folds = [small.group_ids[:3], small.group_ids[3:]]
        r = evaluate(model, small, LossConfig(), folds)
        parts = [evaluate(model, small.subset_groups(f), LossConfig()) for f in folds]
        assert r.i2t_r1 == pytest.approx(np.mean([p.i2t_r1 for p in parts]))
        assert r.rsum == pytest.approx(sum(list(r.metrics().values())[:6]))


class TestWordSimilarity:
    def test_single_token(self, model, small):
        s = small.sample(0)
        np.testing.assert_array_equal(word_similarity(model, s.global_grid, s.regions, s.tokens[:1]), [1.0])

    def test_duplicate_tokens_equal(self, model, small):
        s = small.sample(0)
        w = word_similarity(model, s.global_grid, s.regions, np.tile(s.tokens[0], (3, 1)))
        np.testing.assert_allclose(w, 1 / 3, atol=1e-15)

    def test_sums_to_one(self, model, small):
        for c in range(small.n_captions):
            s = small.sample(c)
            assert word_similarity(model, s.global_grid, s.regions, s.tokens).sum() == pytest.approx(1.0, abs=1e-9)

    def test_csv(self):
        text = word_similarity_csv(np.array([0.25, 0.75]), ["a", "dog"])
        assert text == "token,similarity\na,0.25000000\ndog,0.75000000\n"

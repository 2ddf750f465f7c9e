import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgan import numgrad as ng
from hgan.graph import (
    ConfigError,
    ProjectionParams,
    build_image_batch,
    build_image_graph,
    build_text_batch,
    build_text_graph,
    edge_weight,
    pad_rows,
)
from hgan.ingest import RawFeatureSet


@pytest.fixture
def params():
    return ProjectionParams.init(D0=5, D1=3, D=8, rng=np.random.default_rng(0))


def raw(rng, m=4, k=3, l=2, D0=5, D1=3):  # noqa: E741
    return RawFeatureSet(rng.standard_normal((m, D0)), rng.standard_normal((k, D0)), rng.standard_normal((l, D1)))


class TestImageGraph:
    def test_node_count(self, params, rng):
        g = build_image_graph(raw(rng), params)
        assert g.nodes.shape == (7, 8)
        assert (g.global_count, g.local_count, g.modality) == (4, 3, "image")

    def test_global_only_equals_projection(self, params, rng):
        r = raw(rng)
        g = build_image_graph(r, params, use_local=False)
        np.testing.assert_array_equal(g.nodes.value, r.global_grid @ params.w_g.value.T + params.b_g.value)
        assert g.local is None

    def test_zero_features_give_biases(self, params):
        params.b_g.value = np.arange(8.0)
        params.b_l.value = -np.arange(8.0)
        g = build_image_graph(RawFeatureSet(np.zeros((2, 5)), np.zeros((3, 5)), np.zeros((1, 3))), params)
        np.testing.assert_array_equal(g.nodes.value[:2], np.tile(np.arange(8.0), (2, 1)))
        np.testing.assert_array_equal(g.nodes.value[2:], np.tile(-np.arange(8.0), (3, 1)))

    def test_both_flags_false(self, params, rng):
        with pytest.raises(ConfigError):
            build_image_graph(raw(rng), params, use_global=False, use_local=False)

    def test_partial_graphs_concatenate_to_full(self, params, rng):
        r = raw(rng)
        full = build_image_graph(r, params).nodes.value
        g = build_image_graph(r, params, use_local=False).nodes.value
        loc = build_image_graph(r, params, use_global=False).nodes.value
        np.testing.assert_array_equal(np.concatenate([g, loc]), full)

    def test_region_permutation_moves_local_rows_only(self, params, rng):
        r = raw(rng)
        perm = np.array([2, 0, 1])
        base = build_image_graph(r, params).nodes.value
        moved = build_image_graph(RawFeatureSet(r.global_grid, r.regions[perm], r.tokens), params).nodes.value
        np.testing.assert_array_equal(moved[:4], base[:4])
        np.testing.assert_array_equal(moved[4:], base[4:][perm])


class TestTextGraph:
    def test_single_token(self, params, rng):
        g = build_text_graph(raw(rng, l=1), params)
        assert g.size == 1 and g.global_count == 0 and g.local_count == 1

    def test_duplicate_tokens_identical_rows(self, params):
        tok = np.array([[0.3, -1.0, 2.0]] * 2)
        g = build_text_graph(RawFeatureSet(np.zeros((1, 5)), np.zeros((1, 5)), tok), params)
        np.testing.assert_array_equal(g.nodes.value[0], g.nodes.value[1])

    def test_matches_manual_product(self):
        rng = np.random.default_rng(5)
        p = ProjectionParams.init(D0=2, D1=6, D=8, rng=rng)
        p.b_s.value = rng.standard_normal(8)
        S = rng.standard_normal((4, 6))
        g = build_text_graph(RawFeatureSet(np.zeros((1, 2)), np.zeros((1, 2)), S), p)
        W, b = p.w_s.value, p.b_s.value
        expected = [[sum(W[r, c] * S[i, c] for c in range(6)) + b[r] for r in range(8)] for i in range(4)]
        np.testing.assert_allclose(g.nodes.value, expected, atol=1e-12)


class TestEdgeWeight:
    def _graph(self, rows):
        from hgan.graph import FeatureGraph

        return FeatureGraph(ng.DiffValue(np.array(rows, dtype=float)), "text", 0, len(rows))

    def test_hand_example(self):
        np.testing.assert_array_equal(edge_weight(self._graph([[1, 2], [3, 4]]), 0, 1), [3.0, 8.0])

    def test_self_loop_squares(self):
        g = self._graph([[1.5, -2.0]])
        np.testing.assert_array_equal(edge_weight(g, 0, 0), [2.25, 4.0])

    @given(st.integers(0, 10_000), st.integers(0, 4), st.integers(0, 4))
    def test_symmetric(self, seed, i, j):
        g = self._graph(np.random.default_rng(seed).standard_normal((5, 3)))
        np.testing.assert_array_equal(edge_weight(g, i, j), edge_weight(g, j, i))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            edge_weight(self._graph([[1.0, 2.0]]), 0, 1)


class TestBatching:
    def test_pad_rows(self):
        out, mask = pad_rows([np.ones((1, 2)), np.ones((3, 2))])
        assert out.shape == (2, 3, 2)
        np.testing.assert_array_equal(mask, [[True, False, False], [True, True, True]])
        np.testing.assert_array_equal(out[0, 1:], 0.0)

    def test_batched_rows_match_single_graphs(self, params, rng):
        raws = [raw(rng, m=2, k=k, l=l) for k, l in ((1, 3), (3, 1))]
        img = build_image_batch([r.global_grid for r in raws], [r.regions for r in raws], params)
        txt = build_text_batch([r.tokens for r in raws], params)
        for b, r in enumerate(raws):
            single = build_image_graph(r, params).nodes.value
            np.testing.assert_allclose(img.nodes.value[b][img.mask[b]], single, atol=1e-12)
            np.testing.assert_array_equal(img.nodes.value[b][~img.mask[b]], 0.0)
            np.testing.assert_allclose(txt.nodes.value[b][txt.mask[b]], build_text_graph(r, params).nodes.value, atol=1e-12)

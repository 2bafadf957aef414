import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain, random_tree
from oracles import gr_attention_oracle, kog_attention_oracle, plain_mha

from kogt import tensor as T
from kogt.attention import GrMsa, KogMsa
from kogt.errors import ConfigError, ShapeError
from kogt.gradcheck import check_gr_msa, check_kog_msa
from kogt.graph import (OrderMaskSet, RelativeIndexMap, build_order_masks, build_relative_index_map,
                        build_signed_distance)

F64 = np.float64


def gr_layer(rng, d, heads, delta=2, directed=True):
    return GrMsa(d, heads, delta, directed, rng, dtype=F64)


def index_map(graph, delta=2, directed=True):
    return build_relative_index_map(build_signed_distance(graph), delta, directed)


# ---------------------------------------------------------------- GR-MSA


def test_zero_tables_reduce_to_plain_attention():
    rng = np.random.default_rng(0)
    for _ in range(20):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 5))
        l = int(rng.integers(1, 10))
        g = random_tree(rng, l)
        layer = gr_layer(rng, d, heads, int(rng.integers(1, 4)), bool(rng.integers(0, 2)))
        layer.pos_k.data[...] = 0
        layer.pos_v.data[...] = 0
        x = rng.normal(size=(l, d))
        out = layer(T.Tensor(x), index_map(g, layer._delta, layer._directed)).data
        ref = plain_mha(x, layer.w_q.data, layer.w_k.data, layer.w_v.data, heads)
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)


def test_single_node_output_is_value_plus_centre_vector():
    rng = np.random.default_rng(1)
    layer = gr_layer(rng, 4, 2, delta=3)
    x = rng.normal(size=(1, 4))
    out = layer(T.Tensor(x), index_map(chain(1), 3)).data
    np.testing.assert_allclose(out, x @ layer.w_v.data + layer.pos_v.data[3], atol=1e-14)


def test_chain_hand_example():
    layer = gr_layer(np.random.default_rng(0), 2, 1, delta=1)
    layer.w_q.data = np.array([[1.0, 0.0], [0.0, 1.0]])
    layer.w_k.data = np.array([[0.5, 0.0], [0.0, -1.0]])
    layer.w_v.data = np.array([[1.0, 2.0], [0.0, 1.0]])
    layer.pos_k.data = np.array([[0.1, 0.0], [0.0, 0.0], [0.0, 0.2]])
    layer.pos_v.data = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, -1.0]])
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    idx = index_map(chain(3), 1)
    # index matrix: 1 on the diagonal, 0 towards larger labels, 2 towards smaller
    np.testing.assert_array_equal(idx.indices, [[1, 0, 0], [2, 1, 0], [2, 2, 1]])
    q, k, v = x @ layer.w_q.data, x @ layer.w_k.data, x @ layer.w_v.data
    out = np.zeros((3, 2))
    for m in range(3):
        s = np.array([q[m] @ (k[n] + layer.pos_k.data[idx.indices[m, n]]) for n in range(3)]) / np.sqrt(2)
        a = np.exp(s) / np.exp(s).sum()
        out[m] = sum(a[n] * (v[n] + layer.pos_v.data[idx.indices[m, n]]) for n in range(3))
    np.testing.assert_allclose(layer(T.Tensor(x), idx).data, out, atol=1e-14)


@given(st.integers(1, 8), st.sampled_from([(2, 1), (4, 2), (6, 3), (8, 2)]), st.integers(1, 4),
       st.booleans(), st.integers(0, 2**31 - 1))
def test_gr_msa_matches_pairwise_oracle(l, dh, delta, directed, seed):
    d, heads = dh
    rng = np.random.default_rng(seed)
    layer = gr_layer(rng, d, heads, delta, directed)
    idx = index_map(random_tree(rng, l), delta, directed)
    x = rng.normal(size=(2, l, d))
    out = layer(T.Tensor(x), idx).data
    for b in range(2):
        ref = gr_attention_oracle(x[b], layer.w_q.data, layer.w_k.data, layer.w_v.data,
                                  layer.pos_k.data, layer.pos_v.data, idx.indices, heads)
        np.testing.assert_allclose(out[b], ref, atol=1e-12)


def test_gr_msa_checks_index_map():
    layer = gr_layer(np.random.default_rng(0), 4, 2, delta=2)
    with pytest.raises(ShapeError):
        layer(T.Tensor(np.zeros((4, 4))), index_map(chain(3), 2))
    with pytest.raises(ShapeError):
        layer(T.Tensor(np.zeros((3, 4))), index_map(chain(3), 3))
    with pytest.raises(ConfigError):
        GrMsa(6, 4, 2, True, np.random.default_rng(0))


# ---------------------------------------------------------------- KOG-MSA


def kog_layer(rng, d, heads, K):
    return KogMsa(d, heads, K, rng, dtype=F64)


def test_order_zero_identity_returns_values():
    rng = np.random.default_rng(2)
    layer = kog_layer(rng, 6, 3, 0)
    layer.w_orders.data[0] = np.eye(6)
    layer.c.data[:] = 1.0
    x = rng.normal(size=(7, 6))
    out = layer(T.Tensor(x), build_order_masks(random_tree(rng, 7), 0)).data
    np.testing.assert_array_equal(out, T.matmul(T.Tensor(x), layer.w_v).data)


def test_empty_neighbour_set_gives_zero_rows():
    rng = np.random.default_rng(3)
    layer = kog_layer(rng, 4, 2, 3)
    masks = build_order_masks(chain(3), 3)
    f = layer.order_features(T.Tensor(rng.normal(size=(3, 4))), masks).data
    assert (f[3] == 0).all()          # no node has a third-order neighbour
    assert (f[2, 0, 1] == 0).all()    # the middle node has no second-order neighbour
    assert (f[2, 0, 0] != 0).any()


def test_chain_brute_force_example():
    rng = np.random.default_rng(4)
    layer = kog_layer(rng, 2, 1, 2)
    layer.c.data[:] = [0.5, -1.0, 2.0]
    x = np.array([[1.0, -1.0], [0.5, 2.0], [-0.3, 0.7]])
    out = layer(T.Tensor(x), build_order_masks(chain(3), 2)).data
    dist = np.abs(build_signed_distance(chain(3)).entries)
    ref = kog_attention_oracle(x, layer.w_q.data, layer.w_k.data, layer.w_v.data,
                               layer.w_orders.data, layer.c.data, dist, 2, 1)
    np.testing.assert_allclose(out, ref, atol=1e-14)


@given(st.integers(1, 9), st.sampled_from([(2, 1), (4, 2), (8, 4), (6, 2)]), st.integers(0, 5),
       st.integers(0, 2**31 - 1))
def test_kog_msa_matches_brute_force(l, dh, K, seed):
    d, heads = dh
    rng = np.random.default_rng(seed)
    layer = kog_layer(rng, d, heads, K)
    layer.c.data = rng.normal(size=K + 1)
    g = random_tree(rng, l)
    dist = np.abs(build_signed_distance(g).entries)
    x = rng.normal(size=(2, l, d))
    out = layer(T.Tensor(x), build_order_masks(g, K)).data
    for b in range(2):
        ref = kog_attention_oracle(x[b], layer.w_q.data, layer.w_k.data, layer.w_v.data,
                                   layer.w_orders.data, layer.c.data, dist, K, heads)
        np.testing.assert_allclose(out[b], ref, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_kog_msa_is_linear_in_fusion_weights(seed):
    rng = np.random.default_rng(seed)
    layer = kog_layer(rng, 4, 2, 3)
    layer.c.data = rng.normal(size=4)
    masks = build_order_masks(random_tree(rng, 6), 3)
    x = T.Tensor(rng.normal(size=(6, 4)))
    out = layer(x, masks).data
    feats = layer.order_features(x, masks).data[:, 0]
    np.testing.assert_allclose(out, np.tensordot(layer.c.data, feats, axes=1), atol=1e-12)
    layer.c.data = 2 * layer.c.data
    np.testing.assert_allclose(layer(x, masks).data, 2 * out, atol=1e-12)


def test_fusion_weights_start_uniform():
    layer = KogMsa(8, 2, 4, np.random.default_rng(0))
    np.testing.assert_allclose(layer.c.data, 0.2)


def test_kog_msa_rejects_order_mismatch():
    layer = kog_layer(np.random.default_rng(0), 4, 2, 2)
    with pytest.raises(ConfigError):
        layer(T.Tensor(np.zeros((3, 4))), build_order_masks(chain(3), 3))
    with pytest.raises(ShapeError):
        layer(T.Tensor(np.zeros((4, 4))), build_order_masks(chain(3), 2))


# ---------------------------------------------------------------- shared properties


@given(st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_permutation_consistency(l, seed):
    rng = np.random.default_rng(seed)
    g = random_tree(rng, l)
    perm = rng.permutation(l)            # new row r holds old node perm[r]
    x = rng.normal(size=(l, 4))
    masks = build_order_masks(g, 3)
    idx = index_map(g, 2)
    masks_p = OrderMaskSet(3, masks.allowed[:, perm][:, :, perm])
    idx_p = RelativeIndexMap(2, True, idx.indices[perm][:, perm])
    kog = kog_layer(rng, 4, 2, 3)
    gr = gr_layer(rng, 4, 2, 2)
    np.testing.assert_allclose(kog(T.Tensor(x[perm]), masks_p).data, kog(T.Tensor(x), masks).data[perm],
                               atol=1e-12)
    np.testing.assert_allclose(gr(T.Tensor(x[perm]), idx_p).data, gr(T.Tensor(x), idx).data[perm],
                               atol=1e-12)


def test_eval_mode_deterministic_and_dropout_changes_training():
    rng = np.random.default_rng(6)
    layer = KogMsa(8, 2, 2, rng, dropout=0.5, dtype=F64)
    masks = build_order_masks(chain(5), 2)
    x = T.Tensor(rng.normal(size=(5, 8)))
    np.testing.assert_array_equal(layer(x, masks).data, layer(x, masks).data)
    assert not np.array_equal(layer(x, masks, True, T.seeded_rng(0)).data, layer(x, masks).data)


def test_two_dimensional_input_round_trips():
    rng = np.random.default_rng(7)
    layer = kog_layer(rng, 4, 2, 2)
    masks = build_order_masks(chain(4), 2)
    x = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(layer(T.Tensor(x), masks).data,
                                  layer(T.Tensor(x[None]), masks).data[0])


@pytest.mark.parametrize("check", [check_gr_msa, check_kog_msa], ids=["gr_msa", "kog_msa"])
def test_sublayer_gradients(check):
    errs = [check(T.seeded_rng([21, i])) for i in range(20)]
    assert max(errs) <= 1e-4, max(errs)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain, random_tree
from oracles import chebyshev_oracle

from kogt import tensor as T
from kogt.attention import GrMsa, KogMsa
from kogt.errors import ConfigError, ShapeError
from kogt.gradcheck import check_function, check_tiny_gase_net, check_tiny_kog_transformer
from kogt.graph import build_scaled_laplacian
from kogt.models import (GaseNet, GaseNetConfig, GraAttention, KogTransformer, KogTransformerConfig,
                         build_model, chebyshev_conv, config_from_dict, config_to_dict,
                         kog_param_count, upsample_nodes)
from kogt.nn import Mlp

F64 = np.float64


# ---------------------------------------------------------------- configs


def test_default_hyperparameters():
    cfg = KogTransformerConfig()
    assert (cfg.num_layers, cfg.dim, cfg.heads, cfg.order, cfg.delta) == (5, 128, 4, 4, 2)
    assert cfg.directed and cfg.dropout == 0.1
    mini = KogTransformerConfig.mini()
    assert (mini.dim, mini.order) == (64, 5)
    g = GaseNetConfig()
    assert (g.dim, g.dropout, g.cheb_order) == (32, 0.2, 2)
    assert g.schedule == (21, 48, 96, 192, 389, 778)


def test_config_dict_round_trip():
    for cfg in (KogTransformerConfig.mini(seed=3), GaseNetConfig(precision="f64")):
        assert config_from_dict(config_to_dict(cfg)) == cfg


@pytest.mark.parametrize("bad", [{"dim": "64"}, {"directed": 1}, {"dropout": "x"}, {"width": 3},
                                 {"num_layers": 0}, {"dim": 30, "heads": 4}, {"precision": "f16"}])
def test_kog_config_validation(bad):
    with pytest.raises(ConfigError):
        KogTransformerConfig.from_dict(bad)


@pytest.mark.parametrize("schedule", [(21, 48, 96), (21, 48, 48, 192, 389, 778), (20, 48, 96, 192, 389, 778)])
def test_gase_schedule_validation(schedule):
    with pytest.raises(ConfigError):
        GaseNetConfig(schedule=schedule)


# ---------------------------------------------------------------- KOG-Transformer


def test_forward_shape_and_determinism(h36m):
    model = KogTransformer(KogTransformerConfig(), h36m)
    x = np.random.default_rng(0).normal(size=(64, 16, 2)).astype(np.float32)
    a = model(x)
    assert a.shape == (64, 16, 3) and a.dtype == np.float32
    np.testing.assert_array_equal(a.data, model(x).data)


def test_joint_count_mismatch(h36m, hand):
    with pytest.raises(ShapeError):
        KogTransformer(KogTransformerConfig(), hand)
    model = KogTransformer(KogTransformerConfig.mini(num_layers=1), h36m)
    with pytest.raises(ShapeError):
        model(np.zeros((2, 15, 2)))


def test_layer_audit(h36m):
    model = KogTransformer(KogTransformerConfig(), h36m)
    kinds = {}
    for layer in model.layers:
        for val in vars(layer).values():
            kinds[type(val).__name__] = kinds.get(type(val).__name__, 0) + 1
    assert kinds[KogMsa.__name__] == 10 and kinds[GrMsa.__name__] == 5 and kinds[Mlp.__name__] == 5
    labels = [lab for lab, _ in model.kog_modules()]
    assert labels == [f"{i}-{j}" for i in range(1, 6) for j in (1, 2)]
    assert all(c.shape == (5,) for _, c in model.fusion_weights())


def test_parameter_counts_against_reference_sizes(h36m):
    default, mini = KogTransformerConfig(), KogTransformerConfig.mini()
    assert kog_param_count(default) == KogTransformer(default, h36m).num_parameters()
    assert kog_param_count(mini) == KogTransformer(mini, h36m).num_parameters()
    assert abs(kog_param_count(default) / 1.99e6 - 1) <= 0.10
    assert abs(kog_param_count(mini) / 0.54e6 - 1) <= 0.10


@given(st.integers(1, 3), st.sampled_from([(8, 2), (12, 3), (16, 4)]), st.integers(0, 5),
       st.integers(1, 4), st.booleans(), st.integers(1, 3))
def test_closed_form_count_matches_construction(n, dh, K, delta, directed, ratio):
    d, heads = dh
    cfg = KogTransformerConfig(num_layers=n, dim=d, heads=heads, order=K, delta=delta,
                               directed=directed, mlp_ratio=ratio, num_joints=5)
    assert kog_param_count(cfg) == KogTransformer(cfg, chain(5)).num_parameters()


def test_training_mode_uses_dropout(h36m):
    model = KogTransformer(KogTransformerConfig.mini(num_layers=1), h36m)
    x = np.random.default_rng(1).normal(size=(2, 16, 2))
    assert not np.array_equal(model(x, train=True).data, model(x).data)


def test_tiny_model_gradient_check():
    assert check_tiny_kog_transformer(T.seeded_rng(0)) <= 1e-4


# ---------------------------------------------------------------- Chebyshev convolution


def test_order_one_is_plain_linear():
    rng = np.random.default_rng(0)
    x, theta, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3, 5)), rng.normal(size=5)
    y = chebyshev_conv(T.Tensor(x), build_scaled_laplacian(chain(4)), 1, T.Tensor(theta), T.Tensor(b))
    np.testing.assert_allclose(y.data, x @ theta[0] + b, atol=1e-14)


def test_chain_order_two_against_matrix_polynomial():
    L = build_scaled_laplacian(chain(3))
    theta = np.array([[[1.0, -1.0]], [[0.5, 2.0]]])        # (2, 1, 2)
    b = np.array([0.25, -0.5])
    x = np.array([[1.0], [2.0], [-1.0]])
    y = chebyshev_conv(T.Tensor(x), L, 2, T.Tensor(theta), T.Tensor(b)).data
    np.testing.assert_allclose(y, x @ theta[0] + L.entries @ x @ theta[1] + b, atol=1e-14)
    np.testing.assert_allclose(y, chebyshev_oracle(x, L.entries, list(theta), b), atol=1e-12)


@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_chebyshev_matches_spectral_oracle(l, order, seed):
    rng = np.random.default_rng(seed)
    L = build_scaled_laplacian(random_tree(rng, l))
    x, theta, b = rng.normal(size=(l, 3)), rng.normal(size=(order, 3, 2)), rng.normal(size=2)
    y = chebyshev_conv(T.Tensor(x), L, order, T.Tensor(theta), T.Tensor(b)).data
    np.testing.assert_allclose(y, chebyshev_oracle(x, L.entries, list(theta), b), atol=1e-9)


def test_chebyshev_zero_input_gives_bias():
    L = build_scaled_laplacian(chain(5))
    b = np.array([1.0, -2.0, 3.0])
    y = chebyshev_conv(T.Tensor(np.zeros((5, 4))), L, 3, T.Tensor(np.ones((3, 4, 3))), T.Tensor(b))
    np.testing.assert_array_equal(y.data, np.tile(b, (5, 1)))


def test_chebyshev_shape_errors():
    L = build_scaled_laplacian(chain(3))
    with pytest.raises(ShapeError):
        chebyshev_conv(T.Tensor(np.zeros((4, 2))), L, 2, T.Tensor(np.zeros((2, 2, 2))))
    with pytest.raises(ShapeError):
        chebyshev_conv(T.Tensor(np.zeros((3, 2))), L, 2, T.Tensor(np.zeros((3, 2, 2))))


# ---------------------------------------------------------------- GraAttention


def _gra(d=4, nodes=5, seed=0):
    return GraAttention(d, nodes, np.random.default_rng(seed), dtype=F64)


def _plain_attention(layer, x):
    h = layer.norm(T.Tensor(x)).data
    q, k, v = h @ layer.w_q.data, h @ layer.w_k.data, h @ layer.w_v.data
    s = q @ k.T / np.sqrt(x.shape[-1])
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    return x + a @ v


def test_zero_bias_is_plain_attention():
    layer = _gra()
    x = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_allclose(layer(T.Tensor(x)).data, _plain_attention(layer, x), atol=1e-14)


def test_bias_gap_concentrates_attention():
    layer = _gra()
    layer.w_q.data[...] = 0      # scores are the bias alone
    layer.w_k.data[...] = 0
    layer.w_v.data = np.eye(4)
    layer.adj_bias.data[2] = -10.0
    layer.adj_bias.data[2, 4] = 0.0
    x = np.random.default_rng(2).normal(size=(5, 4))
    weights = np.exp(layer.adj_bias.data[2]) / np.exp(layer.adj_bias.data[2]).sum()
    assert weights[4] >= 0.99
    h = layer.norm(T.Tensor(x)).data
    np.testing.assert_allclose(layer(T.Tensor(x)).data[2] - x[2], weights @ h, atol=1e-14)


def test_gra_attention_shape_checks():
    layer = _gra()
    assert layer(T.Tensor(np.zeros((3, 5, 4)))).shape == (3, 5, 4)
    with pytest.raises(ShapeError):
        layer(T.Tensor(np.zeros((4, 4))))


# ---------------------------------------------------------------- upsampling


def test_identity_extended_upsampling():
    w = np.vstack([np.eye(3), np.ones((2, 3))])
    x = np.random.default_rng(3).normal(size=(3, 4))
    y = upsample_nodes(T.Tensor(x), T.Tensor(w)).data
    np.testing.assert_array_equal(y[:3], x)


def test_upsampling_hand_example():
    w = np.array([[1.0, 0.0], [0.5, 0.5], [2.0, -1.0]])
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(upsample_nodes(T.Tensor(x), T.Tensor(w)).data,
                                  [[1.0, 2.0], [2.0, 3.0], [-1.0, 0.0]])


def test_upsampling_gradient():
    rng = np.random.default_rng(4)
    err = check_function(lambda t: upsample_nodes(t[1], t[0]), [rng.normal(size=(5, 3)),
                                                                rng.normal(size=(2, 3, 4))], rng)
    assert err <= 1e-4


def test_upsampling_must_grow():
    with pytest.raises(ConfigError):
        upsample_nodes(T.Tensor(np.zeros((3, 2))), T.Tensor(np.zeros((3, 3))))


# ---------------------------------------------------------------- GASE-Net


def test_gase_net_default_output(hand):
    model = GaseNet(GaseNetConfig(), hand)
    x = np.random.default_rng(0).normal(size=(2, 21, 3))
    trace = []
    y = model(x, trace=trace)
    assert y.shape == (2, 778, 3)
    assert trace == [48, 96, 192, 389, 778]
    np.testing.assert_array_equal(y.data, model(x).data)


def test_gase_net_zero_input_is_finite(hand):
    model = build_model(GaseNetConfig(schedule=(21, 32, 48, 64, 80, 96)), hand)
    y = model(np.zeros((1, 21, 3)))
    assert np.isfinite(y.data).all()


def test_gase_net_gradient_check():
    assert check_tiny_gase_net(T.seeded_rng(0)) <= 1e-4

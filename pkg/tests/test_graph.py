import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain, random_tree, trees
from oracles import floyd_warshall, order_mask_oracle, relative_index_oracle, signed_distance_oracle

from kogt.errors import ConfigError, GraphStructureError
from kogt.graph import (SkeletonGraph, build_order_masks, build_relative_index_map,
                        build_scaled_laplacian, build_signed_distance, bundled_skeletons,
                        load_skeleton, masked_value, save_skeleton)


# ---------------------------------------------------------------- skeleton


def test_edges_are_normalised_small_first():
    g = SkeletonGraph(3, ((1, 0), (2, 1)))
    assert g.edges == ((0, 1), (1, 2))


@pytest.mark.parametrize("edges, fragment", [
    (((0, 1), (1, 2), (2, 0)), "cycle"),
    (((0, 1), (0, 1)), "duplicate"),
    (((0, 0),), "self-loop"),
    (((0, 5),), "outside"),
])
def test_invalid_structures_are_rejected(edges, fragment):
    with pytest.raises(GraphStructureError, match=fragment):
        SkeletonGraph(3, edges)


def test_cycle_message_names_the_loop():
    with pytest.raises(GraphStructureError) as err:
        SkeletonGraph(4, ((0, 1), (1, 2), (2, 3), (1, 3)))
    assert "[1, 2, 3, 1]" in str(err.value) or "[3, 2, 1, 3]" in str(err.value)


def test_disconnected_names_unreachable_nodes():
    with pytest.raises(GraphStructureError, match=r"\[2, 3\]"):
        SkeletonGraph(4, ((0, 1), (2, 3)))


def test_bundled_skeletons_load(h36m, hand):
    assert set(bundled_skeletons()) >= {"h36m16", "hand21"}
    assert h36m.num_nodes == 16 and len(h36m.edges) == 15
    assert hand.num_nodes == 21 and len(hand.edges) == 20


def test_skeleton_file_round_trip(tmp_path, h36m):
    p = tmp_path / "s.json"
    save_skeleton(h36m, p)
    back = load_skeleton(p)
    assert back == h36m
    np.testing.assert_array_equal(back.rest_offsets, h36m.rest_offsets)
    raw = json.loads(p.read_text())
    assert all(a < b for a, b in raw["edges"])


def test_skeleton_file_minimal_format(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"num_nodes": 3, "edges": [[0, 1], [1, 2]]}')
    assert load_skeleton(p) == chain(3)


# ---------------------------------------------------------------- signed distance


def test_body_skeleton_distance_example(h36m):
    # spine (7) to left foot (6) is four bones; with labels counted from one
    # these are joints 8 and 7
    H = build_signed_distance(h36m).entries
    assert H[7, 6] == 4 and H[6, 7] == -4


def test_chain_distance_example():
    H = build_signed_distance(chain(3)).entries
    assert H[0, 2] == -2 and H[2, 0] == 2 and H[0, 1] == -1
    np.testing.assert_array_equal(H, signed_distance_oracle(3, chain(3).edges))


@given(trees(max_nodes=12))
def test_signed_distance_invariants(g):
    H = build_signed_distance(g).entries
    assert (np.diag(H) == 0).all()
    np.testing.assert_array_equal(np.abs(H), np.abs(H.T))
    off = ~np.eye(g.num_nodes, dtype=bool)
    assert (np.sign(H)[off] == -np.sign(H.T)[off]).all()
    np.testing.assert_array_equal(np.abs(H), floyd_warshall(g.num_nodes, g.edges))


@given(trees(max_nodes=10))
def test_signed_distance_matches_path_enumeration(g):
    np.testing.assert_array_equal(build_signed_distance(g).entries,
                                  signed_distance_oracle(g.num_nodes, g.edges))


@given(trees(max_nodes=14), st.randoms(use_true_random=False))
def test_renumbering_consistency(g, rnd):
    perm = list(range(g.num_nodes))
    rnd.shuffle(perm)
    P = np.zeros((g.num_nodes, g.num_nodes), dtype=int)
    P[perm, np.arange(g.num_nodes)] = 1      # node i moves to perm[i]
    H = build_signed_distance(g)
    Hp = build_signed_distance(g.permuted(perm))
    np.testing.assert_array_equal(Hp.magnitude, P @ H.magnitude @ P.T)
    # signs come from the new labels
    new = np.arange(g.num_nodes)
    sign = np.where(new[:, None] < new[None, :], -1, 1)
    np.testing.assert_array_equal(Hp.entries, (P @ H.magnitude @ P.T) * sign)


# ---------------------------------------------------------------- relative index


def test_relative_index_examples(h36m):
    H = build_signed_distance(h36m)
    idx = build_relative_index_map(H, 2, True)
    assert idx.indices[7, 6] == 4 and idx.indices[6, 7] == 0
    assert idx.table_size == 5
    und = build_relative_index_map(build_signed_distance(chain(6)), 4, False)
    assert und.indices[0, 5] == 4
    assert und.table_size == 5


@given(trees(max_nodes=12), st.integers(1, 6), st.booleans())
def test_relative_index_matches_oracle(g, delta, directed):
    H = build_signed_distance(g)
    idx = build_relative_index_map(H, delta, directed)
    np.testing.assert_array_equal(idx.indices, relative_index_oracle(H.entries, delta, directed))
    diag = delta if directed else 0
    assert (np.diag(idx.indices) == diag).all()
    assert idx.indices.min() >= 0 and idx.indices.max() < idx.table_size
    if directed:
        near = H.magnitude <= delta
        np.testing.assert_array_equal((idx.indices + idx.indices.T)[near], 2 * delta)
    else:
        np.testing.assert_array_equal(idx.indices, idx.indices.T)


@pytest.mark.parametrize("delta", [0, -1, 1.5])
def test_relative_index_rejects_bad_delta(delta):
    with pytest.raises(ConfigError):
        build_relative_index_map(build_signed_distance(chain(3)), delta)


# ---------------------------------------------------------------- order masks


def test_order_zero_is_diagonal(h36m):
    m = build_order_masks(h36m, 4)
    np.testing.assert_array_equal(m.allowed[0], np.eye(16, dtype=bool))
    add = m.additive(np.float32)
    assert add.dtype == np.float32
    assert (add[0][~np.eye(16, dtype=bool)] == masked_value(np.float32)).all()
    assert (np.diag(add[0]) == 0).all()


def test_two_node_graph_has_no_third_order():
    m = build_order_masks(chain(2), 3)
    assert not m.allowed[3].any()
    assert m.empty_rows()[3].all()
    assert (m.masks[3] == masked_value(np.float64)).all()


def test_masks_match_bfs_levels_on_ten_node_trees():
    rng = np.random.default_rng(7)
    for _ in range(50):
        g = random_tree(rng, 10)
        np.testing.assert_array_equal(build_order_masks(g, 5).allowed,
                                      order_mask_oracle(10, g.edges, 5))


@given(trees(max_nodes=16))
def test_mask_partition_up_to_diameter(g):
    diam = build_signed_distance(g).diameter
    m = build_order_masks(g, diam)
    np.testing.assert_array_equal(m.allowed.sum(axis=0), 1)


def test_negative_order_rejected():
    with pytest.raises(ConfigError):
        build_order_masks(chain(3), -1)


# ---------------------------------------------------------------- laplacian


def test_single_node_laplacian():
    L = build_scaled_laplacian(SkeletonGraph(1, ()))
    assert L.entries.shape == (1, 1)
    assert -1 <= L.entries[0, 0] <= 1


def test_chain_laplacian_spectrum():
    L = build_scaled_laplacian(chain(3))
    lam = np.linalg.eigvalsh(L.entries)
    assert lam.min() >= -1 - 1e-6 and lam.max() <= 1 + 1e-6
    assert abs(lam.max() - 1) < 1e-9  # exact top eigenvalue used for the rescale


def test_laplacian_symmetric_on_random_trees():
    rng = np.random.default_rng(3)
    for _ in range(100):
        g = random_tree(rng, int(rng.integers(1, 21)))
        L = build_scaled_laplacian(g)
        np.testing.assert_array_equal(L.entries, L.entries.T)
        lam = np.linalg.eigvalsh(L.entries)
        assert lam.min() >= -1 - 1e-6 and lam.max() <= 1 + 1e-6


def test_structures_are_read_only(h36m):
    H = build_signed_distance(h36m).entries
    with pytest.raises(ValueError):
        H[0, 0] = 1

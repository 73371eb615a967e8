"""Interaction graph and message-passing tests."""

import numpy as np
import pytest

from trackcast import autodiff as ad
from trackcast import gnn
from trackcast.errors import ContractError


def toy_store(layers=1, dim=2, seed=0):
    store = ad.ParamStore()
    rng = np.random.default_rng(seed)
    gnn.make_gnn(store, rng, layers=layers, dim=dim)
    return store


class TestBuildGraph:
    def test_far_objects_have_no_edge(self):
        g = gnn.build_graph([[0, 0, 0]], [[100, 0, 0]], threshold=10.0)
        assert g.num_td_edges == 0

    def test_colocated_track_and_detection_share_an_edge(self):
        g = gnn.build_graph([[1, 0, 2]], [[1, 0, 2]], threshold=10.0)
        assert g.num_td_edges == 1
        assert tuple(g.td[0]) == (0, 0)

    def test_dense_cluster_has_all_ten_edges(self):
        # 3 tracks + 2 detections all within range: C(5, 2) = 10 edges
        tracks = [[0, 0, 0], [1, 0, 0], [0, 0, 1]]
        dets = [[1, 0, 1], [0.5, 0, 0.5]]
        g = gnn.build_graph(tracks, dets, threshold=10.0)
        total = g.num_td_edges + len(g.tt) // 2 + len(g.dd) // 2
        assert total == 10

    def test_no_self_edges_and_symmetric(self):
        g = gnn.build_graph([[0, 0, 0], [1, 0, 0]], [], threshold=5.0)
        assert all(a != b for a, b in g.tt)
        pairs = {tuple(e) for e in g.tt}
        assert all((b, a) in pairs for a, b in pairs)

    def test_distance_measured_in_3d(self):
        # identical ground position, vertical offset pushes past the threshold
        g = gnn.build_graph([[0, 0, 0]], [[0, 11, 0]], threshold=10.0)
        assert g.num_td_edges == 0

    def test_translation_leaves_topology_unchanged(self):
        rng = np.random.default_rng(7)
        tracks = rng.uniform(-20, 20, size=(4, 3))
        dets = rng.uniform(-20, 20, size=(3, 3))
        g1 = gnn.build_graph(tracks, dets, threshold=12.0)
        shift = np.array([55.0, -3.0, 21.0])
        g2 = gnn.build_graph(tracks + shift, dets + shift, threshold=12.0)
        np.testing.assert_array_equal(g1.td, g2.td)
        np.testing.assert_array_equal(g1.tt, g2.tt)
        np.testing.assert_array_equal(g1.dd, g2.dd)

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ContractError):
            gnn.build_graph([[0, 0, 0]], [], threshold=0.0)


class TestPropagate:
    def test_zero_layers_is_identity(self):
        store = toy_store(layers=0)
        u0 = ad.constant(np.random.default_rng(0).normal(size=(2, 2)))
        v0 = ad.constant(np.random.default_rng(1).normal(size=(1, 2)))
        g = gnn.build_graph([[0, 0, 0], [1, 0, 0]], [[0, 0, 1]], threshold=10.0)
        u, v = gnn.propagate(store, g, u0, v0, layers=0)
        np.testing.assert_array_equal(u.value, u0.value)
        np.testing.assert_array_equal(v.value, v0.value)

    def test_isolated_node_sees_only_its_own_transform(self):
        # single layer (the final one), so no ReLU is applied
        store = toy_store(layers=1)
        g = gnn.build_graph([[0, 0, 0]], [[100, 0, 0]], threshold=5.0)
        u0 = ad.constant([[0.3, -0.7]])
        v0 = ad.constant([[1.0, 2.0]])
        u, _ = gnn.propagate(store, g, u0, v0, layers=1)
        w = store["gnn.layer0.sigma1.w"].value
        b = store["gnn.layer0.sigma1.b"].value
        np.testing.assert_allclose(u.value, u0.value @ w + b, atol=1e-12)

    def test_two_node_hand_computation(self):
        # one track + one detection in range; verify the update rule by hand
        store = ad.ParamStore()
        for k, w in (("sigma1", [[1.0, 0.0], [0.0, 2.0]]),
                     ("sigma2", [[0.0, 1.0], [1.0, 0.0]]),
                     ("sigma3", [[3.0, 0.0], [0.0, 3.0]])):
            store.create(f"gnn.layer0.{k}.w", (2, 2), init="zeros")
            store[f"gnn.layer0.{k}.w"].value = np.array(w)
            store.create(f"gnn.layer0.{k}.b", (2,), init="zeros")
        g = gnn.build_graph([[0, 0, 0]], [[1, 0, 0]], threshold=5.0)
        u0 = ad.constant([[1.0, 2.0]])
        v0 = ad.constant([[3.0, 4.0]])
        u, v = gnn.propagate(store, g, u0, v0, layers=1)
        # u' = sigma1(u) + sigma2(v): [1, 4] + [4, 3] = [5, 7]
        np.testing.assert_allclose(u.value, [[5.0, 7.0]])
        # v' = sigma1(v) + sigma2(u): [3, 8] + [2, 1] = [5, 9]
        np.testing.assert_allclose(v.value, [[5.0, 9.0]])

    def test_relu_between_layers_but_not_after_final(self):
        store = toy_store(layers=2, dim=2, seed=3)
        # bias strongly negative so any ReLU before the final layer clips
        for name in store.names():
            if name.endswith(".b"):
                store[name].value = np.full_like(store[name].value, -50.0)
        g = gnn.build_graph([[0, 0, 0]], [[100, 0, 0]], threshold=5.0)
        u0 = ad.constant([[0.1, 0.2]])
        v0 = ad.constant([[0.0, 0.0]])
        u, _ = gnn.propagate(store, g, u0, v0, layers=2)
        # final layer output of a clipped-to-zero input is exactly its bias
        np.testing.assert_allclose(u.value, [[-50.0, -50.0]])
        assert (u.value < 0).all()  # no ReLU after the final layer

    def test_permutation_equivariance(self):
        store = toy_store(layers=2, dim=4, seed=5)
        rng = np.random.default_rng(11)
        tracks = rng.uniform(-6, 6, size=(4, 3))
        dets = rng.uniform(-6, 6, size=(3, 3))
        u0 = rng.normal(size=(4, 4))
        v0 = rng.normal(size=(3, 4))
        g = gnn.build_graph(tracks, dets, threshold=8.0)
        u, v = gnn.propagate(store, g, ad.constant(u0), ad.constant(v0), layers=2)
        perm = np.array([2, 0, 3, 1])
        g_p = gnn.build_graph(tracks[perm], dets, threshold=8.0)
        u_p, v_p = gnn.propagate(store, g_p, ad.constant(u0[perm]),
                                 ad.constant(v0), layers=2)
        np.testing.assert_allclose(u_p.value, u.value[perm], atol=1e-10)
        np.testing.assert_allclose(v_p.value, v.value, atol=1e-10)

    def test_neighbor_change_propagates_only_to_connected_nodes(self):
        store = toy_store(layers=1, dim=2, seed=9)
        tracks = [[0, 0, 0], [100, 0, 0]]   # track 1 isolated
        dets = [[1, 0, 0]]
        g = gnn.build_graph(tracks, dets, threshold=5.0)
        u0 = np.array([[0.5, 0.5], [0.2, 0.9]])
        v0a = np.array([[1.0, 1.0]])
        v0b = np.array([[2.0, -1.0]])
        ua, _ = gnn.propagate(store, g, ad.constant(u0), ad.constant(v0a), 1)
        ub, _ = gnn.propagate(store, g, ad.constant(u0), ad.constant(v0b), 1)
        assert not np.allclose(ua.value[0], ub.value[0])
        np.testing.assert_array_equal(ua.value[1], ub.value[1])


class TestEdgeFeatures:
    def test_equal_features_give_zero_edge(self):
        g = gnn.build_graph([[0, 0, 0]], [[1, 0, 0]], threshold=5.0)
        u = ad.constant([[1.0, 2.0]])
        v = ad.constant([[1.0, 2.0]])
        e = gnn.edge_features(u, v, g)
        np.testing.assert_array_equal(e.value, [[0.0, 0.0]])

    def test_no_track_det_edges_gives_empty_output(self):
        g = gnn.build_graph([[0, 0, 0]], [[100, 0, 0]], threshold=5.0)
        e = gnn.edge_features(ad.constant([[1.0, 2.0]]),
                              ad.constant([[0.0, 0.0]]), g)
        assert e.shape == (0, 2)

    def test_subtraction_rule(self):
        g = gnn.build_graph([[0, 0, 0]], [[1, 0, 0]], threshold=5.0)
        e = gnn.edge_features(ad.constant([[1.0, 2.0]]),
                              ad.constant([[1.0, 1.0]]), g)
        np.testing.assert_array_equal(e.value, [[0.0, 1.0]])

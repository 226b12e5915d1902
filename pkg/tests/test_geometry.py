import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgm2 import autodiff as ad
from vgm2 import geometry as geo


def line_points(n=10):
    # unevenly spaced so no two neighbors tie at distance rho (which would
    # put the affinity target below the attainable range)
    gaps = 1.0 + 0.37 * np.sin(np.arange(1, n))
    return np.concatenate([[0.0], np.cumsum(gaps)]).reshape(-1, 1)


class TestKnnGraph:
    def test_bandwidths_hit_affinity_target(self):
        # bisection oracle: recompute the row sums independently
        g = geo.build_knn_graph(line_points(10), n_neighbors=3)
        target = np.log2(3)
        for i in range(10):
            gap = np.maximum(g.distances[i] - g.rho[i], 0.0)
            total = np.exp(-gap / g.sigma[i]).sum()
            assert total == pytest.approx(target, abs=1e-6)

    def test_tied_neighbors_saturate_gracefully(self):
        # equally spaced points: interior rows have two neighbors at rho, the
        # row sum cannot go below 2 and bisection drives sigma to its floor
        g = geo.build_knn_graph(np.linspace(0.0, 9.0, 10).reshape(-1, 1), n_neighbors=3)
        sums = np.exp(-np.maximum(g.distances - g.rho[:, None], 0.0) / g.sigma[:, None]).sum(axis=1)
        assert np.all(sums >= np.log2(3) - 1e-6)
        assert np.all(g.edge_p >= 0.0) and np.all(g.edge_p <= 1.0)

    def test_nearest_neighbor_contributes_one(self):
        g = geo.build_knn_graph(line_points(10), n_neighbors=3)
        # the closest neighbor sits exactly at rho, so its directed strength is 1
        gap = np.maximum(g.distances[:, 0] - g.rho, 0.0)
        assert np.allclose(np.exp(-gap / g.sigma), 1.0)

    def test_probabilistic_union_symmetrization(self):
        # p = 1 from both directions combines to exactly 1
        assert 1.0 + 1.0 - 1.0 * 1.0 == 1.0
        g = geo.build_knn_graph(line_points(12), n_neighbors=2)
        assert np.all(g.edge_p >= 0.0) and np.all(g.edge_p <= 1.0)

    def test_no_self_edges_and_sorted_pairs(self):
        rng = np.random.default_rng(0)
        g = geo.build_knn_graph(rng.normal(size=(30, 3)), n_neighbors=5)
        assert np.all(g.edge_i < g.edge_j)

    def test_duplicate_points_fall_back_with_warning(self):
        pts = np.zeros((6, 2))
        with pytest.warns(UserWarning, match="sigma = 1"):
            g = geo.build_knn_graph(pts, n_neighbors=3)
        assert np.allclose(g.sigma, 1.0)
        assert g.degenerate

    def test_too_many_neighbors_rejected(self):
        with pytest.raises(geo.GeometryError, match="n_neighbors"):
            geo.build_knn_graph(line_points(5), n_neighbors=5)

    def test_nonfinite_points_rejected(self):
        pts = line_points(6)
        pts[0, 0] = np.nan
        with pytest.raises(geo.GeometryError, match="finite"):
            geo.build_knn_graph(pts, n_neighbors=2)


def toy_graph():
    """3-point graph with hand-chosen memberships."""
    return geo.NeighborGraph(
        indices=np.zeros((3, 1), dtype=np.intp),
        distances=np.zeros((3, 1)),
        rho=np.zeros(3),
        sigma=np.ones(3),
        edge_i=np.array([0, 0, 1], dtype=np.intp),
        edge_j=np.array([1, 2, 2], dtype=np.intp),
        edge_p=np.array([1.0, 0.5, 0.25]),
    )


class TestUmapLoss:
    def test_coincident_points_contribute_about_zero(self):
        g = toy_graph()
        g.edge_i, g.edge_j, g.edge_p = g.edge_i[:1], g.edge_j[:1], np.array([1.0])
        z = np.zeros((3, 2))
        loss = float(geo.umap_loss(g, z, a=1.0, b=1.0))
        # q pre-clamp is 1; the clamp leaves -log(1 - 1e-7) ~ 1e-7
        assert 0.0 <= loss < 1e-6

    def test_half_half_edge_is_log_two(self):
        g = toy_graph()
        g.edge_i, g.edge_j, g.edge_p = g.edge_i[:1], g.edge_j[:1], np.array([0.5])
        # place the pair so that q = 0.5: a d^(2b) = 1 -> d = 1 at a=1,b=1
        z = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
        loss = float(geo.umap_loss(g, z, a=1.0, b=1.0))
        assert loss == pytest.approx(np.log(2.0), rel=1e-9)

    def test_hand_summed_oracle_three_points(self):
        g = toy_graph()
        z = np.array([[0.0, 0.0], [1.2, 0.3], [-0.4, 0.9]])
        a, b = 1.3, 0.85
        expected = 0.0
        for i, j, p in zip(g.edge_i, g.edge_j, g.edge_p):
            d2 = np.sum((z[i] - z[j]) ** 2)
            q = 1.0 / (1.0 + a * d2**b)
            q = np.clip(q, 1e-7, 1 - 1e-7)
            expected -= p * np.log(q) + (1 - p) * np.log(1 - q)
        assert float(geo.umap_loss(g, z, a, b)) == pytest.approx(expected, abs=1e-10)

    def test_loss_is_nonnegative_with_negatives(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(20, 3))
        g = geo.build_knn_graph(pts, n_neighbors=4)
        z = rng.normal(size=(20, 2))
        neg = geo.sample_negative_pairs(g, rate=5, rng=rng)
        assert float(geo.umap_loss(g, z, 1.0, 1.0, neg_pairs=neg)) >= 0.0

    def test_gradient_matches_finite_differences_through_encoder(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(5, 3))
        g = geo.build_knn_graph(pts, n_neighbors=2)
        params = geo.init_mlp_params(rng, (3, 4, 2))
        a, b = 1.2, 0.9

        def loss_of(params_np):
            z = geo.mlp_forward(params_np, pts)
            return float(ad.value_of(geo.umap_loss(g, z, a, b)))

        tape = ad.Tape()
        pvars = {k: tape.variable(v) for k, v in params.items()}
        loss = geo.umap_loss(g, geo.mlp_forward(pvars, pts), a, b)
        grads = tape.backward(loss)
        for key in params:
            gv = tape.grad(grads, pvars[key])
            fd = np.zeros_like(params[key])
            flat, fdf = params[key].reshape(-1), fd.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + 1e-6
                hi = loss_of(params)
                flat[idx] = orig - 1e-6
                lo = loss_of(params)
                flat[idx] = orig
                fdf[idx] = (hi - lo) / 2e-6
            denom = np.maximum(np.abs(fd), 1e-4)
            assert np.all(np.abs(gv - fd) / denom < 1e-4), key

    def test_nonfinite_embeddings_rejected(self):
        g = toy_graph()
        z = np.full((3, 2), np.nan)
        with pytest.raises(geo.GeometryError):
            geo.umap_loss(g, z, 1.0, 1.0)


class TestPairSampling:
    def test_single_pair_on_two_points(self):
        batch = geo.sample_pairs(np.array([0, 1]), budget=1, balance_ratio=0.5, rng=np.random.default_rng(0))
        assert len(batch) == 1
        assert (batch.i[0], batch.j[0]) == (0, 1)
        assert batch.u[0] == 0.0

    def test_balanced_two_class_batch(self):
        labels = np.array([0] * 5 + [1] * 5)
        batch = geo.sample_pairs(labels, budget=20, balance_ratio=0.5, rng=np.random.default_rng(1))
        assert len(batch) == 20
        assert batch.n_same == 10
        # feasibility: 2*C(5,2) = 20 same and 25 diff pairs exist out of C(10,2) = 45
        assert not batch.single_class

    def test_single_class_flagged(self):
        batch = geo.sample_pairs(np.zeros(6), budget=5, balance_ratio=0.5, rng=np.random.default_rng(2))
        assert batch.single_class
        assert np.all(batch.u == 1.0)

    def test_deterministic_under_fixed_seed(self):
        labels = np.array([0, 0, 1, 1, 2, 2, 2])
        b1 = geo.sample_pairs(labels, 10, 0.5, np.random.default_rng(77))
        b2 = geo.sample_pairs(labels, 10, 0.5, np.random.default_rng(77))
        assert np.array_equal(b1.i, b2.i) and np.array_equal(b1.j, b2.j) and np.array_equal(b1.u, b2.u)

    def test_budget_bounds_enforced(self):
        with pytest.raises(geo.GeometryError):
            geo.sample_pairs(np.array([0, 1]), budget=2, balance_ratio=0.5, rng=np.random.default_rng(0))
        with pytest.raises(geo.GeometryError):
            geo.sample_pairs(np.array([0]), budget=1, balance_ratio=0.5, rng=np.random.default_rng(0))

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(min_value=2, max_value=12),
        st.integers(min_value=1, max_value=4),
        st.integers(min_value=0, max_value=10**6),
    )
    def test_never_emits_self_or_duplicate_pairs(self, n, n_classes, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, n_classes, size=n)
        total = n * (n - 1) // 2
        budget = int(rng.integers(1, total + 1))
        batch = geo.sample_pairs(labels, budget, 0.5, rng)
        assert len(batch) == budget
        assert np.all(batch.i < batch.j)
        keys = set(zip(batch.i.tolist(), batch.j.tolist()))
        assert len(keys) == budget
        assert np.array_equal(batch.u, (labels[batch.i] == labels[batch.j]).astype(float))


class TestCurveFit:
    def test_fitted_curve_is_one_at_zero(self):
        a, b = geo.fit_curve_params(0.1)
        assert 1.0 / (1.0 + a * 0.0 ** (2 * b)) == 1.0

    def test_matches_grid_search_oracle(self):
        a, b = geo.fit_curve_params(0.1)
        xv = np.linspace(0.0, 3.0, 300)
        yv = np.where(xv < 0.1, 1.0, np.exp(-(xv - 0.1)))

        def mse(aa, bb):
            return float(np.mean((1.0 / (1.0 + aa * xv ** (2 * bb)) - yv) ** 2))

        # brute-force grid oracle over (a, b)
        grid_a = np.linspace(0.5, 3.0, 60)
        grid_b = np.linspace(0.5, 1.5, 60)
        best = min(mse(aa, bb) for aa in grid_a for bb in grid_b)
        ours = mse(a, b)
        assert ours < 1e-2
        assert ours <= best + 1e-5
        # classic parameters for min_dist = 0.1 sit near (1.58, 0.9)
        assert a == pytest.approx(1.577, abs=0.05)
        assert b == pytest.approx(0.895, abs=0.05)

    def test_larger_min_dist_flattens_curve(self):
        a_small, _ = geo.fit_curve_params(0.05)
        a_large, _ = geo.fit_curve_params(0.2)
        assert a_large < a_small

    def test_domain_check(self):
        with pytest.raises(geo.GeometryError):
            geo.fit_curve_params(1.5)


class TestPairDistances:
    def test_matches_norm(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(7, 3))
        batch = geo.sample_pairs(rng.integers(0, 2, 7), budget=10, balance_ratio=0.5, rng=rng)
        s = geo.pair_distances(z, batch)
        ref = np.linalg.norm(z[batch.i] - z[batch.j], axis=1)
        assert np.allclose(s, ref, atol=1e-6)


class TestEncoder:
    def test_shapes_and_determinism(self):
        rng = np.random.default_rng(9)
        params = geo.init_mlp_params(rng, (5, 8, 4, 2))
        x = np.random.default_rng(1).normal(size=(11, 5))
        z = geo.mlp_forward(params, x)
        assert z.shape == (11, 2)
        params2 = geo.init_mlp_params(np.random.default_rng(9), (5, 8, 4, 2))
        assert all(np.array_equal(params[k], params2[k]) for k in params)

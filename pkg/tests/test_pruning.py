import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from splineprune.engine import IDENTITY, RELU, Dense, Network, mlp
from splineprune.errors import AlignmentError, ConfigError, DegenerateUnitError, DimensionError, NotEnoughUnitsError
from splineprune.experiments import toy_convnet
from splineprune.partition import make_slice
from splineprune.pruning import (PrunePlan, fit_pca_projection, global_spline_prune, keep_count,
                                 layerwise_spline_prune, lottery_mask_and_rewind, magnitude_prune,
                                 most_redundant_pair, prune, random_prune, redundancy,
                                 redundancy_from_rows, verify_prop1)


def dense(w, b=None):
    w = np.asarray(w, float)
    return Dense(w, np.zeros(len(w)) if b is None else np.asarray(b, float), RELU)


def net_from(*layers, n_out=2):
    """Stack dense hidden layers and a linear head."""
    last = layers[-1].weights.shape[0]
    rng = np.random.default_rng(0)
    head = Dense(rng.normal(size=(n_out, last)), np.zeros(n_out), IDENTITY)
    return Network(list(layers) + [head], (layers[0].weights.shape[1],))


def random_mlp(sizes, seed):
    rng = np.random.default_rng(seed)
    net = mlp(sizes, seed=seed)
    for layer in net.linear_layers:
        layer.bias = rng.normal(size=layer.bias.shape) * 0.5
    return net


def units(net):
    return [l.units for l in net.hidden_layers]


def oracle_score(a, b, ba, bb, rho):
    cos = abs(float(np.dot(a, b))) / (math.sqrt(float(np.dot(a, a))) * math.sqrt(float(np.dot(b, b))))
    return 1.0 - min(cos, 1.0) + rho * abs(ba - bb)


def oracle_pair(rows, biases, rho, allowed=None):
    best = None
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            if allowed is not None and not (allowed[i] or allowed[j]):
                continue
            s = oracle_score(rows[i], rows[j], biases[i], biases[j], rho)
            if best is None or s < best[2] - 1e-12:
                best = (i, j, s)
    return best


class TestRedundancy:
    def test_exact_duplicate(self):
        layer = dense([[1, 0], [1, 0]], [0.5, 0.5])
        for rho in (0.01, 0.05, 3.0):
            assert redundancy(layer, 0, 1, rho).total == 0.0

    def test_orthogonal_rows(self):
        s = redundancy(dense([[1, 0], [0, 1]], [0.5, 0.2]), 0, 1, 0.05)
        assert s.total == pytest.approx(1.015, abs=1e-12)
        assert s.angle_term == pytest.approx(1.0) and s.bias_term == pytest.approx(0.3)

    def test_antiparallel_zero_score(self):
        assert redundancy(dense([[1, 1], [-1, -1]]), 0, 1).total == 0.0

    def test_zero_row(self):
        with pytest.raises(DegenerateUnitError):
            redundancy(dense([[0, 0], [1, 0]]), 0, 1)

    @pytest.mark.parametrize("rho", [0.0, -1.0])
    def test_rho_positive(self, rho):
        with pytest.raises(ConfigError):
            redundancy(dense([[1, 0], [0, 1]]), 0, 1, rho)

    def test_conv_row_is_flattened_kernel(self):
        net = toy_convnet((1, 8, 8), 3, seed=0)
        conv = net.linear_layers[0]
        s = redundancy(conv, 0, 1, 0.05)
        a, b = conv.weights[0].ravel(), conv.weights[1].ravel()
        assert s.total == pytest.approx(oracle_score(a, b, conv.bias[0], conv.bias[1], 0.05), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 6), st.floats(0.01, 2.0), st.floats(0.1, 10.0))
    def test_symmetry_range_and_scale(self, seed, dim, rho, c):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, dim))
        ba, bb = rng.normal(size=2)
        ang, gap, tot = redundancy_from_rows(a, b, ba, bb, rho)
        ang2, _, tot2 = redundancy_from_rows(b, a, bb, ba, rho)
        assert tot == tot2 and ang == ang2
        assert 0.0 <= ang <= 1.0 and tot >= 0.0
        assert tot == pytest.approx(oracle_score(a, b, ba, bb, rho), abs=1e-9)
        ang3, _, tot3 = redundancy_from_rows(c * a, b, ba, bb, rho)
        assert ang3 == pytest.approx(ang, abs=1e-9) and tot3 == pytest.approx(tot, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000), st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3))
    def test_zero_iff_parallel_and_equal_bias(self, seed, scale):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=4)
        b = rng.normal()
        assert redundancy_from_rows(a, scale * a, b, b)[2] == pytest.approx(0.0, abs=1e-12)
        assert redundancy_from_rows(a, scale * a, b, b + 0.1)[2] > 0
        assert redundancy_from_rows(a, a + rng.normal(size=4), b, b)[2] > 0


class TestMostRedundantPair:
    def test_duplicate_found(self):
        layer = dense([[1, 2], [0, 1], [3, -1], [0, 1]], [0, 0.3, 0, 0.3])
        assert most_redundant_pair(layer) == (1, 3, 0.0)

    def test_orthogonal_units_pick_smallest_bias_gap(self):
        layer = dense(np.eye(3), [0.0, 0.5, 0.6])
        k, k2, s = most_redundant_pair(layer, 0.05)
        assert (k, k2) == (1, 2) and s == pytest.approx(1.005)

    def test_lexicographic_tie_break(self):
        layer = dense([[0, 1], [1, 0], [1, 0], [0, 1]])
        assert most_redundant_pair(layer)[:2] == (0, 3)

    def test_needs_two_units(self):
        with pytest.raises(NotEnoughUnitsError):
            most_redundant_pair(dense([[1, 0]]))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_exhaustive_search(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 33))
        layer = dense(rng.normal(size=(n, 5)), rng.normal(size=n))
        k, k2, s = most_redundant_pair(layer, 0.05)
        ok, ok2, os_ = oracle_pair(layer.weights, layer.bias, 0.05)
        assert (k, k2) == (ok, ok2)
        assert s == pytest.approx(os_, abs=1e-12)


class TestLayerwiseSplinePrune:
    def test_zero_ratio_unchanged(self):
        net = random_mlp([3, 8, 6, 2], 0)
        pruned, plan = layerwise_spline_prune(net, 0.0)
        assert plan.removals == []
        for a, b in zip(net.linear_layers, pruned.linear_layers):
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_keep_counts(self):
        net = random_mlp([3, 10, 7, 2], 1)
        pruned, plan = layerwise_spline_prune(net, 0.5)
        assert units(pruned) == [5, 4]
        assert [len(k) for k in plan.kept] == [5, 4]

    def test_input_left_untouched(self):
        net = random_mlp([3, 10, 2], 1)
        before = net.layers[0].weights.copy()
        layerwise_spline_prune(net, 0.5)
        np.testing.assert_array_equal(net.layers[0].weights, before)

    def test_victim_is_smaller_norm_member(self):
        # units 0 and 2 are parallel; unit 2 has the smaller row
        layer = dense([[2, 0], [0, 1], [1, 0]], [0.0, 0.7, 0.0])
        _, plan = layerwise_spline_prune(net_from(layer), 1 / 3)
        r = plan.removals[0]
        assert (r.removed, r.partner, r.score) == (2, 0, 0.0)

    def test_two_duplicates_merge_exact(self):
        w = np.array([[0.7, -1.2, 0.4]])
        layer = dense(np.vstack([w, w]), [0.3, 0.3])
        net = net_from(layer, n_out=3)
        pruned, plan = layerwise_spline_prune(net, 0.5, compensation="merge_outgoing")
        assert units(pruned) == [1]
        x = np.random.default_rng(0).normal(size=(1000, 3))
        assert np.abs(pruned.forward(x)[0] - net.forward(x)[0]).max() < 1e-12

    def test_duplicate_inside_wider_net_merge_exact(self):
        net = random_mlp([4, 6, 5, 3], 2)
        net.layers[1].weights[3] = net.layers[1].weights[1]
        net.layers[1].bias[3] = net.layers[1].bias[1]
        pruned, plan = layerwise_spline_prune(net, [0.0, 0.2], compensation="merge_outgoing")
        assert plan.removals[0].score == 0.0
        x = np.random.default_rng(1).normal(size=(1000, 4))
        assert np.abs(pruned.forward(x)[0] - net.forward(x)[0]).max() < 1e-12

    def test_clamp_warns(self):
        net = random_mlp([3, 4, 2], 0)
        pruned, plan = layerwise_spline_prune(net, 1.0)
        assert units(pruned) == [1]
        assert plan.warnings and "keeping 1" in plan.warnings[0]

    def test_zero_row_removed_first(self):
        layer = dense([[1, 0], [0, 0], [0, 1], [1, 1]], [0, 0, 0, 0])
        _, plan = layerwise_spline_prune(net_from(layer), 0.25)
        assert plan.removals[0].removed == 1 and plan.removals[0].partner is None

    def test_greedy_replays_oracle(self):
        """Each removal matches the exhaustive pair search on the shrinking layer."""
        rng = np.random.default_rng(7)
        w, b = rng.normal(size=(12, 4)), rng.normal(size=12)
        _, plan = layerwise_spline_prune(net_from(dense(w, b)), 0.5)
        live = list(range(12))
        for r in plan.removals:
            i, j, s = oracle_pair(w[live], b[live], 0.05)
            ni, nj = np.linalg.norm(w[live[i]]), np.linalg.norm(w[live[j]])
            victim, partner = (live[i], live[j]) if ni < nj else (live[j], live[i])
            assert (r.removed, r.partner) == (victim, partner)
            assert r.score == pytest.approx(s, abs=1e-12)
            live.remove(victim)

    def test_conv_net(self):
        net = toy_convnet((1, 8, 8), 3, seed=0)
        pruned, plan = layerwise_spline_prune(net, 0.5)
        assert units(pruned) == [8, 16]
        out, _ = pruned.forward(np.zeros((2, 1, 8, 8)))
        assert out.shape == (2, 3)


class TestPCA:
    def test_full_rank_is_isometry(self):
        rng = np.random.default_rng(0)
        net = net_from(dense(rng.normal(size=(7, 4))), dense(rng.normal(size=(5, 7))))
        proj = fit_pca_projection(net, 4)
        rows = net.layers[0].weights
        p = proj.project(0, rows)
        c = proj.components[0]
        np.testing.assert_allclose(c @ c.T, np.eye(4), atol=1e-12)
        cos_before = np.abs(rows @ rows.T) / np.outer(np.linalg.norm(rows, axis=1), np.linalg.norm(rows, axis=1))
        cos_after = np.abs(p @ p.T) / np.outer(np.linalg.norm(p, axis=1), np.linalg.norm(p, axis=1))
        np.testing.assert_allclose(cos_after, cos_before, atol=1e-9)

    def test_rank_one_rows_collinear(self):
        v = np.array([1.0, -2.0, 0.5])
        layer = dense(np.outer([1, -3, 2, 0.5], v))
        net = net_from(layer)
        p = fit_pca_projection(net, 2).project(0, layer.weights)
        np.testing.assert_allclose(p[:, 1], 0.0, atol=1e-12)
        p1 = fit_pca_projection(net, 1).project(0, layer.weights)
        np.testing.assert_allclose(np.abs(p1[:, 0]), 1.0, atol=1e-12)

    def test_shared_dimension(self):
        rng = np.random.default_rng(0)
        net = net_from(dense(rng.normal(size=(32, 8))), dense(rng.normal(size=(10, 32))))
        proj = fit_pca_projection(net)
        assert proj.d == 8
        assert proj.project(0, net.layers[0].weights).shape == (32, 8)
        assert proj.project(1, net.layers[1].weights).shape == (10, 8)

    def test_sign_convention(self):
        rng = np.random.default_rng(1)
        net = net_from(dense(rng.normal(size=(6, 5))))
        for row in fit_pca_projection(net, 3).components[0]:
            assert row[np.flatnonzero(np.abs(row) > 1e-12)[0]] > 0

    def test_too_large(self):
        net = net_from(dense(np.eye(3)))
        with pytest.raises(DimensionError):
            fit_pca_projection(net, 4)


def oracle_global(net, ratio, rho, d, steps):
    """Independent greedy replay: SVD-based uncentred PCA, refit after each removal.

    Cross-layer cosines depend on each layer's basis orientation, so the
    components follow the same sign rule: first nonzero entry positive.
    """
    rows = [l.rows() for l in net.hidden_layers]
    biases = [l.bias for l in net.hidden_layers]
    live = [list(range(len(r))) for r in rows]
    log = []
    for _ in range(steps):
        pooled, pb, owner, unit = [], [], [], []
        for l, r in enumerate(rows):
            nr = r[live[l]] / np.linalg.norm(r[live[l]], axis=1, keepdims=True)
            _, _, vt = np.linalg.svd(nr, full_matrices=True)
            comps = vt[:d] * np.sign(vt[:d][np.arange(d), np.argmax(np.abs(vt[:d]) > 1e-12, axis=1)])[:, None]
            pooled.extend(nr @ comps.T)
            pb.extend(biases[l][live[l]])
            owner.extend([l] * len(live[l]))
            unit.extend(live[l])
        allowed = [len(live[o]) > 1 for o in owner]
        i, j, s = oracle_pair(np.array(pooled), np.array(pb), rho, allowed)
        ni, nj = np.linalg.norm(rows[owner[i]][unit[i]]), np.linalg.norm(rows[owner[j]][unit[j]])
        if allowed[i] and allowed[j]:
            v = i if ni < nj else j
        else:
            v = i if allowed[i] else j
        log.append((owner[v], unit[v], s))
        live[owner[v]].remove(unit[v])
    return log


class TestGlobalSplinePrune:
    def test_zero_ratio_unchanged(self):
        net = random_mlp([4, 6, 5, 2], 0)
        pruned, plan = global_spline_prune(net, 0.0)
        assert plan.removals == [] and units(pruned) == [6, 5]

    def test_duplicate_in_second_layer_goes_first(self):
        net = random_mlp([4, 6, 5, 2], 3)
        net.layers[1].weights[4] = net.layers[1].weights[2] * 2.0
        net.layers[1].bias[4] = net.layers[1].bias[2]
        _, plan = global_spline_prune(net, 1 / 11)
        assert len(plan.removals) == 1
        r = plan.removals[0]
        assert (r.layer, r.removed, r.partner, r.score) == (1, 2, 4, 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_exhaustive_replay(self, seed):
        net = random_mlp([5, 7, 9, 2], seed)
        total = 16
        _, plan = global_spline_prune(net, 6 / total, rho=0.05)
        expect = oracle_global(net, 6 / total, 0.05, 5, 6)
        got = [(r.layer, r.removed, r.score) for r in plan.removals]
        assert [g[:2] for g in got] == [e[:2] for e in expect]
        np.testing.assert_allclose([g[2] for g in got], [e[2] for e in expect], atol=1e-9)

    def test_every_layer_keeps_one(self):
        net = random_mlp([3, 4, 4, 2], 0)
        pruned, _ = global_spline_prune(net, 0.99)
        assert min(units(pruned)) >= 1
        assert sum(units(pruned)) == 2

    def test_conv_deterministic(self):
        net = toy_convnet((1, 8, 8), 4, seed=2)
        a, pa = global_spline_prune(net, 0.5)
        b, pb = global_spline_prune(net, 0.5)
        assert pa.kept == pb.kept
        assert sum(units(a)) == 24
        out, _ = a.forward(np.zeros((1, 1, 8, 8)))
        assert out.shape == (1, 4)


class TestMagnitudeAndRandom:
    def test_smallest_norm_removed(self):
        layer = dense([[2, 0], [0.5, -0.5], [1, 2]])
        _, plan = magnitude_prune(net_from(layer), 1 / 3)
        assert plan.kept == [[0, 2]]

    def test_zero_ratio(self):
        _, plan = magnitude_prune(random_mlp([3, 5, 2], 0), 0.0)
        assert plan.removals == []

    def test_ties_remove_lowest_index(self):
        layer = dense([[1, 0], [0, 1], [1, 0], [0, -1]])
        _, plan = magnitude_prune(net_from(layer), 0.5)
        assert plan.kept == [[2, 3]]

    def test_global_scope(self):
        l1 = dense([[5, 5], [0.1, 0], [4, 4]])
        l2 = dense(np.array([[0.2, 0, 0], [3, 3, 3]]))
        _, plan = magnitude_prune(net_from(l1, l2), 0.4, "global")
        assert plan.kept == [[0, 2], [1]]

    def test_random_seeded(self):
        net = random_mlp([3, 10, 8, 2], 0)
        _, a = random_prune(net, 0.5, seed=3)
        _, b = random_prune(net, 0.5, seed=3)
        assert a.kept == b.kept and [len(k) for k in a.kept] == [5, 4]

    def test_unknown_policy(self):
        with pytest.raises(ConfigError):
            prune(random_mlp([3, 4, 2], 0), "biggest", 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["spline", "spline_global", "magnitude", "magnitude_global", "random"]),
       st.floats(0.0, 0.95), st.booleans())
def test_structural_consistency(seed, policy, ratio, conv):
    net = toy_convnet((1, 8, 8), 3, channels=(6, 5), seed=seed) if conv else random_mlp([3, 9, 7, 2], seed)
    pruned, plan = prune(net, policy, ratio, seed=seed)
    counts = units(pruned)
    assert counts == [len(k) for k in plan.kept]
    assert min(counts) >= 1
    x = np.zeros((2, 1, 8, 8)) if conv else np.zeros((2, 3))
    out, _ = pruned.forward(x)
    assert out.shape == (2, net.head.units)
    if policy in ("spline", "magnitude", "random"):
        assert counts == [keep_count(ratio, u) for u in plan.original_units]


class TestPlan:
    def test_json_replay(self):
        net = random_mlp([4, 9, 6, 2], 5)
        pruned, plan = layerwise_spline_prune(net, 0.4, compensation="merge_outgoing")
        replayed = PrunePlan.from_json(plan.to_json()).apply(net)
        x = np.random.default_rng(0).normal(size=(50, 4))
        assert replayed.forward(x)[0].tobytes() == pruned.forward(x)[0].tobytes()

    def test_wrong_network(self):
        _, plan = layerwise_spline_prune(random_mlp([4, 9, 2], 5), 0.4)
        with pytest.raises(AlignmentError):
            plan.apply(random_mlp([4, 8, 2], 5))

    def test_keep_count(self):
        assert keep_count(0.5, 20) == 10
        assert keep_count(0.8, 20) == 4
        assert keep_count(0.95, 20) == 1
        assert keep_count(0.3, 10) == 7
        with pytest.raises(ConfigError):
            keep_count(1.2, 10)


class TestLottery:
    def _pair(self, w_init, w_trained):
        a = Network([Dense(np.array([w_init], float), np.zeros(1), IDENTITY)], (len(w_init),))
        b = Network([Dense(np.array([w_trained], float), np.zeros(1), IDENTITY)], (len(w_init),))
        return a, b

    def test_half(self):
        init, trained = self._pair([10, 20, 30, 40], [1, -3, 2, -0.5])
        out = lottery_mask_and_rewind(init, trained, 0.5)
        np.testing.assert_array_equal(out.layers[0].mask, [[0, 1, 1, 0]])
        np.testing.assert_array_equal(out.layers[0].weights, [[0, 20, 30, 0]])

    def test_full_ratio_is_init(self):
        init, trained = self._pair([10, 20, 30, 40], [1, -3, 2, -0.5])
        out = lottery_mask_and_rewind(init, trained, 1.0)
        assert out.layers[0].mask.all()
        np.testing.assert_array_equal(out.layers[0].weights, init.layers[0].weights)

    def test_architecture_mismatch(self):
        with pytest.raises(AlignmentError):
            lottery_mask_and_rewind(mlp([2, 3, 2]), mlp([2, 4, 2]), 0.5)


class TestProp1:
    def grid(self):
        return make_slice([0, 0], [1, 0], [0, 1], ((-2, 2), (-2, 2)), 60)

    def test_exact_duplicate(self):
        net = random_mlp([2, 5, 2], 0)
        net.layers[0].weights[3] = net.layers[0].weights[1]
        net.layers[0].bias[3] = net.layers[0].bias[1]
        report = verify_prop1(net, 0, 1, 3, self.grid())
        assert report.case == "exact_duplicate" and report.score == 0.0
        assert report.diff_count == 0 and report.holds
        assert report.regions_before == report.regions_after

    def test_antiparallel_zero_bias(self):
        net = random_mlp([2, 5, 2], 0)
        net.layers[0].weights[3] = -net.layers[0].weights[1]
        net.layers[0].bias[1] = net.layers[0].bias[3] = 0.0
        report = verify_prop1(net, 0, 1, 3, self.grid())
        assert report.case == "antiparallel_zero_bias" and report.holds

    def test_antiparallel_with_bias_loses_a_boundary(self):
        net = random_mlp([2, 5, 2], 0)
        net.layers[0].weights[1] = [1.0, 0.0]
        net.layers[0].weights[3] = [-1.0, 0.0]
        net.layers[0].bias[1] = net.layers[0].bias[3] = 0.5
        report = verify_prop1(net, 0, 1, 3, self.grid())
        assert report.score == 0.0 and not report.applicable
        assert report.lost_boundary_edges > 0

    def test_near_duplicate_is_reported(self):
        net = random_mlp([2, 5, 2], 0)
        w = net.layers[0].weights[1]
        t = 1e-3
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        net.layers[0].weights[3] = rot @ w
        net.layers[0].bias[3] = net.layers[0].bias[1]
        report = verify_prop1(net, 0, 1, 3, self.grid())
        assert report.case == "inapplicable"
        assert report.score == pytest.approx(1 - np.cos(t), rel=1e-3)
        assert report.diff_count >= 0

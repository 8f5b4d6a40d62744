import json
from dataclasses import replace

import numpy as np
import pytest

from hyperrec import grad, hypgeo, model, objective
from hyperrec.model import COMPLETE, VariantWiring
from hyperrec.objective import LossBreakdown, TripletBatch
from hyperrec.trainer import TrainConfig

# Frozen reference: c=1, basepoint 0, x=(0.2,0), y=(-0.2,0).  The mapped pair
# is radial through the origin, so the ball distance is exactly 0.8 and the
# relative gap against the Euclidean distance 0.4 is exactly 1.
ADJ_RADIAL_CASE = 1.0


def small_tables(rng, dim=4, feat_dim=3, n_users=4, n_items=8):
    t = model.init_tables(n_users, n_items, dim, feat_dim, rng)
    t.b_hidden[:] = rng.normal(0, 0.2, dim)
    t.w_out[:] = rng.normal(0, 0.2, dim)
    t.b_out[...] = rng.normal()
    t.basepoint[:] = rng.uniform(-0.05, 0.05, dim)
    return t


def batch_for(tables, rng, size=2, width=3):
    neighbors = rng.integers(0, tables.n_items, (size, width))
    mask = np.ones((size, width))
    mask[-1, -1] = 0.0
    return TripletBatch(
        users=rng.integers(0, tables.n_users, size),
        pos=rng.integers(0, tables.n_items, size),
        neg=rng.integers(0, tables.n_items, size),
        neighbors=neighbors,
        neighbor_mask=mask,
        neighbor_feats=rng.normal(size=(size, width, tables.feat_dim)),
    )


class TestHypTripletLoss:
    def test_hinge_boundary_is_zero(self):
        # place positive and negative so d_pos^2 - d_neg^2 = -margin exactly
        c = 1.0
        v_pos = np.array([0.1, 0.0])
        v_neg = np.array([0.3, 0.0])
        profile = np.zeros(2)
        dp = hypgeo.hyp_distance(hypgeo.exp_map(np.zeros(2), profile, c),
                                 hypgeo.exp_map(np.zeros(2), v_pos, c), c)
        dn = hypgeo.hyp_distance(hypgeo.exp_map(np.zeros(2), profile, c),
                                 hypgeo.exp_map(np.zeros(2), v_neg, c), c)
        margin = float(dn * dn - dp * dp)
        out = objective.hyp_triplet_loss(profile, v_pos, v_neg, c, margin)
        assert out == 0.0

    def test_equal_distances_return_margin(self):
        v = np.array([0.2, 0.1])
        out = objective.hyp_triplet_loss(np.zeros(2), v, v.copy(), c=1.0, margin=0.5)
        assert out == pytest.approx(0.5, abs=1e-12)

    def test_matches_kernel_composition(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            profile = rng.uniform(-0.3, 0.3, 5)
            v_pos = rng.uniform(-0.3, 0.3, 5)
            v_neg = rng.uniform(-0.3, 0.3, 5)
            q = rng.uniform(-0.1, 0.1, 5)
            c, m = 1.3, 0.5
            mapped = hypgeo.exp_map(q, profile, c)
            dp = hypgeo.hyp_distance(mapped, hypgeo.exp_map(q, v_pos, c), c)
            dn = hypgeo.hyp_distance(mapped, hypgeo.exp_map(q, v_neg, c), c)
            expected = max(0.0, m + dp * dp - dn * dn)
            got = objective.hyp_triplet_loss(profile, v_pos, v_neg, c, m, basepoint=q)
            assert got == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_both_distances(self):
        profile = np.zeros(2)
        base_pos = np.array([0.1, 0.0])
        base_neg = np.array([0.2, 0.0])
        base = objective.hyp_triplet_loss(profile, base_pos, base_neg, 1.0, 2.0)
        farther_neg = objective.hyp_triplet_loss(profile, base_pos, base_neg * 1.5, 1.0, 2.0)
        farther_pos = objective.hyp_triplet_loss(profile, base_pos * 1.5, base_neg, 1.0, 2.0)
        assert farther_neg <= base
        assert farther_pos >= base

    def test_positive_margin_required(self):
        from hyperrec.errors import InvalidInputError

        with pytest.raises(InvalidInputError):
            objective.hyp_triplet_loss(np.zeros(2), np.zeros(2), np.zeros(2), 1.0, 0.0)


class TestAdjTerm:
    def test_identical_points_zero(self):
        x = np.array([0.3, -0.2])
        assert objective.adj_term(x, x.copy(), c=1.0) == 0.0

    def test_radial_pair_reference_value(self):
        out = objective.adj_term(np.array([0.2, 0.0]), np.array([-0.2, 0.0]), c=1.0)
        assert out == pytest.approx(ADJ_RADIAL_CASE, abs=1e-12)

    def test_swap_symmetric(self):
        rng = np.random.default_rng(22)
        for _ in range(30):
            x = rng.uniform(-0.4, 0.4, 3)
            y = rng.uniform(-0.4, 0.4, 3)
            q = rng.uniform(-0.1, 0.1, 3)
            assert objective.adj_term(x, y, 1.0, basepoint=q) == pytest.approx(
                objective.adj_term(y, x, 1.0, basepoint=q), abs=1e-12
            )

    def test_non_negative(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            x = rng.uniform(-0.5, 0.5, 4)
            y = rng.uniform(-0.5, 0.5, 4)
            assert objective.adj_term(x, y, 0.7) >= 0.0


class TestRegNorm:
    def test_zero_tables(self):
        rng = np.random.default_rng(24)
        t = small_tables(rng)
        for _, tensor in t.named():
            tensor[...] = 0.0
        assert objective.reg_norm(t) == 0.0

    def test_single_entry(self):
        rng = np.random.default_rng(25)
        t = small_tables(rng)
        for _, tensor in t.named():
            tensor[...] = 0.0
        t.user[0, 0] = 3.0
        assert objective.reg_norm(t) == 9.0

    def test_flatten_and_sum_oracle(self):
        rng = np.random.default_rng(26)
        t = small_tables(rng)
        expected = sum(float(np.sum(np.asarray(v) ** 2)) for _, v in t.named())
        assert objective.reg_norm(t) == pytest.approx(expected, abs=1e-9)


class TestTotalLoss:
    def test_no_adj_wiring_drops_adjustment(self):
        rng = np.random.default_rng(27)
        t = small_tables(rng)
        batch = batch_for(t, rng)
        cfg = TrainConfig(dim=t.dim, gamma=0.5, reg_lambda=0.01, neighbors=3)
        out = objective.total_loss(t, batch, cfg, VariantWiring(adjustment=False))
        assert out.adj == 0.0
        assert out.total == pytest.approx(out.hyp + cfg.reg_lambda * out.reg, abs=1e-9)

    def test_degenerate_batch_reaches_exact_zero(self):
        rng = np.random.default_rng(28)
        t = small_tables(rng)
        # profile of user 0 equals both items: u/2 == item row, no neighbors
        t.item[1] = rng.uniform(-0.2, 0.2, t.dim)
        t.item[2] = t.item[1]
        t.user[0] = 2.0 * t.item[1]
        batch = TripletBatch(
            users=np.array([0]),
            pos=np.array([1]),
            neg=np.array([2]),
            neighbors=np.zeros((1, 1), dtype=np.int64),
            neighbor_mask=np.zeros((1, 1)),
            neighbor_feats=np.zeros((1, 1, t.feat_dim)),
        )
        cfg = replace(TrainConfig(dim=t.dim, gamma=0.5, reg_lambda=0.0, neighbors=1),
                      margin=0.0)
        out = objective.total_loss(t, batch, cfg)
        assert out.total == 0.0
        assert out.hyp == 0.0 and out.adj == 0.0

    def test_two_triplet_batch_matches_hand_sum(self):
        rng = np.random.default_rng(29)
        t = small_tables(rng)
        batch = batch_for(t, rng, size=2, width=3)
        cfg = TrainConfig(dim=t.dim, gamma=0.7, reg_lambda=0.03, margin=0.5, neighbors=3)
        tau = model.attention_temperature(t.dim)

        hyp_sum = adj_sum = 0.0
        for k in range(2):
            live = batch.neighbor_mask[k] > 0
            sample = batch.neighbors[k][live]
            logits = model.attention_logits(
                t, int(batch.users[k]), sample, batch.neighbor_feats[k][live]
            )
            weights = model.attention_weights(logits, tau)
            profile = model.aggregate_user(t, int(batch.users[k]), sample, weights)
            v_pos = t.item[batch.pos[k]]
            v_neg = t.item[batch.neg[k]]
            hyp_sum += objective.hyp_triplet_loss(
                profile, v_pos, v_neg, cfg.curvature, cfg.margin, basepoint=t.basepoint
            )
            adj_sum += objective.adj_term(profile, v_pos, cfg.curvature, basepoint=t.basepoint)
            adj_sum += objective.adj_term(profile, v_neg, cfg.curvature, basepoint=t.basepoint)
        expected_total = hyp_sum + cfg.gamma * adj_sum + cfg.reg_lambda * objective.reg_norm(t)

        out = objective.total_loss(t, batch, cfg)
        assert out.hyp == pytest.approx(hyp_sum, abs=1e-10)
        assert out.adj == pytest.approx(adj_sum, abs=1e-10)
        assert out.total == pytest.approx(expected_total, abs=1e-10)

    def test_breakdown_invariant_and_active_fraction(self):
        rng = np.random.default_rng(30)
        t = small_tables(rng)
        batch = batch_for(t, rng, size=8, width=3)
        cfg = TrainConfig(dim=t.dim, neighbors=3)
        out = objective.total_loss(t, batch, cfg)
        assert out.total == pytest.approx(
            out.hyp + cfg.gamma * out.adj + cfg.reg_lambda * out.reg, abs=1e-9
        )
        assert out.hyp >= 0 and out.adj >= 0 and out.reg >= 0
        assert 0.0 <= out.margin_active_fraction <= 1.0

    def test_bitwise_reproducible(self):
        rng = np.random.default_rng(31)
        t = small_tables(rng)
        batch = batch_for(t, rng, size=4, width=2)
        cfg = TrainConfig(dim=t.dim, gamma=0.5, curvature=1.0, margin=0.5, neighbors=2)
        a = objective.total_loss(t, batch, cfg)
        b = objective.total_loss(t, batch, cfg)
        assert (a.hyp, a.adj, a.reg, a.total) == (b.hyp, b.adj, b.reg, b.total)

    def test_json_line_shape(self):
        line = LossBreakdown(1.0, 2.0, 3.0, 4.0, 0.25).json_line(7)
        record = json.loads(line)
        assert record == {"step": 7, "hyp": 1.0, "adj": 2.0, "reg": 3.0,
                          "total": 4.0, "active": 0.25}

    def test_empty_batch_rejected(self):
        from hyperrec.errors import InvalidInputError

        rng = np.random.default_rng(32)
        t = small_tables(rng)
        empty = TripletBatch(
            users=np.zeros(0, dtype=np.int64),
            pos=np.zeros(0, dtype=np.int64),
            neg=np.zeros(0, dtype=np.int64),
            neighbors=np.zeros((0, 1), dtype=np.int64),
            neighbor_mask=np.zeros((0, 1)),
            neighbor_feats=np.zeros((0, 1, t.feat_dim)),
        )
        with pytest.raises(InvalidInputError):
            objective.total_loss(t, empty, TrainConfig(dim=t.dim))


class TestFullModelGradient:
    def test_every_parameter_matches_finite_differences(self, toy_gradient_setup):
        params, batch, cfg = toy_gradient_setup

        def loss_fn(tape, vars_):
            return objective.build_loss(tape, vars_, batch, cfg, COMPLETE).total

        err = grad.finite_diff_check(loss_fn, params)
        assert err < 1e-4, f"worst relative gradient error {err:.3e}"

    def test_gradients_flow_to_every_tensor(self, toy_gradient_setup):
        params, batch, cfg = toy_gradient_setup
        tape = grad.Tape()
        vars_ = {k: tape.leaf(v, name=k) for k, v in params.items()}
        terms = objective.build_loss(tape, vars_, batch, cfg, COMPLETE)
        grads = grad.backward(tape, terms.total)
        for name, g in grads.items():
            assert np.any(g != 0.0), f"no gradient reached {name}"

import math

import numpy as np
import pytest

from queryshift.errors import (
    EmptyBatchError,
    NonPositiveThresholdError,
    SizeMismatchError,
    TooFewCandidatesError,
)
from queryshift.gallery import Gallery, build_centroids
from queryshift.losses import (
    ConsistencyPair,
    _gap_grad,
    _rem_grad,
    _rhm_grad,
    _uniformity_grad,
    consistency_pair,
    finite_diff_grad,
    forward_state,
    gradient_check,
    hard_negative_slots,
    loss_em,
    loss_gap,
    loss_rem,
    loss_rhm,
    loss_uniformity,
    param_grad,
    positives_mean,
    rem_weights,
    total_loss_and_grad,
)
from queryshift.refine import (
    CandidateSet,
    ConstraintEstimates,
    RefinedPrediction,
    build_candidate_sets,
)
from queryshift.vectors import l2_normalize_rows


def make_pred(probs):
    probs = np.asarray(probs, dtype=np.float64)
    h = float(-(probs[probs > 0] * np.log(probs[probs > 0])).sum())
    return RefinedPrediction(probs=probs, entropy=h, positive_prob=float(probs[0]))


def make_instance(seed=0, b=6, d=8, n=40, k=3, tau=0.5):
    rng = np.random.default_rng(seed)
    gallery = Gallery(l2_normalize_rows(rng.standard_normal((n, d))))
    cents = build_centroids(gallery, k, seed)
    raw = rng.standard_normal((b, d))
    gamma = 1.0 + 0.1 * rng.standard_normal(d)
    beta = 0.1 * rng.standard_normal(d)
    from queryshift.losses import affine_normalize

    _, _, z = affine_normalize(gamma, beta, raw)
    cands = build_candidate_sets(z, gallery, cents, k)
    cand_embs = [c.candidate_embeddings for c in cands]
    state = forward_state(gamma, beta, raw, cand_embs, tau)
    return state, raw, cand_embs, gallery


class TestLossUniformity:
    def test_collapsed_batch_is_one(self):
        z = np.tile(np.array([1.0, 0.0]), (4, 1))
        assert loss_uniformity(z) == pytest.approx(1.0)

    def test_antipodal_pair(self):
        z = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert loss_uniformity(z) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_decreases_after_spreading(self):
        from queryshift.synth import scale_queries

        rng = np.random.default_rng(2)
        z = l2_normalize_rows(rng.standard_normal((8, 6)) + 3.0)
        spread = scale_queries(z, 1.5)
        assert loss_uniformity(spread) < loss_uniformity(z)

    def test_empty_raises(self):
        with pytest.raises(EmptyBatchError):
            loss_uniformity(np.empty((0, 3)))

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = l2_normalize_rows(rng.standard_normal((5, 4)))
            assert 0.0 < loss_uniformity(z) <= 1.0


class TestLossGap:
    def test_rectified_gap_is_zero(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        delta_t = 0.0
        assert loss_gap(z, z, delta_t) == pytest.approx(0.0)

    def test_arithmetic(self):
        # Construct batches whose means are 0.5 apart, with delta_s = 0.2.
        z_q = np.array([[1.0, 0.0], [0.0, 0.0]])
        z_pos = np.array([[0.0, 0.0], [0.0, 0.0]])
        assert loss_gap(z_q, z_pos, 0.2) == pytest.approx((0.5 - 0.2) ** 2)

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatchError):
            loss_gap(np.ones((2, 2)), np.ones((3, 2)), 0.1)

    def test_descent_drives_gap_to_target(self):
        # Gradient-descent trace on the gap term alone: |gap - target| must
        # shrink monotonically for small steps.
        state, raw, cand_embs, _ = make_instance(seed=4)
        delta_s = 0.05
        gamma, beta = state.gamma.copy(), state.beta.copy()
        gaps = []
        for _ in range(25):
            st = forward_state(gamma, beta, raw, cand_embs, state.tau)
            pos_mean = positives_mean(st)
            val, dz = _gap_grad(st.z, pos_mean, delta_s)
            gaps.append(abs(math.sqrt(val)))
            g = param_grad(st, dz)
            gamma -= 0.05 * g.d_gamma
            beta -= 0.05 * g.d_beta
        assert all(gaps[i + 1] <= gaps[i] + 1e-12 for i in range(len(gaps) - 1))
        assert gaps[-1] < gaps[0]


class TestLossRem:
    def test_single_term_arithmetic(self):
        # Handmade prediction pins the entropy to the example value.
        pred = RefinedPrediction(probs=np.array([0.9, 0.1]), entropy=0.2, positive_prob=0.9)
        loss, w = loss_rem([pred], 0.8)
        assert w[0] == pytest.approx(0.75)
        assert loss == pytest.approx(0.15)

    def test_fully_filtered_batch_is_zero(self):
        preds = [
            RefinedPrediction(probs=np.array([0.5, 0.5]), entropy=0.9, positive_prob=0.5)
            for _ in range(3)
        ]
        loss, w = loss_rem(preds, 0.8)
        assert loss == 0.0
        assert np.all(w == 0.0)

    def test_partial_filtering(self):
        preds = [
            RefinedPrediction(probs=np.array([1.0]), entropy=0.2, positive_prob=1.0),
            RefinedPrediction(probs=np.array([1.0]), entropy=0.9, positive_prob=1.0),
        ]
        loss, w = loss_rem(preds, 0.8)
        assert loss == pytest.approx(0.75 * 0.2 / 1)

    def test_non_positive_threshold(self):
        with pytest.raises(NonPositiveThresholdError):
            loss_rem([make_pred([1.0])], 0.0)

    def test_bounds_and_permutation_invariance(self):
        rng = np.random.default_rng(6)
        preds = [make_pred(rng.dirichlet(np.ones(5))) for _ in range(8)]
        e_b = 1.1 * float(np.median([p.entropy for p in preds]))
        loss, w = loss_rem(preds, e_b)
        assert 0.0 <= loss <= max(p.entropy for p in preds)
        assert np.all((w >= 0.0) & (w < 1.0))
        loss_rev, _ = loss_rem(preds[::-1], e_b)
        assert loss == pytest.approx(loss_rev, abs=1e-12)


class TestLossRhm:
    def test_equal_consistencies_zero(self):
        pred = RefinedPrediction(probs=np.array([1.0]), entropy=0.1, positive_prob=1.0)
        pair = ConsistencyPair(c_pos=0.6, c_hardneg=0.6, hardneg_slot=1)
        assert loss_rhm([pred], [pair], 0.8) == pytest.approx(0.0)

    def test_hand_value(self):
        pred = RefinedPrediction(probs=np.array([1.0]), entropy=0.0, positive_prob=1.0)
        pair = ConsistencyPair(c_pos=0.8, c_hardneg=0.4, hardneg_slot=1)
        # Weight is exactly 1 at zero entropy; H = ln(0.4) - ln(0.8) = ln(1/2).
        assert loss_rhm([pred], [pair], 0.8) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_swapped_pair_flips_sign(self):
        pred = RefinedPrediction(probs=np.array([1.0]), entropy=0.0, positive_prob=1.0)
        pair = ConsistencyPair(c_pos=0.4, c_hardneg=0.8, hardneg_slot=1)
        assert loss_rhm([pred], [pair], 0.8) == pytest.approx(-math.log(0.5), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(7)
        preds, pairs = [], []
        for _ in range(6):
            preds.append(make_pred(rng.dirichlet(np.ones(4))))
            c = rng.uniform(0.1, 1.0, size=2)
            pairs.append(ConsistencyPair(float(c[0]), float(c[1]), 1))
        e_b = 1.1 * float(np.median([p.entropy for p in preds]))
        a = loss_rhm(preds, pairs, e_b)
        b = loss_rhm(preds[::-1], pairs[::-1], e_b)
        assert a == pytest.approx(b, abs=1e-12)


class TestConsistencyPair:
    def test_exact_positive(self):
        q = np.array([1.0, 0.0])
        cs = CandidateSet(0, 0, (1,), np.array([[1.0, 0.0], [0.0, 1.0]]))
        pair = consistency_pair(q, cs)
        assert pair.c_pos == pytest.approx(1.0)

    def test_orthogonal_negative_is_half(self):
        q = np.array([1.0, 0.0])
        cs = CandidateSet(0, 0, (1,), np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert consistency_pair(q, cs).c_hardneg == pytest.approx(0.5)

    def test_argmax_slot(self):
        q = np.array([1.0, 0.0, 0.0])
        cands = np.array(
            [
                [1.0, 0.0, 0.0],
                [0.2, math.sqrt(1 - 0.04), 0.0],
                [0.9, math.sqrt(1 - 0.81), 0.0],
                [0.4, math.sqrt(1 - 0.16), 0.0],
            ]
        )
        pair = consistency_pair(q, CandidateSet(0, 0, (1, 2, 3), cands))
        assert pair.hardneg_slot == 2

    def test_too_few_candidates(self):
        with pytest.raises(TooFewCandidatesError):
            consistency_pair(np.array([1.0, 0.0]), CandidateSet(0, 0, (), np.array([[1.0, 0.0]])))


class TestLossEm:
    def test_one_hot_zero(self):
        preds = [make_pred([1.0, 0.0, 0.0])]
        assert loss_em(preds) == 0.0

    def test_uniform(self):
        preds = [make_pred([0.25] * 4)]
        assert loss_em(preds) == pytest.approx(math.log(4), abs=1e-12)

    def test_entropy_derivative_favors_easy_negatives(self):
        # d/dp of the entropy summand is -(ln p + 1); compare magnitudes.
        d = lambda p: abs(-(math.log(p) + 1.0))
        assert d(0.1) == pytest.approx(1.3026, abs=1e-4)
        assert d(0.3) == pytest.approx(0.2040, abs=1e-4)
        assert d(0.1) > d(0.3)

    def test_easy_negative_gradient_dominates_bulk(self):
        rng = np.random.default_rng(8)
        limit = 1.0 / math.e
        p_m = rng.uniform(1e-6, limit, size=10_000)
        p_n = rng.uniform(p_m, limit)
        keep = p_m < p_n
        g = lambda p: np.abs(-(np.log(p) + 1.0))
        assert np.all(g(p_m[keep]) > g(p_n[keep]))


class TestFiniteDiffGrad:
    def test_quadratic(self):
        theta = np.array([1.0, -2.0, 0.5])
        grad = finite_diff_grad(lambda t: float(t @ t), theta)
        np.testing.assert_allclose(grad, 2 * theta, atol=1e-6)

    def test_linear(self):
        c = np.array([3.0, -1.0, 0.25])
        grad = finite_diff_grad(lambda t: float(c @ t), np.zeros(3))
        np.testing.assert_allclose(grad, c, atol=1e-8)

    def test_step_size_validated(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: 0.0, np.zeros(2), h=1.0)


class TestTotalLossAndGrad:
    def test_zero_learning_signal(self):
        # Identical queries, all weights filtered, gap already matching: the
        # uniformity term sits at its maximum and everything else vanishes.
        d = 6
        raw = np.tile(np.linspace(0.2, 1.0, d), (4, 1))
        gallery = Gallery(l2_normalize_rows(np.random.default_rng(9).standard_normal((20, d))))
        cents = build_centroids(gallery, 3, seed=0)
        from queryshift.losses import affine_normalize

        gamma, beta = np.ones(d), np.zeros(d)
        _, _, z = affine_normalize(gamma, beta, raw)
        cands = build_candidate_sets(z, gallery, cents, 3)
        state = forward_state(gamma, beta, raw, [c.candidate_embeddings for c in cands], 0.5)
        delta_t = float(np.linalg.norm(state.z.mean(axis=0) - positives_mean(state)))
        constraints = ConstraintEstimates(gap_source=delta_t, entropy_threshold=1e-9)
        breakdown, grad = total_loss_and_grad(state, constraints)
        assert breakdown.l_u == pytest.approx(1.0)
        assert breakdown.l_g == pytest.approx(0.0, abs=1e-18)
        assert breakdown.l_rem == 0.0
        assert breakdown.l_rhm == 0.0
        assert breakdown.active_count == 0
        np.testing.assert_allclose(grad.flat(), 0.0, atol=1e-12)

    def test_breakdown_sums(self):
        state, _, _, _ = make_instance(seed=10)
        e_b = 1.2 * float(np.median(state.entropies))
        constraints = ConstraintEstimates(gap_source=0.1, entropy_threshold=e_b)
        breakdown, _ = total_loss_and_grad(state, constraints)
        assert breakdown.l_total == pytest.approx(
            breakdown.l_u + breakdown.l_g + breakdown.l_rem + breakdown.l_rhm, abs=1e-9
        )
        assert 0.0 < breakdown.l_u <= 1.0
        assert breakdown.l_g >= 0.0

    def test_matches_finite_differences(self):
        state, raw, cand_embs, _ = make_instance(seed=11, b=8, d=16, k=4)
        e_b = 1.2 * float(np.median(state.entropies))
        constraints = ConstraintEstimates(gap_source=0.1, entropy_threshold=e_b)
        _, grad = total_loss_and_grad(state, constraints)

        w = rem_weights(state.entropies, e_b)
        n_act = int(np.count_nonzero(w))
        slots = hard_negative_slots(state)
        pos_mean = positives_mean(state)
        d = state.dim

        def frozen_total(theta):
            st = forward_state(theta[:d], theta[d:], raw, cand_embs, state.tau)
            return (
                _uniformity_grad(st.z)[0]
                + _gap_grad(st.z, pos_mean, 0.1)[0]
                + _rem_grad(st, w, n_act)[0]
                + _rhm_grad(st, w, n_act, slots)[0]
            )

        theta0 = np.concatenate([state.gamma, state.beta])
        numeric = finite_diff_grad(frozen_total, theta0)
        scale = max(np.abs(grad.flat()).max(), np.abs(numeric).max(), 1e-8)
        assert np.abs(grad.flat() - numeric).max() / scale < 1e-4

    def test_uniformity_gradient_points_to_spread(self):
        # Stepping against the uniformity gradient must increase the spread.
        d = 5
        rng = np.random.default_rng(12)
        raw = rng.standard_normal((2, d)) * 0.5 + np.array([1.0] + [0.0] * (d - 1))
        gamma, beta = np.ones(d), np.zeros(d)
        from queryshift.losses import affine_normalize
        from queryshift.synth import metric_uniformity

        _, _, z = affine_normalize(gamma, beta, raw)
        state = forward_state(gamma, beta, raw, [z[:1], z[1:]], 0.5)
        val, dz = _uniformity_grad(state.z)
        g = param_grad(state, dz)
        before = metric_uniformity(state.z)
        gamma2 = gamma - 0.05 * g.d_gamma
        beta2 = beta - 0.05 * g.d_beta
        _, _, z2 = affine_normalize(gamma2, beta2, raw)
        assert metric_uniformity(z2) > before

    def test_all_filtered_no_numerical_faults(self):
        state, _, _, _ = make_instance(seed=13)
        constraints = ConstraintEstimates(gap_source=0.3, entropy_threshold=1e-12)
        breakdown, grad = total_loss_and_grad(state, constraints)
        assert breakdown.l_rem == 0.0 and breakdown.l_rhm == 0.0
        assert np.all(np.isfinite(grad.flat()))


class TestGradientCheckHarness:
    def test_default_passes(self):
        report = gradient_check(seed=1, dims=(8,), instances=3)
        assert report["passed"]

    def test_perturbed_fails(self):
        report = gradient_check(seed=1, dims=(8,), instances=1, perturb=1e-2)
        assert not report["passed"]

    def test_minimal_dimension(self):
        report = gradient_check(seed=2, dims=(1,), instances=3)
        assert report["passed"]

    def test_per_loss_agreement_sweep(self):
        report = gradient_check(seed=3, dims=(8,), instances=20, b=6, k=3)
        for term, err in report["targets"].items():
            assert err < 1e-4, f"{term} off by {err}"

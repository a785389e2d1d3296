"""Hidden Markov chains over wavelet scales: EM, likelihood, and decoding.

The decoding and likelihood tests work against brute-force path enumeration,
which is tractable because chains run over scales (short) rather than
channels (long).
"""

import itertools

import numpy as np
import pytest

from endmix.nhmc import (
    EmConfig,
    FeatureLabelMatrix,
    NhmcModel,
    NhmcOffsetModel,
    label_features,
    log_likelihood,
    merged_chain,
    train_nhmc,
)
from endmix.wavelet import WaveletMatrix, uwt


def random_model(rng, n_offsets, n_scales, k) -> NhmcModel:
    """A valid random chain model: simplex initials, column-stochastic
    transitions, ascending variances."""
    init = rng.dirichlet(np.ones(k), size=n_offsets)
    trans = rng.dirichlet(np.ones(k), size=(n_offsets, n_scales - 1, k))
    trans = np.swapaxes(trans, -1, -2)  # columns are distributions
    var = np.sort(rng.uniform(0.05, 4.0, size=(n_offsets, n_scales, k)), axis=-1)
    return NhmcModel(init, trans, var)


def random_matrix(rng, n_scales, n_channels) -> WaveletMatrix:
    return WaveletMatrix(rng.standard_normal((n_scales, n_channels)))


def enumerate_merged_paths(chain, column):
    """Score every binary path through a merged chain; return (best, scores)."""
    log_e = chain.log_emissions(column)
    n_s = chain.n_scales
    best_path, best_score = None, -np.inf
    for path in itertools.product((0, 1), repeat=n_s):
        score = chain.log_initial[path[0]] + log_e[0, path[0]]
        for s in range(1, n_s):
            score += chain.log_transitions[s - 1, path[s], path[s - 1]]
            score += log_e[s, path[s]]
        if score > best_score:
            best_score, best_path = score, path
    return np.asarray(best_path), best_score


def brute_force_log_likelihood(offset: NhmcOffsetModel, column: np.ndarray) -> float:
    """Total density by summing the joint over every state path."""
    k = offset.n_states
    n_s = offset.n_scales
    total = 0.0
    for path in itertools.product(range(k), repeat=n_s):
        p = offset.initial_probs[path[0]]
        for s in range(1, n_s):
            p *= offset.transitions[s - 1, path[s], path[s - 1]]
        for s in range(n_s):
            v = offset.variances[s, path[s]]
            p *= np.exp(-0.5 * column[s] ** 2 / v) / np.sqrt(2 * np.pi * v)
        total += p
    return float(np.log(total))


class TestViterbiAgainstEnumeration:
    def test_merged_decode_matches_exhaustive_argmax(self):
        rng = np.random.default_rng(42)
        for trial in range(40):
            n_s = int(rng.integers(2, 7))
            n_l = int(rng.integers(2, 6))
            k = int(rng.integers(2, 5))
            model = random_model(rng, n_l, n_s, k)
            matrix = random_matrix(rng, n_s, n_l)
            got = label_features(model, matrix, method="merged").labels
            for l in range(n_l):
                chain = merged_chain(model, l)
                want, _ = enumerate_merged_paths(chain, matrix.coeffs[:, l])
                np.testing.assert_array_equal(got[:, l], want)

    def test_full_decode_matches_exhaustive_argmax(self):
        rng = np.random.default_rng(43)
        for trial in range(20):
            n_s, n_l, k = 4, 3, int(rng.integers(2, 4))
            model = random_model(rng, n_l, n_s, k)
            matrix = random_matrix(rng, n_s, n_l)
            got = label_features(model, matrix, method="full").labels
            for l in range(n_l):
                off = model.offset_model(l)
                col = matrix.coeffs[:, l]
                best_path, best = None, -np.inf
                for path in itertools.product(range(k), repeat=n_s):
                    s0 = np.log(off.initial_probs[path[0]])
                    for s in range(1, n_s):
                        s0 += np.log(off.transitions[s - 1, path[s], path[s - 1]])
                    for s in range(n_s):
                        v = off.variances[s, path[s]]
                        s0 += -0.5 * col[s] ** 2 / v - 0.5 * np.log(2 * np.pi * v)
                    if s0 > best:
                        best, best_path = s0, path
                np.testing.assert_array_equal(
                    got[:, l], (np.asarray(best_path) > 0).astype(np.uint8)
                )

    def test_merged_equals_full_for_two_states(self):
        # with k=2 the Large group is a single state, so merging is exact
        rng = np.random.default_rng(44)
        for trial in range(20):
            model = random_model(rng, 4, 5, 2)
            matrix = random_matrix(rng, 5, 4)
            a = label_features(model, matrix, method="merged").labels
            b = label_features(model, matrix, method="full").labels
            np.testing.assert_array_equal(a, b)

    def test_unknown_method_rejected(self):
        rng = np.random.default_rng(45)
        model = random_model(rng, 2, 3, 2)
        with pytest.raises(ValueError, match="method"):
            label_features(model, random_matrix(rng, 3, 2), method="soft")


class TestLikelihoodAgainstPathSum:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(46)
        for trial in range(100):
            model = random_model(rng, 3, 3, 2)
            matrix = random_matrix(rng, 3, 3)
            want = sum(
                brute_force_log_likelihood(model.offset_model(l), matrix.coeffs[:, l])
                for l in range(3)
            )
            got = log_likelihood(model, matrix)
            assert got == pytest.approx(want, abs=1e-10)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(47)
        model = random_model(rng, 3, 3, 2)
        with pytest.raises(ValueError):
            log_likelihood(model, random_matrix(rng, 4, 3))
        with pytest.raises(ValueError):
            log_likelihood(model, random_matrix(rng, 3, 5))


class TestEmTraining:
    def setup_method(self):
        rng = np.random.default_rng(48)
        # coefficients whose per-scale spread mixes two regimes, so a
        # 2-state fit is well posed; enough samples that EM does not
        # wander long likelihood ridges
        mats = []
        for _ in range(40):
            big = rng.standard_normal((4, 16)) * 2.0
            small = rng.standard_normal((4, 16)) * 0.1
            pick = rng.uniform(size=(4, 16)) < 0.3
            mats.append(WaveletMatrix(np.where(pick, big, small)))
        self.matrices = mats

    def test_monotone_log_likelihood(self):
        model = train_nhmc(self.matrices, 2, EmConfig(max_iters=60))
        assert model.training is not None
        for hist in model.training.ll_history:
            diffs = np.diff(hist)
            assert diffs.min() >= -1e-9

    def test_model_is_valid_and_labeled_deterministically(self):
        model = train_nhmc(self.matrices, 2, EmConfig(max_iters=40))
        model.validate()  # stochasticity + variance ordering
        labels_a = label_features(model, self.matrices[0]).labels
        labels_b = label_features(model, self.matrices[0]).labels
        np.testing.assert_array_equal(labels_a, labels_b)

    def test_variances_sorted_ascending(self):
        model = train_nhmc(self.matrices, 3, EmConfig(max_iters=30))
        assert np.all(np.diff(model.variances, axis=-1) >= 0)

    def test_converges_within_budget_on_easy_data(self):
        model = train_nhmc(self.matrices, 2, EmConfig(tol=1e-5, max_iters=200))
        assert model.training.iterations.max() < 200

    def test_variance_floor_positive(self):
        model = train_nhmc(self.matrices, 2, EmConfig(max_iters=5))
        assert np.all(model.training.variance_floors > 0)
        assert np.all(model.variances >= model.training.variance_floors[:, None, None])

    def test_history_can_be_disabled(self):
        cfg = EmConfig(max_iters=5, record_history=False)
        model = train_nhmc(self.matrices, 2, cfg)
        assert model.training.ll_history is None

    def test_requires_consistent_shapes(self):
        rng = np.random.default_rng(49)
        bad = self.matrices[:3] + [WaveletMatrix(rng.standard_normal((4, 8)))]
        with pytest.raises(ValueError):
            train_nhmc(bad, 2)

    def test_requires_at_least_two_states(self):
        with pytest.raises(ValueError):
            train_nhmc(self.matrices, 1)


class TestModelStructures:
    def test_offset_model_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            NhmcOffsetModel(
                np.array([0.6, 0.6]),
                np.full((1, 2, 2), 0.5),
                np.array([[0.1, 0.2], [0.1, 0.2]]),
            )
        with pytest.raises(ValueError, match="columns"):
            NhmcOffsetModel(
                np.array([0.5, 0.5]),
                np.array([[[0.9, 0.9], [0.3, 0.3]]]),
                np.array([[0.1, 0.2], [0.1, 0.2]]),
            )
        with pytest.raises(ValueError, match="nondecreasing"):
            NhmcOffsetModel(
                np.array([0.5, 0.5]),
                np.full((1, 2, 2), 0.5),
                np.array([[0.2, 0.1], [0.1, 0.2]]),
            )

    def test_label_matrix_validation_and_flatten(self):
        m = FeatureLabelMatrix(np.array([[0, 1, 1], [1, 0, 0]]))
        assert m.labels.dtype == np.uint8
        np.testing.assert_array_equal(m.flatten(), [0, 1, 1, 1, 0, 0])
        with pytest.raises(ValueError, match="0 .*or 1|Small"):
            FeatureLabelMatrix(np.array([[0, 2]]))

    def test_merged_chain_transitions_are_stochastic(self):
        rng = np.random.default_rng(50)
        model = random_model(rng, 3, 4, 3)
        for l in range(3):
            chain = merged_chain(model, l)
            np.testing.assert_allclose(
                np.exp(chain.log_transitions).sum(axis=-2), 1.0, atol=1e-12
            )
            np.testing.assert_allclose(np.exp(chain.log_initial).sum(), 1.0, atol=1e-12)
            np.testing.assert_allclose(chain.large_weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_end_to_end_with_real_wavelet_input(self):
        from endmix.spectral import generate_synthetic_library

        lib = generate_synthetic_library(2, 4, 64, seed=3)
        mats = [uwt(s, 5) for s in lib.samples]
        model = train_nhmc(mats, 2, EmConfig(max_iters=25))
        labels = label_features(model, mats[0])
        assert labels.labels.shape == (5, 64)
        assert set(np.unique(labels.labels)) <= {0, 1}

"""Acceptance suite: one test per release gate, in gate order.

Each test pins the tolerances it guarantees and prints a one-line summary
with the measured values.  Gates 1 and 11-13 run against the shared
desk-scale benchmark (see conftest); everything else is self-contained.
"""

import itertools
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from endmix.detector import (
    ErrorMatrix,
    FeatureDataset,
    eliminate_negative_features,
    select_features_cmi,
)
from endmix.evaluation import nonlinearity_score
from endmix.mixing import (
    HapkeGeometry,
    MixtureSpec,
    NoiseSpec,
    add_noise,
    generate_mixture_set,
    mix,
    reflectance_to_ssa,
    ssa_to_reflectance,
)
from endmix.nhmc import NhmcModel, label_features, log_likelihood, merged_chain
from endmix.pipeline import MAIN_VARIANT, run_detect
from endmix.sparse import AdmmConfig, nnls, sunsal
from endmix.spectral import generate_synthetic_library
from endmix.wavelet import WaveletMatrix

README = Path(__file__).resolve().parent.parent / "README.md"


def random_chain_model(rng, n_offsets, n_scales, k) -> NhmcModel:
    init = rng.dirichlet(np.ones(k), size=n_offsets)
    trans = rng.dirichlet(np.ones(k), size=(n_offsets, n_scales - 1, k))
    trans = np.swapaxes(trans, -1, -2)  # columns are distributions
    var = np.sort(rng.uniform(0.05, 4.0, size=(n_offsets, n_scales, k)), axis=-1)
    return NhmcModel(init, trans, var)


# ------------------------------------------------------------------ gate 1


def test_em_log_likelihood_monotone_at_desk_scale(desk_run):
    """Per-offset EM log-likelihood never dips more than 1e-9 per iteration,
    for k = 2 and k = 4 on the full 8x20 library; training under 5 min."""
    assert set(desk_run.train.banks_by_k) == {2, 4}
    worst = 0.0
    for k, banks in desk_run.train.banks_by_k.items():
        info = banks[MAIN_VARIANT].nhmc.training
        assert info.ll_history is not None
        for hist in info.ll_history:
            if hist.size > 1:
                worst = max(worst, -float(np.diff(hist).min()))
    assert worst <= 1e-9
    assert desk_run.train_seconds < 300.0
    print(
        f"PASS em-monotonicity: worst dip {worst:.2e} <= 1e-9, "
        f"training {desk_run.train_seconds:.1f}s < 300s"
    )


# ------------------------------------------------------------------ gate 2


def test_merged_viterbi_matches_exhaustive_binary_search():
    """Merged-chain decoding equals the argmax over all 2^n_scales binary
    paths on 1000 random chains (up to 8 scales): 100% exact matches."""
    rng = np.random.default_rng(2001)
    mismatches = 0
    for _ in range(1000):
        n_s = int(rng.integers(2, 9))
        k = int(rng.integers(2, 5))
        model = random_chain_model(rng, 1, n_s, k)
        matrix = WaveletMatrix(rng.standard_normal((n_s, 1)))
        got = label_features(model, matrix, method="merged").labels[:, 0]
        chain = merged_chain(model, 0)
        want, _ = oracles.best_binary_path(
            chain.log_initial,
            chain.log_transitions,
            chain.log_emissions(matrix.coeffs[:, 0]),
        )
        mismatches += int(not np.array_equal(got, want))
    assert mismatches == 0
    print("PASS viterbi-oracle: 1000/1000 exact path matches")


# ------------------------------------------------------------------ gate 3


def test_chain_log_likelihood_matches_path_summation():
    """Forward-algorithm likelihood equals exhaustive path summation within
    1e-10 on 100 random 3-scale, 2-state instances."""
    rng = np.random.default_rng(2002)
    worst = 0.0
    for _ in range(100):
        model = random_chain_model(rng, 3, 3, 2)
        matrix = WaveletMatrix(rng.standard_normal((3, 3)))
        want = sum(
            oracles.gaussian_chain_log_likelihood(
                model.offset_model(l).initial_probs,
                model.offset_model(l).transitions,
                model.offset_model(l).variances,
                matrix.coeffs[:, l],
            )
            for l in range(3)
        )
        worst = max(worst, abs(log_likelihood(model, matrix) - want))
    assert worst <= 1e-10
    print(f"PASS likelihood-oracle: worst gap {worst:.2e} <= 1e-10 over 100 instances")


# ------------------------------------------------------------------ gate 4


def random_binary_dataset(rng):
    n = int(rng.integers(30, 101))
    n_features = int(rng.integers(4, 13))
    t = rng.integers(0, 2, size=n).astype(np.uint8)
    cols = []
    for _ in range(n_features):
        kind = rng.random()
        if kind < 0.4:  # informative with random flips
            flips = rng.random(n) < rng.uniform(0.05, 0.4)
            cols.append(np.where(flips, 1 - t, t).astype(np.uint8))
        elif kind < 0.55 and cols:  # near-duplicate of an earlier feature
            base = cols[int(rng.integers(len(cols)))]
            flips = rng.random(n) < 0.1
            cols.append(np.where(flips, 1 - base, base).astype(np.uint8))
        else:  # noise
            cols.append(rng.integers(0, 2, size=n).astype(np.uint8))
    return np.stack(cols, axis=1), t


def test_greedy_selection_matches_brute_force_scores():
    """On 100 random datasets with at most 12 features: the first pick
    attains the maximum mutual information, and every later pick attains the
    maximum pairwise-min conditional score, both within 1e-12 of an
    independent scalar-loop implementation."""
    rng = np.random.default_rng(2004)
    for _ in range(100):
        X, t = random_binary_dataset(rng)
        n_features = X.shape[1]
        ds = FeatureDataset(X, t, n_scales=1, n_channels=n_features)
        selected = select_features_cmi(ds, range(n_features), n_features)
        oracles.verify_greedy_trace(
            X, t, range(n_features), n_features, selected, tol=1e-12
        )
    print("PASS cmi-selection-oracle: 100/100 greedy traces verified at 1e-12")


# ------------------------------------------------------------------ gate 5


def counts_to_dataset(c11, c10, c01, c00) -> FeatureDataset:
    """Dataset realizing exact (feature, target) joint counts, plus a
    perfectly aligned control feature that must survive elimination."""
    probe = np.array([1] * c11 + [1] * c10 + [0] * c01 + [0] * c00, np.uint8)
    t = np.array([1] * c11 + [0] * c10 + [1] * c01 + [0] * c00, np.uint8)
    X = np.stack([probe, t.copy()], axis=1)
    return FeatureDataset(X, t, n_scales=1, n_channels=2)


def test_elimination_drops_negative_and_independent_features():
    """Anti-correlated features are always eliminated; exactly independent
    features (joint counts equal to marginal products) are eliminated; the
    smoothed determinant matches hand arithmetic within 1e-15 on 20 cases."""
    rng = np.random.default_rng(2005)
    for _ in range(20):  # c11*c00 < c10*c01 by construction
        c11, c00 = int(rng.integers(0, 5)), int(rng.integers(0, 5))
        c10, c01 = int(rng.integers(10, 26)), int(rng.integers(10, 26))
        kept = eliminate_negative_features(counts_to_dataset(c11, c10, c01, c00))
        assert 0 not in kept and 1 in kept

    n = 60
    independent = [
        (x1, t1)
        for x1 in range(6, n, 6)
        for t1 in range(10, n, 10)
        if (x1 * t1) % n == 0
    ][:20]
    assert len(independent) == 20
    for x1, t1 in independent:
        c11 = x1 * t1 // n
        kept = eliminate_negative_features(
            counts_to_dataset(c11, x1 - c11, t1 - c11, n - x1 - t1 + c11)
        )
        assert 0 not in kept and 1 in kept

    worst = 0.0
    for _ in range(20):
        c = rng.integers(0, 30, size=(2, 2))
        total = float(c.sum()) + 2.0  # four cells smoothed by 0.5 each
        j = [[(float(c[a][b]) + 0.5) / total for b in (0, 1)] for a in (0, 1)]
        want = j[0][0] * j[1][1] - j[0][1] * j[1][0]
        got = ErrorMatrix.from_counts(c, alpha=0.5).det
        worst = max(worst, abs(got - want))
    assert worst <= 1e-15
    print(
        "PASS elimination: 20 anti-correlated + 20 independent probes dropped, "
        f"worst smoothed-det gap {worst:.1e} <= 1e-15"
    )


# ------------------------------------------------------------------ gate 6


def test_hapke_round_trip_and_closed_form_value():
    """reflectance -> albedo -> reflectance within 1e-8 over r in
    {0.05..0.95} x incidence {0,30,60} x emergence {0,30}; the w = 0.75
    normal-geometry value equals 0.2109375 within 1e-12."""
    worst = 0.0
    for inc, emi in itertools.product((0.0, 30.0, 60.0), (0.0, 30.0)):
        g = HapkeGeometry(inc, emi)
        for r in np.arange(0.05, 0.951, 0.05):
            back = ssa_to_reflectance(reflectance_to_ssa(float(r), g), g)
            worst = max(worst, abs(back - float(r)))
    assert worst <= 1e-8
    # H(x) = (1 + 2x) / (1 + 2x sqrt(1 - w)): at w = 0.75 and normal
    # geometry H = 1.5, so r = (0.75 / 4) * (1 / 2) * 1.5^2 = 0.2109375
    hand = ssa_to_reflectance(0.75, HapkeGeometry(0.0, 0.0))
    assert hand == pytest.approx(0.2109375, abs=1e-12)
    print(
        f"PASS hapke: worst round-trip error {worst:.1e} <= 1e-8 over 114 points, "
        f"closed-form value {hand!r}"
    )


# ------------------------------------------------------------------ gate 7


def test_degenerate_mixing_models_reduce_to_linear():
    """PPNM with b=0, GBM with all gammas 0, and NM with zero pair terms all
    equal the linear model within 1e-15 pointwise; a one-hot linear mixture
    returns the endmember bitwise."""
    lib = generate_synthetic_library(4, 3, 64, seed=2007)
    rng = np.random.default_rng(2007)
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(2, 5))
        refs = tuple(sorted(rng.choice(lib.n_samples, size=m, replace=False).tolist()))
        a = tuple(rng.dirichlet(np.ones(m)))
        base = mix(MixtureSpec("LMM", refs, abundances=a), lib).reflectance
        n_pairs = m * (m - 1) // 2
        for spec in (
            MixtureSpec("PPNM", refs, abundances=a, ppnm_b=0.0),
            MixtureSpec("GBM", refs, abundances=a, gbm_gammas=(0.0,) * n_pairs),
            MixtureSpec("NM", refs, nm_coeffs=a + (0.0,) * n_pairs),
        ):
            gap = float(np.abs(mix(spec, lib).reflectance - base).max())
            worst = max(worst, gap)
    assert worst <= 1e-15
    for i in range(lib.n_samples):
        one_hot = mix(MixtureSpec("LMM", (i,), abundances=(1.0,)), lib)
        assert np.array_equal(one_hot.reflectance, lib.samples[i].reflectance)
    print(f"PASS mixing-reductions: worst pointwise gap {worst:.1e} <= 1e-15")


# ------------------------------------------------------------------ gate 8


def test_nnls_and_sunsal_optimality():
    """NNLS KKT residual <= 1e-8 on 1000 random instances and within 1e-4 of
    a 2-D grid search; SUnSAL at lambda 0 matches the NNLS objective within
    1e-6; lambda >= max |M^T y| returns the zero vector exactly."""
    rng = np.random.default_rng(2008)

    def instance(L, n):
        W = rng.normal(size=(L, n))
        x = np.where(rng.random(n) < 0.5, rng.uniform(0.1, 1.0, n), 0.0)
        return W, W @ x + rng.normal(0.0, 0.01, size=L)

    worst_kkt = 0.0
    for _ in range(1000):
        L = int(rng.integers(8, 41))
        W, y = instance(L, int(rng.integers(2, min(L, 25) + 1)))
        worst_kkt = max(worst_kkt, oracles.kkt_residual(W, y, nnls(W, y).values))
    assert worst_kkt <= 1e-8

    worst_grid = 0.0
    for _ in range(20):
        W = rng.uniform(0.1, 1.0, size=(8, 2))
        y = W @ rng.uniform(0.0, 1.4, size=2) + rng.normal(0.0, 1e-3, size=8)
        gap = np.abs(nnls(W, y).values - oracles.grid_nnls_2d(W, y)).max()
        worst_grid = max(worst_grid, float(gap))
    assert worst_grid <= 1e-4

    worst_obj = 0.0
    for _ in range(10):
        W, y = instance(20, 10)
        a0 = sunsal(W, y, AdmmConfig(lam=0.0)).values
        a_star = nnls(W, y).values
        obj = lambda a: 0.5 * float((y - W @ a) @ (y - W @ a))  # noqa: E731
        worst_obj = max(worst_obj, abs(obj(a0) - obj(a_star)))
    assert worst_obj <= 1e-6

    W, y = instance(16, 6)
    kill = sunsal(W, y, AdmmConfig(lam=float(np.abs(W.T @ y).max())))
    assert np.all(kill.values == 0.0)
    print(
        f"PASS sparse-optimality: worst KKT {worst_kkt:.1e} <= 1e-8 (1000 runs), "
        f"grid gap {worst_grid:.1e} <= 1e-4, objective gap {worst_obj:.1e} <= 1e-6, "
        "zero solution exact"
    )


# ------------------------------------------------------------------ gate 9


def test_noise_snr_calibration():
    """Pooled empirical SNR over 10^4 draws within +/-0.2 dB of the target
    at both 20 dB and 50 dB."""
    lib = generate_synthetic_library(2, 1, 256, seed=2009)
    y = lib.samples[0]
    signal = float(y.reflectance @ y.reflectance)
    gaps = {}
    for target in (20.0, 50.0):
        energy = 0.0
        trials = 10_000
        for i in range(trials):
            noise = add_noise(y, NoiseSpec(target, seed=i)).reflectance - y.reflectance
            energy += float(noise @ noise)
        empirical = 10.0 * np.log10(signal / (energy / trials))
        gaps[target] = abs(empirical - target)
        assert gaps[target] <= 0.2
    print(
        "PASS noise-calibration: gaps "
        f"{gaps[20.0]:.3f} dB @ 20 dB, {gaps[50.0]:.3f} dB @ 50 dB (<= 0.2 dB)"
    )


# ------------------------------------------------------------------ gate 10


def test_nonlinearity_score_behavior():
    """In-cone spectra score 0 within 0.01 degrees; the median score is
    nondecreasing in the quadratic strength |b| over {0,1,2,3}; scores stay
    inside [0, 90] degrees for arbitrary inputs."""
    lib = generate_synthetic_library(6, 4, 128, seed=2010)
    rng = np.random.default_rng(2010)

    worst_cone = 0.0
    for _ in range(50):
        refs = rng.choice(lib.n_samples, size=3, replace=False)
        W = np.stack([lib.samples[r].reflectance for r in refs], axis=1)
        coeffs = rng.uniform(0.0, 2.0, size=3)  # any nonnegative combination
        worst_cone = max(worst_cone, nonlinearity_score(W @ coeffs, W).ns_deg)
    assert worst_cone <= 0.01

    recipes = []
    for _ in range(40):
        refs = tuple(sorted(rng.choice(lib.n_samples, size=3, replace=False).tolist()))
        recipes.append((refs, tuple(rng.dirichlet(np.ones(3)))))
    medians = []
    for strength in (0.0, 1.0, 2.0, 3.0):
        scores = []
        for sign in {1.0, -1.0} if strength else {1.0}:
            for refs, a in recipes:
                spec = MixtureSpec(
                    "PPNM", refs, abundances=a, ppnm_b=sign * strength
                )
                W = np.stack([lib.samples[r].reflectance for r in refs], axis=1)
                scores.append(nonlinearity_score(mix(spec, lib), W).ns_deg)
        medians.append(float(np.median(scores)))
    assert all(lo <= hi for lo, hi in zip(medians, medians[1:]))

    for _ in range(200):
        W = rng.uniform(0.0, 1.0, size=(32, 3))
        y = rng.normal(size=32)
        assert 0.0 <= nonlinearity_score(y, W).ns_deg <= 90.0
    print(
        f"PASS nonlinearity-score: in-cone max {worst_cone:.1e} deg <= 0.01, "
        f"medians by |b| {[round(m, 2) for m in medians]} nondecreasing, "
        "range [0, 90] held on 200 draws"
    )


# ------------------------------------------------------------------ gate 11


def test_benchmark_method_orderings(desk_run):
    """At desk scale (500 mixtures per model, 3 endmembers, 50 dB): sparse
    unmixing wins on the linear model, the chain detector wins on the
    second-order and post-nonlinear models; the full benchmark stays under
    15 minutes.  Reference values from the original RELAB evaluation are
    recorded in the README as non-reproducible context."""
    summary = desk_run.evaluation.summary
    d = {key: dist for key, (dist, _) in summary.items()}
    assert d[("LMM", "sunsal")] <= d[("LMM", MAIN_VARIANT)]
    assert d[("SM", MAIN_VARIANT)] <= d[("SM", "sunsal")]
    assert d[("PPNM", MAIN_VARIANT)] <= d[("PPNM", "sunsal")]
    assert desk_run.total_seconds < 900.0
    readme = README.read_text(encoding="utf-8")
    assert "0.348" in readme and "0.319" in readme
    print(
        "PASS benchmark-orderings: LMM sunsal "
        f"{d[('LMM', 'sunsal')]:.3f} <= chain {d[('LMM', MAIN_VARIANT)]:.3f}; "
        f"SM chain {d[('SM', MAIN_VARIANT)]:.3f} <= sunsal {d[('SM', 'sunsal')]:.3f}; "
        f"PPNM chain {d[('PPNM', MAIN_VARIANT)]:.3f} <= sunsal {d[('PPNM', 'sunsal')]:.3f}; "
        f"total {desk_run.total_seconds:.0f}s < 900s"
    )


# ------------------------------------------------------------------ gate 12


def test_feature_pipeline_beats_plain_bayes_everywhere(desk_run):
    """The full pipeline (elimination + augmentation + greedy selection)
    scores strictly better than plain naive Bayes on every mixing model,
    with at least 30% relative improvement in distance-to-ideal."""
    summary = desk_run.evaluation.summary
    ratios = {}
    for model in desk_run.cfg.models:
        d_main = summary[(model, MAIN_VARIANT)][0]
        d_plain = summary[(model, "nb")][0]
        assert d_main < d_plain
        assert (d_plain - d_main) / d_plain >= 0.30
        ratios[model] = d_main / d_plain
    pretty = ", ".join(f"{m}={r:.2f}" for m, r in ratios.items())
    print(f"PASS ablation-margins: d ratios vs plain NB {pretty} (all <= 0.70)")


# ------------------------------------------------------------------ gate 13


def test_testing_stage_scales_linearly(desk_run, tmp_path):
    """Doubling the number of test spectra grows the testing-stage wall time
    by less than 2.5x."""
    cfg = replace(desk_run.cfg, models=("LMM",))
    geometry = HapkeGeometry(cfg.hapke_incidence_deg, cfg.hapke_emergence_deg)
    single = desk_run.sim.datasets["LMM"]
    double = generate_mixture_set(
        desk_run.sim.test,
        "LMM",
        cfg.n_endmembers,
        cfg.n_combos,
        2 * cfg.n_weights,
        NoiseSpec(cfg.snr_db, cfg.mixing_seed),
        seed=cfg.mixing_seed,
        geometry=geometry,
    )
    assert len(double) == 2 * len(single)

    def timed(ds, out):
        t0 = time.perf_counter()
        run_detect(cfg, desk_run.train.banks_by_k, {"LMM": ds}, desk_run.sim.train,
                   out_dir=out)
        return time.perf_counter() - t0

    t_single = timed(single, tmp_path / "n")
    t_double = timed(double, tmp_path / "2n")
    assert t_double < 2.5 * t_single
    print(
        f"PASS scaling: {len(single)} px in {t_single:.1f}s, "
        f"{len(double)} px in {t_double:.1f}s (ratio {t_double / t_single:.2f} < 2.5)"
    )

"""Non-homogeneous hidden Markov chains over wavelet scales.

One chain runs across scales at every wavelength channel ("offset").  Hidden
states are zero-mean Gaussians whose variances depend on both scale and
state; transition matrices differ per scale step, which makes the chain
non-homogeneous.  State 0 is the smallest-variance "Small" state at every
scale; the remaining states are collectively "Large".

Training is classic EM (forward-backward E-step, closed-form M-step) run
independently per offset over a set of training coefficient matrices.
Binary feature labels come from Viterbi decoding of a merged two-state
chain: the Large super-state emits a prior-weighted mixture of the large
states' Gaussians and its transition probabilities are prior-weighted
aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .wavelet import WaveletMatrix

__all__ = [
    "EmConfig",
    "NhmcOffsetModel",
    "NhmcTrainingInfo",
    "NhmcModel",
    "FeatureLabelMatrix",
    "MergedChain",
    "merged_chain",
    "train_nhmc",
    "log_likelihood",
    "label_features",
]

_LOG_2PI = float(np.log(2.0 * np.pi))
_TINY = 1e-300

# column sums of a transition matrix may drift this far from 1
STOCHASTIC_TOL = 1e-10


@dataclass(frozen=True)
class EmConfig:
    """EM hyperparameters.

    ``tol`` is relative: an offset stops once the log-likelihood change drops
    below ``tol * max(1, |previous|)``.  Variances are floored at
    ``floor_scale * (mean squared coefficient at the offset + floor_offset)``.
    Transition matrices start at ``init_diagonal`` on the diagonal with the
    remainder spread uniformly.
    """

    tol: float = 1e-6
    max_iters: int = 200
    floor_scale: float = 1e-8
    floor_offset: float = 1e-12
    init_diagonal: float = 0.8
    record_history: bool = True


@dataclass(frozen=True)
class NhmcOffsetModel:
    """Chain parameters for a single offset.

    ``initial_probs`` has length ``k``; ``transitions[s][j, i]`` is the
    probability of moving to state ``j`` at scale ``s+2`` given state ``i``
    at scale ``s+1`` (columns are distributions); ``variances[s][i]`` is the
    emission variance of state ``i`` at scale ``s+1``.
    """

    initial_probs: np.ndarray
    transitions: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        init = np.asarray(self.initial_probs, dtype=float)
        trans = np.asarray(self.transitions, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        object.__setattr__(self, "initial_probs", init)
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "variances", var)
        self.validate()

    @property
    def n_states(self) -> int:
        return int(self.initial_probs.size)

    @property
    def n_scales(self) -> int:
        return int(self.variances.shape[0])

    def validate(self) -> None:
        k = self.initial_probs.size
        if self.initial_probs.ndim != 1 or k < 1:
            raise ValueError("initial_probs must be a 1-D vector of length >= 1")
        s = self.variances.shape[0]
        if self.variances.shape != (s, k):
            raise ValueError("variances must have shape (n_scales, n_states)")
        if self.transitions.shape != (s - 1, k, k):
            raise ValueError("transitions must have shape (n_scales - 1, k, k)")
        if np.any(self.initial_probs < -STOCHASTIC_TOL) or np.any(
            self.initial_probs > 1 + STOCHASTIC_TOL
        ):
            raise ValueError("initial probabilities outside [0, 1]")
        if abs(float(self.initial_probs.sum()) - 1.0) > STOCHASTIC_TOL:
            raise ValueError("initial probabilities must sum to 1")
        if self.transitions.size:
            if np.any(self.transitions < -STOCHASTIC_TOL) or np.any(
                self.transitions > 1 + STOCHASTIC_TOL
            ):
                raise ValueError("transition probabilities outside [0, 1]")
            col = self.transitions.sum(axis=1)
            if np.any(np.abs(col - 1.0) > STOCHASTIC_TOL):
                raise ValueError("transition matrix columns must sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")
        if np.any(np.diff(self.variances, axis=1) < 0):
            raise ValueError("variances must be nondecreasing in the state index")


@dataclass(frozen=True)
class NhmcTrainingInfo:
    iterations: np.ndarray
    final_log_likelihood: np.ndarray
    variance_floors: np.ndarray
    degenerate_offsets: tuple[int, ...] = ()
    ll_history: tuple[np.ndarray, ...] | None = None


class NhmcModel:
    """Per-offset chains stored as stacked arrays.

    ``initial`` is ``(n_offsets, k)``, ``transitions`` is
    ``(n_offsets, n_scales - 1, k, k)`` and ``variances`` is
    ``(n_offsets, n_scales, k)``.
    """

    def __init__(
        self,
        initial: np.ndarray,
        transitions: np.ndarray,
        variances: np.ndarray,
        mother: str = "haar",
        training: NhmcTrainingInfo | None = None,
    ):
        self.initial = np.asarray(initial, dtype=float)
        self.transitions = np.asarray(transitions, dtype=float)
        self.variances = np.asarray(variances, dtype=float)
        self.mother = mother
        self.training = training
        if self.initial.ndim != 2:
            raise ValueError("initial must be (n_offsets, n_states)")
        n_l, k = self.initial.shape
        n_s = self.variances.shape[1] if self.variances.ndim == 3 else 0
        if self.variances.shape != (n_l, n_s, k):
            raise ValueError("variances must be (n_offsets, n_scales, n_states)")
        if self.transitions.shape != (n_l, n_s - 1, k, k):
            raise ValueError("transitions must be (n_offsets, n_scales - 1, k, k)")

    @property
    def n_offsets(self) -> int:
        return int(self.initial.shape[0])

    @property
    def n_states(self) -> int:
        return int(self.initial.shape[1])

    @property
    def n_scales(self) -> int:
        return int(self.variances.shape[1])

    def offset_model(self, offset: int) -> NhmcOffsetModel:
        return NhmcOffsetModel(
            self.initial[offset].copy(),
            self.transitions[offset].copy(),
            self.variances[offset].copy(),
        )

    def validate(self) -> None:
        for l in range(self.n_offsets):
            self.offset_model(l)


@dataclass(frozen=True)
class FeatureLabelMatrix:
    """Binary Small/Large labels with shape ``(n_scales, n_channels)``."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("labels must be 2-D (scales x channels)")
        if lab.size and not np.isin(lab, (0, 1)).all():
            raise ValueError("labels must be 0 (Small) or 1 (Large)")
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def n_scales(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.labels.shape[1])

    def flatten(self) -> np.ndarray:
        """Row-major flattening matching :meth:`WaveletMatrix.flatten`."""
        return self.labels.reshape(-1)


def _log_gaussian(x, var):
    return -0.5 * (_LOG_2PI + np.log(var) + x * x / var)


def _forward(log_init: np.ndarray, log_trans: np.ndarray, log_b: np.ndarray):
    """Log-domain forward pass.

    Shapes: ``log_init (L, k)``, ``log_trans (L, S-1, k, k)``,
    ``log_b (L, C, S, k)``.  Returns the stacked forward messages
    ``(L, C, S, k)`` and per-chain log-likelihoods ``(L, C)``.
    """
    n_l, n_c, n_s, k = log_b.shape
    alphas = np.empty_like(log_b)
    la = log_init[:, None, :] + log_b[:, :, 0, :]
    alphas[:, :, 0, :] = la
    for s in range(1, n_s):
        t = la[:, :, None, :] + log_trans[:, None, s - 1, :, :]
        la = log_b[:, :, s, :] + logsumexp(t, axis=-1)
        alphas[:, :, s, :] = la
    return alphas, logsumexp(la, axis=-1)


def _backward(log_trans: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    n_l, n_c, n_s, k = log_b.shape
    betas = np.zeros_like(log_b)
    lb = np.zeros((n_l, n_c, k))
    for s in range(n_s - 2, -1, -1):
        t = log_trans[:, None, s, :, :] + (log_b[:, :, s + 1, :] + lb)[:, :, :, None]
        lb = logsumexp(t, axis=2)
        betas[:, :, s, :] = lb
    return betas


def train_nhmc(
    matrices: Sequence[WaveletMatrix], n_states: int, config: EmConfig = EmConfig()
) -> NhmcModel:
    """Fit a chain per offset by EM over the given coefficient matrices.

    All matrices must share their shape.  Requires ``n_states >= 2`` and at
    least two matrices.  After fitting, states are relabelled per scale so
    variances ascend with the state index (a relabelling per scale is a
    symmetry of a non-homogeneous chain when transitions are permuted
    consistently).  Offsets whose coefficients are identically zero converge
    to floor variances and are flagged rather than treated as errors.
    """
    if len(matrices) < 2:
        raise ValueError("training needs at least 2 coefficient matrices")
    if n_states < 2:
        raise ValueError("n_states must be at least 2")
    shape = matrices[0].coeffs.shape
    mother = matrices[0].mother
    for m in matrices:
        if m.coeffs.shape != shape:
            raise ValueError("all training matrices must share one shape")
    stacked = np.stack([m.coeffs for m in matrices])  # (C, S, L)
    w = np.ascontiguousarray(stacked.transpose(2, 0, 1))  # (L, C, S)
    n_l, n_c, n_s = w.shape
    k = n_states

    floors = config.floor_scale * ((w**2).mean(axis=(1, 2)) + config.floor_offset)
    degenerate = tuple(int(l) for l in range(n_l) if not np.any(w[l]))

    probs = [(i + 1) / (k + 1) for i in range(k)]
    quant = np.quantile(np.abs(w), probs, axis=1)  # (k, L, S)
    var = np.maximum(quant.transpose(1, 2, 0) ** 2, floors[:, None, None])
    init = np.full((n_l, k), 1.0 / k)
    off_diag = (1.0 - config.init_diagonal) / (k - 1)
    trans = np.full((n_l, max(n_s - 1, 0), k, k), off_diag)
    idx = np.arange(k)
    trans[:, :, idx, idx] = config.init_diagonal

    history: list[list[float]] = [[] for _ in range(n_l)]
    prev_ll = np.full(n_l, -np.inf)
    active = np.arange(n_l)
    msteps = 0
    with np.errstate(divide="ignore"):
        while True:
            wa = w[active]
            log_b = _log_gaussian(wa[:, :, :, None], var[active][:, None, :, :])
            log_trans_a = np.log(trans[active])
            alphas, ll_chain = _forward(np.log(init[active]), log_trans_a, log_b)
            ll = ll_chain.sum(axis=1)
            for pos, l in enumerate(active):
                history[l].append(float(ll[pos]))
            prev = prev_ll[active]
            gap = np.abs(ll - prev)
            converged = np.isfinite(prev) & (
                gap <= config.tol * np.maximum(1.0, np.abs(prev))
            )
            prev_ll[active] = ll
            keep = ~converged
            if not np.any(keep) or msteps >= config.max_iters:
                break
            active = active[keep]
            wa = wa[keep]
            log_b = log_b[keep]
            log_trans_a = log_trans_a[keep]
            alphas = alphas[keep]
            ll_chain = ll_chain[keep]

            betas = _backward(log_trans_a, log_b)
            gam = np.exp(alphas + betas - ll_chain[:, :, None, None])
            init[active] = gam[:, :, 0, :].mean(axis=1)
            den = gam.sum(axis=1)  # (A, S, k)
            num = np.einsum("acsk,acs->ask", gam, wa**2)
            new_var = np.where(den > _TINY, num / np.maximum(den, _TINY), var[active])
            var[active] = np.maximum(new_var, floors[active][:, None, None])
            for s in range(n_s - 1):
                future = (log_b[:, :, s + 1, :] + betas[:, :, s + 1, :])[:, :, :, None]
                xi = np.exp(
                    alphas[:, :, s, None, :]
                    + log_trans_a[:, None, s, :, :]
                    + future
                    - ll_chain[:, :, None, None]
                ).sum(axis=1)
                col = xi.sum(axis=1)  # (A, k)
                ok = col > _TINY
                ratio = xi / np.maximum(col[:, None, :], _TINY)
                trans[active, s] = np.where(ok[:, None, :], ratio, trans[active, s])
            msteps += 1

    init, trans, var = _relabel_by_variance(init, trans, var)
    info = NhmcTrainingInfo(
        iterations=np.array([len(h) - 1 for h in history], dtype=int),
        final_log_likelihood=prev_ll.copy(),
        variance_floors=floors,
        degenerate_offsets=degenerate,
        ll_history=tuple(np.asarray(h) for h in history) if config.record_history else None,
    )
    model = NhmcModel(init, trans, var, mother=mother, training=info)
    model.validate()
    return model


def _relabel_by_variance(init, trans, var):
    """Sort states by variance independently at every scale.

    Transitions are permuted consistently: the permutation applied at scale
    ``s`` reindexes the columns of the step ``s -> s+1`` and the rows of the
    step ``s-1 -> s``.
    """
    order = np.argsort(var, axis=2, kind="stable")
    var_s = np.take_along_axis(var, order, axis=2)
    init_s = np.take_along_axis(init, order[:, 0, :], axis=1)
    if trans.shape[1]:
        step = np.take_along_axis(trans, order[:, 1:, :, None], axis=2)
        trans_s = np.take_along_axis(step, order[:, :-1, None, :], axis=3)
    else:
        trans_s = trans
    return init_s, trans_s, var_s


def _check_compat(model: NhmcModel, matrix: WaveletMatrix) -> None:
    if matrix.n_scales != model.n_scales:
        raise ValueError(
            f"matrix has {matrix.n_scales} scales, model expects {model.n_scales}"
        )
    if matrix.n_channels != model.n_offsets:
        raise ValueError(
            f"matrix has {matrix.n_channels} channels, model expects {model.n_offsets}"
        )


def log_likelihood(model: NhmcModel, matrix: WaveletMatrix) -> float:
    """Total log density of a coefficient matrix: one chain per offset, summed."""
    _check_compat(model, matrix)
    w = np.ascontiguousarray(matrix.coeffs.T)[:, None, :]  # (L, 1, S)
    with np.errstate(divide="ignore"):
        log_b = _log_gaussian(w[:, :, :, None], model.variances[:, None, :, :])
        _, ll = _forward(np.log(model.initial), np.log(model.transitions), log_b)
    return float(ll.sum())


@dataclass(frozen=True)
class MergedChain:
    """Two-state (Small/Large) chain for one offset.

    ``log_initial`` has length 2; ``log_transitions[s][b', b]`` maps the
    merged state at scale ``s+1`` to scale ``s+2``.  Large emissions are a
    mixture over the large states with scale-dependent weights.
    """

    log_initial: np.ndarray
    log_transitions: np.ndarray
    small_variances: np.ndarray
    large_variances: np.ndarray
    large_weights: np.ndarray

    @property
    def n_scales(self) -> int:
        return int(self.small_variances.size)

    def log_emissions(self, column: np.ndarray) -> np.ndarray:
        """Per-scale log densities, shape ``(n_scales, 2)``."""
        column = np.asarray(column, dtype=float)
        small = _log_gaussian(column, self.small_variances)
        with np.errstate(divide="ignore"):
            big = logsumexp(
                np.log(self.large_weights)
                + _log_gaussian(column[:, None], self.large_variances),
                axis=-1,
            )
        return np.stack([small, big], axis=-1)


def _merged_arrays(model: NhmcModel):
    """Vectorized merged-chain parameters across all offsets."""
    n_l, n_s, k = model.variances.shape
    p = np.empty((n_l, n_s, k))
    p[:, 0] = model.initial
    for s in range(n_s - 1):
        p[:, s + 1] = np.einsum("lji,li->lj", model.transitions[:, s], p[:, s])
    p_large = p[:, :, 1:].sum(axis=-1)
    weights = p[:, :, 1:] / np.maximum(p_large, _TINY)[:, :, None]
    # guard unreachable Large groups with uniform mixture weights
    weights = np.where(p_large[:, :, None] > _TINY, weights, 1.0 / (k - 1))
    log_init = np.log(np.maximum(np.stack([p[:, 0, 0], p_large[:, 0]], axis=-1), 0.0))
    log_trans = np.full((n_l, n_s - 1, 2, 2), -np.inf)
    if n_s > 1:
        t = model.transitions
        from_small_to_small = t[:, :, 0, 0]
        from_small_to_large = t[:, :, 1:, 0].sum(axis=2)
        u = weights[:, :-1, :]  # conditional weights at the source scale
        from_large_to_small = np.einsum("lsi,lsi->ls", u, t[:, :, 0, 1:])
        from_large_to_large = np.einsum("lsi,lsi->ls", u, t[:, :, 1:, 1:].sum(axis=2))
        merged = np.stack(
            [
                np.stack([from_small_to_small, from_large_to_small], axis=-1),
                np.stack([from_small_to_large, from_large_to_large], axis=-1),
            ],
            axis=-2,
        )  # (L, S-1, b', b)
        with np.errstate(divide="ignore"):
            log_trans = np.log(np.maximum(merged, 0.0))
    return log_init, log_trans, weights


def _merged_arrays_cached(model: NhmcModel):
    """Memoized :func:`_merged_arrays`; models are immutable after training."""
    cache = getattr(model, "_merged_cache", None)
    if cache is None:
        cache = _merged_arrays(model)
        model._merged_cache = cache
    return cache


def merged_chain(model: NhmcModel, offset: int) -> MergedChain:
    """Extract the merged Small/Large chain for a single offset."""
    if model.n_states < 2:
        raise ValueError("merging requires at least 2 states")
    log_init, log_trans, weights = _merged_arrays_cached(model)
    return MergedChain(
        log_initial=log_init[offset].copy(),
        log_transitions=log_trans[offset].copy(),
        small_variances=model.variances[offset, :, 0].copy(),
        large_variances=model.variances[offset, :, 1:].copy(),
        large_weights=weights[offset].copy(),
    )


def _viterbi_batch(log_init, log_trans, log_e):
    """Max-product decoding vectorized over offsets.

    ``log_init (L, m)``, ``log_trans (L, S-1, m, m)``, ``log_e (L, S, m)``.
    Ties are broken toward the lowest state index at every argmax.
    Returns paths of shape ``(L, S)``.
    """
    n_l, n_s, m = log_e.shape
    delta = log_init + log_e[:, 0, :]
    back = np.empty((n_s - 1, n_l, m), dtype=np.int64) if n_s > 1 else None
    for s in range(1, n_s):
        cand = delta[:, None, :] + log_trans[:, s - 1, :, :]  # (L, to, from)
        back[s - 1] = np.argmax(cand, axis=-1)
        delta = log_e[:, s, :] + np.max(cand, axis=-1)
    path = np.empty((n_l, n_s), dtype=np.int64)
    path[:, -1] = np.argmax(delta, axis=-1)
    for s in range(n_s - 2, -1, -1):
        path[:, s] = np.take_along_axis(back[s], path[:, s + 1][:, None], axis=1)[:, 0]
    return path


def label_features(
    model: NhmcModel, matrix: WaveletMatrix, method: str = "merged"
) -> FeatureLabelMatrix:
    """Viterbi-decode Small(0)/Large(1) labels for every (scale, channel).

    ``method="merged"`` (default) decodes the two-state merged chain;
    ``method="full"`` decodes all ``k`` states and then maps state 0 to
    Small and everything else to Large.  Ties prefer Small.
    """
    _check_compat(model, matrix)
    if model.n_states < 2:
        raise ValueError("labelling requires at least 2 states")
    w = np.ascontiguousarray(matrix.coeffs.T)  # (L, S)
    with np.errstate(divide="ignore"):
        if method == "merged":
            log_init, log_trans, weights = _merged_arrays_cached(model)
            small = _log_gaussian(w, model.variances[:, :, 0])
            big = logsumexp(
                np.log(weights) + _log_gaussian(w[:, :, None], model.variances[:, :, 1:]),
                axis=-1,
            )
            log_e = np.stack([small, big], axis=-1)
            path = _viterbi_batch(log_init, log_trans, log_e)
        elif method == "full":
            log_e = _log_gaussian(w[:, :, None], model.variances)
            path = _viterbi_batch(
                np.log(model.initial), np.log(model.transitions), log_e
            )
            path = (path > 0).astype(np.int64)
        else:
            raise ValueError(f"unknown decoding method {method!r}")
    return FeatureLabelMatrix((path > 0).astype(np.uint8).T)

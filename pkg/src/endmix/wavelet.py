"""Undecimated wavelet transform of reflectance spectra.

The transform keeps one coefficient per (scale, channel) pair: no
downsampling, so spectral features stay aligned with the wavelength grid
across scales.  Scale ``s`` (1-based) uses the mother wavelet dilated to
``2**(s-1)`` samples per half, normalized by ``1/sqrt(2**(s-1))``, and the
signal is extended by symmetric mirroring at the boundaries.

Only the Haar mother is implemented: positive taps on the shorter-wavelength
half of the support, negative taps on the longer-wavelength half.  A step up
in reflectance therefore produces a negative coefficient at the step channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["WaveletMatrix", "uwt"]

SUPPORTED_MOTHERS = ("haar",)


@dataclass(frozen=True)
class WaveletMatrix:
    """Coefficients with shape ``(n_scales, n_channels)``; row s-1 holds scale s."""

    coeffs: np.ndarray
    mother: str = "haar"

    def __post_init__(self) -> None:
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 2:
            raise ValueError("coefficient array must be 2-D (scales x channels)")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        if self.mother not in SUPPORTED_MOTHERS:
            raise ValueError(f"unsupported mother wavelet {self.mother!r}")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def n_scales(self) -> int:
        return int(self.coeffs.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.coeffs.shape[1])

    def flatten(self) -> np.ndarray:
        """Row-major flattening: index ``(s-1) * n_channels + channel``."""
        return self.coeffs.reshape(-1)


def uwt(spectrum, n_scales: int, mother: str = "haar") -> WaveletMatrix:
    """Transform a spectrum into a ``(n_scales, n_channels)`` coefficient matrix.

    ``spectrum`` may be a :class:`~endmix.spectral.Spectrum` or a 1-D array.
    The coefficient at scale ``s``, channel ``l`` is the inner product of the
    mirrored signal with the dilated Haar atom whose positive half covers
    channels ``l - 2**(s-1) .. l-1`` and negative half ``l .. l + 2**(s-1) - 1``.
    Coefficients are invariant to a global additive offset of the input.
    """
    y = np.asarray(getattr(spectrum, "reflectance", spectrum), dtype=float)
    if y.ndim != 1:
        raise ValueError("input signal must be 1-D")
    if not np.all(np.isfinite(y)):
        raise ValueError("input signal must be finite")
    if mother not in SUPPORTED_MOTHERS:
        raise ValueError(f"unsupported mother wavelet {mother!r}")
    n = y.size
    if n_scales < 1:
        raise ValueError("n_scales must be at least 1")
    max_half = 2 ** (n_scales - 1)
    if max_half > 2 * n:
        raise ValueError(
            f"n_scales={n_scales} too large for {n} channels "
            f"(largest half-support {max_half} exceeds {2 * n})"
        )
    # removing the mean is a no-op for zero-sum filters but keeps the running
    # sums small, so constant inputs map to exact zeros
    centered = y - np.mean(y)
    pad = max_half
    extended = np.pad(centered, pad, mode="symmetric")
    csum = np.concatenate([[0.0], np.cumsum(extended)])
    pos = np.arange(n) + pad
    rows = []
    for s in range(1, n_scales + 1):
        a = 2 ** (s - 1)
        rows.append((2.0 * csum[pos] - csum[pos - a] - csum[pos + a]) / np.sqrt(a))
    return WaveletMatrix(np.stack(rows), mother=mother)

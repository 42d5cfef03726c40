"""Distance-based comparison features: one value per pixel.

Both baselines collapse each histogram to a single distance and hand the
resulting ``p``-vector to the same mixture model as the full-histogram
method (so ``k == p``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .core import DEFAULT_BANDWIDTH, Frame, estimate_ambient
from .errors import InvalidInputError, NoPeakError

BIN_WIDTH_M = 0.012
OVERSAMPLE = 100


@dataclass(frozen=True)
class DistanceFeature:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("distance feature has non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def extract_peak(histogram, bandwidth: float = DEFAULT_BANDWIDTH,
                 bin_width_m: float = BIN_WIDTH_M, oversample: int = OVERSAMPLE) -> float:
    """Sub-bin peak location of an ambient-corrected histogram, in meters.

    A natural cubic spline through (bin index, corrected count) is sampled
    ``oversample`` times per bin; ties go to the smaller distance.
    """
    h = np.asarray(histogram, dtype=float).ravel()
    if h.size == 0:
        raise InvalidInputError("empty histogram")
    corrected = h - estimate_ambient(h, bandwidth)
    if not np.any(corrected > 0):
        raise NoPeakError("histogram has no signal above the ambient level")
    if h.size < 3:
        return float(np.argmax(corrected)) * bin_width_m
    idx = np.arange(h.size, dtype=float)
    spline = CubicSpline(idx, corrected, bc_type="natural")
    n_fine = (h.size - 1) * oversample + 1
    fine = np.arange(n_fine) / oversample
    values = spline(fine)
    # Values equal up to rounding count as a tie; the nearest one wins.
    top = values.max()
    pos = fine[int(np.argmax(values >= top - 1e-12 * abs(top)))]
    return float(pos) * bin_width_m


def peaks_feature(frame: Frame, bandwidth: float = DEFAULT_BANDWIDTH,
                  bin_width_m: float = BIN_WIDTH_M) -> DistanceFeature:
    values = []
    for i, px in enumerate(frame.counts):
        try:
            values.append(extract_peak(px, bandwidth, bin_width_m))
        except NoPeakError as exc:
            raise NoPeakError(f"pixel {i}: {exc}") from exc
    return DistanceFeature(np.array(values))


def onboard_feature(frame: Frame) -> DistanceFeature:
    if frame.onboard_distances is None:
        raise InvalidInputError(f"frame {frame.capture_id!r} has no onboard distances")
    return DistanceFeature(np.array(frame.onboard_distances))

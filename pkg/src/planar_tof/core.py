"""Frames, dataset I/O and histogram pre-processing.

A :class:`Frame` is one capture from a multi-pixel time-resolved distance
sensor: ``p`` transient histograms of ``b`` photon-count bins each. Before a
surface model sees a frame, every pixel's ambient (DC) level is estimated as
the mode of a Gaussian kernel density over its bin values, subtracted, and the
result divided by the histogram's L1 norm. Pixels are then trimmed to a bin
window and concatenated into a single feature vector.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import DatasetParseError, DegenerateInputError, InvalidInputError

DEFAULT_BANDWIDTH = 5.0
DEFAULT_BIN_RANGE = (13, 73)


class Label(str, enum.Enum):
    PLANAR = "planar"
    DEVIATION = "deviation"


@dataclass(frozen=True)
class Frame:
    """One sensor measurement.

    ``pixels`` is row-major over the sensor array and bin 0 is the nearest
    range. ``onboard_distances`` holds the sensor's own per-pixel distance
    estimates in meters, when available.
    """

    pixels: tuple
    label: Label = Label.PLANAR
    surface_id: str = ""
    capture_id: str = ""
    onboard_distances: Optional[tuple] = None
    sublabel: Optional[str] = None
    deviation_distance_m: Optional[float] = None

    def __post_init__(self):
        pixels = tuple(tuple(int(v) for v in px) for px in self.pixels)
        if not pixels:
            raise InvalidInputError("frame has no pixels")
        b = len(pixels[0])
        if b == 0:
            raise InvalidInputError("frame histograms are empty")
        for i, px in enumerate(pixels):
            if len(px) != b:
                raise InvalidInputError(
                    f"pixel {i} has {len(px)} bins, expected {b}")
            if min(px) < 0:
                raise InvalidInputError(f"pixel {i} has a negative bin count")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "label", Label(self.label))
        if self.onboard_distances is not None:
            dist = tuple(float(d) for d in self.onboard_distances)
            if len(dist) != len(pixels):
                raise InvalidInputError(
                    f"{len(dist)} onboard distances for {len(pixels)} pixels")
            object.__setattr__(self, "onboard_distances", dist)
        if self.deviation_distance_m is not None:
            object.__setattr__(self, "deviation_distance_m",
                               float(self.deviation_distance_m))

    @property
    def n_pixels(self) -> int:
        return len(self.pixels)

    @property
    def n_bins(self) -> int:
        return len(self.pixels[0])

    @cached_property
    def counts(self) -> np.ndarray:
        """Read-only ``(p, b)`` integer array view of :attr:`pixels`."""
        arr = np.array(self.pixels, dtype=np.int64)
        arr.setflags(write=False)
        return arr

    @property
    def is_deviation(self) -> bool:
        return self.label is Label.DEVIATION


@dataclass(frozen=True)
class PreprocessConfig:
    """Settings for :func:`preprocess`.

    ``bin_range`` is a half-open ``[lo, hi)`` window applied after ambient
    removal and normalization. With ``normalize_after_ambient`` the L1 norm
    is taken of the ambient-corrected histogram instead of the raw one.
    """

    kde_bandwidth: float = DEFAULT_BANDWIDTH
    bin_range: tuple = DEFAULT_BIN_RANGE
    ambient_correction: bool = True
    normalization: bool = True
    normalize_after_ambient: bool = False

    def __post_init__(self):
        lo, hi = (int(v) for v in self.bin_range)
        object.__setattr__(self, "bin_range", (lo, hi))
        if not self.kde_bandwidth > 0:
            raise InvalidInputError("kde_bandwidth must be positive")
        if not 0 <= lo < hi:
            raise InvalidInputError(f"invalid bin_range {self.bin_range}")

    @property
    def bins_kept(self) -> int:
        return self.bin_range[1] - self.bin_range[0]

    def feature_dim(self, n_pixels: int) -> int:
        return n_pixels * self.bins_kept

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bin_range"] = list(self.bin_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(**d)


@dataclass(frozen=True)
class ProcessedFeature:
    values: np.ndarray
    ambient_levels: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.values)


# -- ambient estimation ------------------------------------------------------

def _kde(x: np.ndarray, data: np.ndarray, bandwidth: float, weights=None) -> np.ndarray:
    """Unnormalized Gaussian KDE of ``data`` rows evaluated at ``x`` rows.

    ``x`` is ``(p, m)`` and ``data`` is ``(p, b)``; returns ``(p, m)``.
    ``weights`` (same shape as ``data``) counts repeated values.
    """
    z = (x[:, :, None] - data[:, None, :]) / bandwidth
    g = np.exp(-0.5 * z * z)
    if weights is not None:
        g = g * weights[:, None, :]
    return g.sum(axis=2)


def _kde_d1(x: np.ndarray, data: np.ndarray, bandwidth: float, weights):
    """Density and its derivative (times ``bandwidth``) at ``x`` rows."""
    z = (x[:, :, None] - data[:, None, :]) / bandwidth
    g = np.exp(-0.5 * z * z) * weights[:, None, :]
    return g.sum(axis=2), -(z * g).sum(axis=2)


def _unique_rows(data: np.ndarray):
    """Distinct values of every row with their multiplicities, zero-weight padded."""
    p = data.shape[0]
    srt = np.sort(data, axis=1)
    new = np.ones_like(srt, dtype=bool)
    new[:, 1:] = srt[:, 1:] != srt[:, :-1]
    idx = np.cumsum(new, axis=1) - 1
    width = int(idx[:, -1].max()) + 1
    rows = np.broadcast_to(np.arange(p)[:, None], srt.shape)
    values = np.repeat(srt[:, :1], width, axis=1)
    values[rows[new], idx[new]] = srt[new]
    weights = np.zeros((p, width))
    np.add.at(weights, (rows, idx), 1.0)
    return values, weights


def _newton_polish(x, lo, hi, data, bandwidth, weights, steps=3):
    """A few guarded Newton steps on the KDE derivative.

    Bisection leaves the mode about ``tol`` off, which is enough to flip a
    near tie between two distant modes. A step is taken only where the
    density is concave, the result stays in ``[lo, hi]`` and it does not
    lower the density.
    """
    f = _kde(x, data, bandwidth, weights)
    for _ in range(steps):
        z = (x[:, :, None] - data[:, None, :]) / bandwidth
        g = np.exp(-0.5 * z * z) * weights[:, None, :]
        d1 = -(z * g).sum(axis=2)
        d2 = ((z * z - 1.0) * g).sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(d2 < 0, -d1 / d2 * bandwidth, 0.0)
        cand = np.clip(x + step, lo, hi)
        fc = _kde(cand, data, bandwidth, weights)
        better = fc >= f
        x, f = np.where(better, cand, x), np.where(better, fc, f)
    return x


_PROBE_OFFSETS = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
_TIE_RTOL = 1e-12


def ambient_levels(counts, bandwidth: float = DEFAULT_BANDWIDTH,
                   max_starts: int = 8) -> np.ndarray:
    """Per-row KDE mode for a ``(p, b)`` array of histograms.

    Every local maximum of a Gaussian KDE lies within one bandwidth of a
    sample, since the density is convex farther out. The density and its
    slope are probed at each bin value and at half and whole bandwidths on
    either side; every gap where the slope turns from rising to falling
    brackets a maximum. The densest brackets are narrowed by bisection on
    the slope and polished with Newton steps. Densities within 1e-12
    relative of the best count as tied and the smallest value wins.
    """
    data = np.asarray(counts, dtype=float)
    if data.ndim == 1:
        data = data[None, :]
    if data.size == 0 or data.shape[1] == 0:
        raise InvalidInputError("cannot estimate ambient level of an empty histogram")
    if not bandwidth > 0:
        raise InvalidInputError("bandwidth must be positive")

    p = data.shape[0]
    lo_data, hi_data = data.min(axis=1, keepdims=True), data.max(axis=1, keepdims=True)
    values, weights = _unique_rows(data)
    probes = np.sort((values[:, :, None] + bandwidth * _PROBE_OFFSETS).reshape(p, -1), axis=1)
    probes = np.clip(probes, lo_data, hi_data)
    f, d1 = _kde_d1(probes, values, bandwidth, weights)

    rising, falling = d1[:, :-1] > 0, d1[:, 1:] <= 0
    bracket = rising & falling & (probes[:, 1:] > probes[:, :-1])
    rank = np.where(bracket, np.maximum(f[:, :-1], f[:, 1:]), -np.inf)
    m = min(max_starts, rank.shape[1])
    order = np.argsort(-rank, axis=1, kind="stable")[:, :m]
    valid = np.take_along_axis(bracket, order, axis=1)
    lo = np.take_along_axis(probes[:, :-1], order, axis=1)
    hi = np.take_along_axis(probes[:, 1:], order, axis=1)
    lo0, hi0 = lo.copy(), hi.copy()
    tol = 1e-4 * bandwidth
    while np.max(np.where(valid, hi - lo, 0.0), initial=0.0) > tol:
        mid = 0.5 * (lo + hi)
        up = _kde_d1(mid, values, bandwidth, weights)[1] > 0
        lo, hi = np.where(up, mid, lo), np.where(up, hi, mid)
    modes = _newton_polish(0.5 * (lo + hi), lo0, hi0, values, bandwidth, weights)

    # Probes are candidates too, which also covers maxima sitting on a probe.
    cand = np.concatenate([np.where(valid, modes, probes[:, :1]), probes], axis=1)
    dens = np.concatenate([_kde(cand[:, :m], values, bandwidth, weights), f], axis=1)
    best = dens.max(axis=1, keepdims=True)
    return np.where(dens >= best * (1.0 - _TIE_RTOL), cand, np.inf).min(axis=1)


def estimate_ambient(histogram, bandwidth: float = DEFAULT_BANDWIDTH) -> float:
    """Ambient light level of one histogram, as the mode of its bin-value KDE.

    Args:
        histogram: 1-D sequence of bin counts.
        bandwidth: Gaussian kernel standard deviation, in counts.

    Returns:
        The value maximizing ``sum_h N(x; h, bandwidth^2)``. It always lies
        within ``[min(histogram), max(histogram)]``.
    """
    h = np.asarray(histogram, dtype=float).ravel()
    if h.size == 0:
        raise InvalidInputError("cannot estimate ambient level of an empty histogram")
    return float(ambient_levels(h[None, :], bandwidth)[0])


# -- pre-processing ----------------------------------------------------------

def preprocess_counts(counts, config: PreprocessConfig):
    """Vectorized core of :func:`preprocess` on a ``(p, b)`` count array.

    Returns ``(values, ambient)`` with ``values`` of length ``p * (hi - lo)``.
    """
    h = np.asarray(counts, dtype=float)
    p, b = h.shape
    lo, hi = config.bin_range
    if hi > b:
        raise InvalidInputError(f"bin_range {config.bin_range} exceeds {b} bins")

    if config.ambient_correction:
        ambient = ambient_levels(h, config.kde_bandwidth)
    else:
        ambient = np.zeros(p)
    corrected = h - ambient[:, None]

    if config.normalization:
        base = corrected if config.normalize_after_ambient else h
        norms = np.abs(base).sum(axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise DegenerateInputError(f"pixel {int(zero[0])} has zero L1 norm")
        corrected = corrected / norms[:, None]

    return corrected[:, lo:hi].reshape(-1), ambient


def preprocess(frame: Frame, config: PreprocessConfig = PreprocessConfig()) -> ProcessedFeature:
    """Ambient-correct, L1-normalize, trim and flatten one frame."""
    values, ambient = preprocess_counts(frame.counts, config)
    return ProcessedFeature(values=values, ambient_levels=ambient)


def feature_matrix(frames: Sequence[Frame], config: PreprocessConfig) -> np.ndarray:
    """Stack :func:`preprocess` outputs for many frames into an ``(N, k)`` array."""
    if not frames:
        return np.zeros((0, 0))
    return np.stack([preprocess_counts(f.counts, config)[0] for f in frames])


# -- dataset I/O -------------------------------------------------------------

_REQUIRED = ("capture_id", "surface_id", "label", "pixels")


def frame_to_record(frame: Frame) -> dict:
    return {
        "capture_id": frame.capture_id,
        "surface_id": frame.surface_id,
        "label": frame.label.value,
        "sublabel": frame.sublabel,
        "deviation_distance_m": frame.deviation_distance_m,
        "pixels": [list(px) for px in frame.pixels],
        "onboard_distances_m": (list(frame.onboard_distances)
                                if frame.onboard_distances is not None else None),
    }


def frame_from_record(rec: dict, line: int = 0) -> Frame:
    if not isinstance(rec, dict):
        raise DatasetParseError(line, "record is not a JSON object")
    for key in _REQUIRED:
        if key not in rec:
            raise DatasetParseError(line, f"missing field '{key}'")
    if rec["label"] not in (Label.PLANAR.value, Label.DEVIATION.value):
        raise DatasetParseError(line, f"unknown label {rec['label']!r}")
    pixels = rec["pixels"]
    if (not isinstance(pixels, list) or not pixels
            or not all(isinstance(px, list) for px in pixels)):
        raise DatasetParseError(line, "'pixels' must be a non-empty list of lists")
    for px in pixels:
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in px):
            raise DatasetParseError(line, "'pixels' must contain integers")
    try:
        return Frame(
            pixels=pixels,
            label=Label(rec["label"]),
            surface_id=str(rec["surface_id"]),
            capture_id=str(rec["capture_id"]),
            onboard_distances=rec.get("onboard_distances_m"),
            sublabel=rec.get("sublabel"),
            deviation_distance_m=rec.get("deviation_distance_m"),
        )
    except InvalidInputError as exc:
        raise InvalidInputError(f"line {line}: {exc}") from exc


def dumps_dataset(frames: Iterable[Frame]) -> str:
    return "".join(json.dumps(frame_to_record(f)) + "\n" for f in frames)


def write_dataset(frames: Iterable[Frame], path) -> None:
    """Write frames as JSON Lines, one frame per line."""
    atomic_write_text(path, dumps_dataset(frames))


def read_dataset(path) -> list:
    """Read a JSON Lines dataset written by :func:`write_dataset`.

    Raises:
        DatasetParseError: a line is not valid JSON or misses a field.
        InvalidInputError: pixel or distance counts are inconsistent.
    """
    frames = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(lineno, f"invalid JSON ({exc.msg})") from exc
            frames.append(frame_from_record(rec, lineno))
    return frames

"""Forward model of a small multi-pixel time-resolved distance sensor.

Each pixel is a cone of rays. A ray that hits a surface at range ``d`` with
incidence cosine ``cos_i`` returns ``energy * albedo * cos_i / d**2`` photons
(split evenly across the pixel's rays), blurred by a Gaussian pulse and
binned by range. Every bin also collects a constant ambient rate, and final
counts are Poisson draws of the expectation. Pile-up is not modeled.

World frame: the plane is ``z = 0``; the sensor sits at ``(0, 0, h)`` and
looks along ``+x`` tilted down so its optical axis meets the plane at the
configured angle of incidence. ``x`` is the forward horizontal distance and
``y`` points to the sensor's left.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr

from .core import Frame, Label
from .errors import EmptySceneError, InvalidInputError

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
# Pulse support in standard deviations; mass outside is renormalized away.
PULSE_SUPPORT = 3.0


@dataclass(frozen=True)
class SensorSpec:
    """Sensor intrinsics.

    ``zero_bin`` is the bin index that corresponds to zero range, so the
    usable range is ``(bins - zero_bin) * bin_width_m``.
    ``laser_energy`` is the expected signal count of a whole pixel imaging a
    unit-albedo surface at 1 m, face on.
    """

    rows: int = 3
    cols: int = 3
    bins: int = 128
    bin_width_m: float = 0.012
    zero_bin: int = 5
    pixel_half_angle_deg: float = 10.0
    pixel_pitch_deg: float = 20.0
    pulse_sigma_m: float = 0.018
    laser_energy: float = 12000.0
    ambient_rate: float = 40.0
    rays_per_pixel: int = 256

    def __post_init__(self):
        for name in ("rows", "cols", "bins", "rays_per_pixel"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("bin_width_m", "pixel_half_angle_deg", "pulse_sigma_m"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.laser_energy < 0 or self.ambient_rate < 0:
            raise InvalidInputError("laser_energy and ambient_rate must be non-negative")
        if not 0 <= self.zero_bin < self.bins:
            raise InvalidInputError("zero_bin must index a bin")

    @property
    def n_pixels(self) -> int:
        return self.rows * self.cols

    @property
    def max_range_m(self) -> float:
        return (self.bins - self.zero_bin) * self.bin_width_m

    def bin_of_range(self, d):
        return np.asarray(d) / self.bin_width_m + self.zero_bin


@dataclass(frozen=True)
class Box:
    """Axis-aligned box resting on the plane; ``depth`` runs along x, ``width`` along y."""

    x: float
    y: float
    width: float
    depth: float
    height: float
    albedo: float = 0.5


@dataclass(frozen=True)
class Cliff:
    """The plane ends at ``x = edge_distance``; nothing lies beyond."""

    edge_distance: float


@dataclass(frozen=True)
class AlbedoPatch:
    """Flat rectangle on the plane whose albedo replaces the surface's."""

    x: float
    y: float
    width: float
    depth: float
    albedo: float


Deviation = Union[Box, Cliff, AlbedoPatch]


@dataclass(frozen=True)
class AlbedoMap:
    """Reflectance of the plane: ``base * texture(x, y) * specular_gain(angle)``.

    ``texture`` is one of ``none``, ``stripes`` (varying along x), ``checker``
    or ``grid`` (thin dark lines every period, like tile grout).
    ``specular`` in [0, 1] blends a diffuse response with a lobe that peaks
    at normal incidence and falls off with width ``lobe_deg``; it stands in
    for a glossy BRDF.
    """

    base: float = 0.5
    texture: str = "none"
    texture_amp: float = 0.0
    texture_period_m: float = 0.05
    offset: tuple = (0.0, 0.0)
    specular: float = 0.0
    lobe_deg: float = 35.0

    def __post_init__(self):
        if self.texture not in ("none", "stripes", "checker", "grid"):
            raise InvalidInputError(f"unknown texture {self.texture!r}")

    def evaluate(self, x, y, cos_i):
        u = (x + self.offset[0]) / self.texture_period_m
        v = (y + self.offset[1]) / self.texture_period_m
        if self.texture == "stripes":
            tex = 1.0 + self.texture_amp * np.sin(2 * np.pi * u)
        elif self.texture == "checker":
            tex = 1.0 + self.texture_amp * np.sign(np.sin(2 * np.pi * u) * np.sin(2 * np.pi * v))
        elif self.texture == "grid":
            line = (np.abs(u - np.round(u)) < 0.05) | (np.abs(v - np.round(v)) < 0.05)
            tex = np.where(line, 1.0 - self.texture_amp, 1.0)
        else:
            tex = np.ones_like(x)
        alb = self.base * tex
        if self.specular > 0:
            angle = np.degrees(np.arccos(np.clip(cos_i, -1.0, 1.0)))
            lobe = 2.5 * np.exp(-(angle / self.lobe_deg) ** 2)
            alb = alb * ((1.0 - self.specular) + self.specular * lobe)
        return np.clip(alb, 0.0, 1.0)


@dataclass(frozen=True)
class SceneSpec:
    """A plane seen from a fixed pose, plus optional deviations.

    ``plane_distance_m`` is the perpendicular sensor-to-plane distance and
    ``incidence_deg`` the angle between the optical axis and the plane
    normal. ``ambient_scale`` multiplies the sensor's ambient rate (lighting).
    The label fields are copied onto rendered frames.
    """

    plane_distance_m: float = 0.10
    incidence_deg: float = 60.0
    albedo: AlbedoMap = field(default_factory=AlbedoMap)
    deviations: tuple = ()
    ambient_scale: float = 1.0
    label: Label = Label.PLANAR
    sublabel: Optional[str] = None
    deviation_distance_m: Optional[float] = None
    surface_id: str = ""
    capture_id: str = ""

    def __post_init__(self):
        if not self.plane_distance_m > 0:
            raise InvalidInputError("plane_distance_m must be positive")
        for dev in self.deviations:
            alb = getattr(dev, "albedo", None)
            if alb is not None and not 0 < alb <= 1:
                raise InvalidInputError(f"albedo {alb} outside (0, 1]")
        object.__setattr__(self, "deviations", tuple(self.deviations))


# -- geometry ------------------------------------------------------------------

def _sensor_axes(incidence_deg: float):
    dep = math.radians(90.0 - incidence_deg)
    axis = np.array([math.cos(dep), 0.0, -math.sin(dep)])
    up = np.array([math.sin(dep), 0.0, math.cos(dep)])
    left = np.array([0.0, 1.0, 0.0])
    return axis, up, left


def pixel_rays(sensor: SensorSpec, incidence_deg: float) -> np.ndarray:
    """Unit ray directions, shape ``(p, n, 3)``, row-major with row 0 on top.

    Rays follow a sunflower pattern that covers each pixel cone uniformly in
    solid angle.
    """
    axis, up, left = _sensor_axes(incidence_deg)
    n = sensor.rays_per_pixel
    i = np.arange(n)
    cos_t = 1.0 - (i + 0.5) / n * (1.0 - math.cos(math.radians(sensor.pixel_half_angle_deg)))
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    phi = i * _GOLDEN_ANGLE
    pitch = math.tan(math.radians(sensor.pixel_pitch_deg))
    rays = np.empty((sensor.n_pixels, n, 3))
    for r in range(sensor.rows):
        for c in range(sensor.cols):
            off_r = (sensor.rows - 1) / 2.0 - r
            off_c = (sensor.cols - 1) / 2.0 - c
            center = axis + pitch * off_r * up + pitch * off_c * left
            center /= np.linalg.norm(center)
            e1 = up - (up @ center) * center
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(center, e1)
            rays[r * sensor.cols + c] = (cos_t[:, None] * center
                                         + (sin_t * np.cos(phi))[:, None] * e1
                                         + (sin_t * np.sin(phi))[:, None] * e2)
    return rays


def _intersect_box(origin, dirs, box: Box):
    lo = np.array([box.x - box.depth / 2, box.y - box.width / 2, 0.0])
    hi = np.array([box.x + box.depth / 2, box.y + box.width / 2, box.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    face = tmin.argmax(axis=-1)
    cos_i = np.abs(np.take_along_axis(dirs, face[..., None], axis=-1)[..., 0])
    return np.where(hit, t_near, np.inf), cos_i


def trace(sensor: SensorSpec, scene: SceneSpec):
    """Cast every pixel's rays into the scene.

    Returns ``(ranges, weights)``, each ``(p, n)``: the one-way range of each
    ray's first hit (``inf`` for a miss) and the expected photon return.
    """
    h = scene.plane_distance_m
    origin = np.array([0.0, 0.0, h])
    dirs = pixel_rays(sensor, scene.incidence_deg)
    dz = dirs[..., 2]

    with np.errstate(divide="ignore"):
        t_plane = np.where(dz < 0, h / -dz, np.inf)
    finite = np.isfinite(t_plane)
    px = np.where(finite, dirs[..., 0] * np.where(finite, t_plane, 0.0), np.inf)
    py = np.where(finite, dirs[..., 1] * np.where(finite, t_plane, 0.0), 0.0)
    for dev in scene.deviations:
        if isinstance(dev, Cliff):
            t_plane = np.where(px > dev.edge_distance, np.inf, t_plane)
    cos_plane = np.clip(-dz, 0.0, 1.0)
    alb = np.where(finite, scene.albedo.evaluate(np.where(finite, px, 0.0), py, cos_plane),
                   0.0)
    for dev in scene.deviations:
        if isinstance(dev, AlbedoPatch):
            inside = ((np.abs(px - dev.x) <= dev.depth / 2)
                      & (np.abs(py - dev.y) <= dev.width / 2))
            alb = np.where(inside, dev.albedo, alb)

    t_best, cos_best, alb_best = t_plane, cos_plane, alb
    for dev in scene.deviations:
        if isinstance(dev, Box):
            t_box, cos_box = _intersect_box(origin, dirs, dev)
            nearer = t_box < t_best
            t_best = np.where(nearer, t_box, t_best)
            cos_best = np.where(nearer, cos_box, cos_best)
            alb_best = np.where(nearer, dev.albedo, alb_best)

    in_range = np.isfinite(t_best) & (t_best <= sensor.max_range_m)
    ranges = np.where(in_range, t_best, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        weights = np.where(
            in_range,
            sensor.laser_energy * alb_best * cos_best / (t_best ** 2) / sensor.rays_per_pixel,
            0.0)
    return ranges, weights


def _deposit(sensor: SensorSpec, ranges, weights) -> np.ndarray:
    """Blur each ray's return with the truncated Gaussian pulse and bin it, ``(p, b)``."""
    p = ranges.shape[0]
    edges = (np.arange(sensor.bins + 1) - sensor.zero_bin - 0.5) * sensor.bin_width_m
    out = np.zeros((p, sensor.bins))
    norm = ndtr(PULSE_SUPPORT) - ndtr(-PULSE_SUPPORT)
    for i in range(p):
        hit = np.isfinite(ranges[i]) & (weights[i] > 0)
        if not hit.any():
            continue
        z = (edges[None, :] - ranges[i, hit, None]) / sensor.pulse_sigma_m
        cdf = ndtr(np.clip(z, -PULSE_SUPPORT, PULSE_SUPPORT))
        out[i] = (weights[i, hit, None] * np.diff(cdf, axis=1)).sum(axis=0) / norm
    return out


def expected_signal(sensor: SensorSpec, scene: SceneSpec) -> np.ndarray:
    """Noiseless laser return per pixel and bin, ambient excluded, ``(p, b)``."""
    ranges, weights = trace(sensor, scene)
    return _deposit(sensor, ranges, weights)


def expected_histograms(sensor: SensorSpec, scene: SceneSpec) -> np.ndarray:
    """Noiseless expected counts, ambient included, ``(p, b)``."""
    return expected_signal(sensor, scene) + sensor.ambient_rate * scene.ambient_scale


def matched_filter_distance(sensor: SensorSpec, signal: np.ndarray) -> np.ndarray:
    """Per-pixel distance from a pulse-shaped matched filter, quantized to whole bins.

    Pixels with no signal report 0 m, as a sensor does for "no target".
    """
    sigma_bins = sensor.pulse_sigma_m / sensor.bin_width_m
    half = int(math.ceil(PULSE_SUPPORT * sigma_bins))
    taps = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (taps / sigma_bins) ** 2)
    out = np.zeros(signal.shape[0])
    for i, s in enumerate(signal):
        if not np.any(s > 0):
            continue
        corr = np.convolve(s, kernel, mode="same")
        out[i] = (int(np.argmax(corr)) - sensor.zero_bin) * sensor.bin_width_m
    return out


def render_frame(sensor: SensorSpec, scene: SceneSpec, seed=0, noise: bool = True) -> Frame:
    """Render one frame of ``scene``.

    With ``noise=False`` bin counts are the rounded expectation instead of
    Poisson draws. The onboard distance is always the matched-filter
    estimate on the noiseless signal.

    A cliff that removes every visible surface is a valid scene (the frame
    holds ambient light only); the scene is rejected only when nothing
    would be in range even without cliffs.

    Raises:
        EmptySceneError: no ray of any pixel hits a surface within range.
    """
    ranges, weights = trace(sensor, scene)
    if not np.isfinite(ranges).any():
        solid = dataclasses.replace(
            scene, deviations=tuple(d for d in scene.deviations if not isinstance(d, Cliff)))
        if not np.isfinite(trace(sensor, solid)[0]).any():
            raise EmptySceneError("no scene surface within sensor range")
    signal = _deposit(sensor, ranges, weights)
    expected = signal + sensor.ambient_rate * scene.ambient_scale
    if noise:
        counts = np.random.default_rng(seed).poisson(expected)
    else:
        counts = np.rint(expected).astype(np.int64)
    return Frame(
        pixels=counts.tolist(),
        label=scene.label,
        surface_id=scene.surface_id,
        capture_id=scene.capture_id,
        onboard_distances=[round(float(v), 9) for v in matched_filter_distance(sensor, signal)],
        sublabel=scene.sublabel,
        deviation_distance_m=scene.deviation_distance_m,
    )


# -- config files --------------------------------------------------------------

def sensor_from_dict(d: Optional[dict]) -> SensorSpec:
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(SensorSpec)}
    unknown = set(d) - names
    if unknown:
        raise InvalidInputError(f"unknown sensor fields {sorted(unknown)}")
    return SensorSpec(**d)


def sensor_to_dict(sensor: SensorSpec) -> dict:
    return dataclasses.asdict(sensor)

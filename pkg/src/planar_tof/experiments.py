"""Synthetic datasets that mirror the capture protocols of the evaluation.

Every frame gets its own RNG derived from ``(seed, frame index)``, so a
dataset is reproducible bit-for-bit and any frame can be regenerated alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import lsq_linear

from .core import Label
from .errors import InvalidInputError
from .simulator import (AlbedoMap, AlbedoPatch, Box, Cliff, SceneSpec, SensorSpec,
                        expected_signal, render_frame)

KINDS = ("forward_facing", "top_down", "cliff_sweep", "ambiguity_demo", "sensitivity_demo")


@dataclass(frozen=True)
class SurfaceProfile:
    """Photometric character of a floor material and its lighting."""

    name: str
    base_albedo: float
    albedo_jitter: float = 0.05
    texture: str = "none"
    texture_amp: float = 0.0
    texture_period_m: float = 0.05
    specular: float = 0.0
    ambient_scale: float = 1.0
    ambient_jitter: float = 0.15

    def albedo_map(self, rng) -> AlbedoMap:
        base = self.base_albedo * float(np.exp(rng.normal(0.0, self.albedo_jitter)))
        offset = tuple(float(v) for v in rng.uniform(0.0, 1.0, size=2))
        return AlbedoMap(base=min(base, 1.0), texture=self.texture,
                         texture_amp=self.texture_amp,
                         texture_period_m=self.texture_period_m,
                         offset=offset, specular=self.specular)

    def ambient(self, rng) -> float:
        return self.ambient_scale * float(np.exp(rng.normal(0.0, self.ambient_jitter)))


SURFACES = {
    "paper": SurfaceProfile("paper", 0.80, texture="stripes", texture_amp=0.03,
                            texture_period_m=0.2),
    "patterned_carpet": SurfaceProfile("patterned_carpet", 0.40, texture="checker",
                                       texture_amp=0.3, texture_period_m=0.06),
    "solid_carpet": SurfaceProfile("solid_carpet", 0.30, texture="stripes",
                                   texture_amp=0.05, texture_period_m=0.01),
    "tile_floor": SurfaceProfile("tile_floor", 0.55, texture="grid", texture_amp=0.3,
                                 texture_period_m=0.3, specular=0.5, ambient_scale=1.3),
    "wood_floor": SurfaceProfile("wood_floor", 0.45, texture="stripes", texture_amp=0.1,
                                 texture_period_m=0.08, ambient_scale=3.0),
}

TABLE = SurfaceProfile("wood_table", 0.5, texture="stripes", texture_amp=0.15,
                       texture_period_m=0.1)


def _object_boxes(name: str, front: float, y: float) -> tuple:
    """Boxes approximating ``name`` with its nearest face at ``x = front``."""
    def box(width, depth, height, albedo, dy=0.0):
        return Box(front + depth / 2, y + dy, width, depth, height, albedo)

    if name == "bottle_cap":
        return (box(0.04, 0.04, 0.025, 0.9),)
    if name == "cable":
        return (box(0.40, 0.02, 0.02, 0.9),)
    if name == "chair":
        legs = []
        for dx in (0.0, 0.4):
            for dy in (-0.2, 0.2):
                legs.append(Box(front + dx + 0.015, y + dy, 0.03, 0.03, 0.45, 0.3))
        return tuple(legs)
    if name == "fork":
        return (box(0.03, 0.20, 0.015, 0.95),)
    if name == "glove":
        return (box(0.10, 0.20, 0.04, 0.4),)
    if name == "sd_card":
        return (box(0.05, 0.06, 0.012, 0.9),)
    if name == "tennis_ball":
        return (box(0.065, 0.065, 0.065, 0.6),)
    if name == "wall":
        return (Box(front + 0.025, 0.0, 3.0, 0.05, 1.0, 0.7),)
    raise InvalidInputError(f"unknown object {name!r}")


OBJECTS = ("bottle_cap", "cable", "chair", "fork", "glove", "sd_card", "tennis_ball", "wall")
TOP_DOWN_OBJECTS = ("bottle_cap", "cable", "fork", "glove", "sd_card", "tennis_ball")

_DEFAULTS = {
    "forward_facing": {
        "surfaces": list(SURFACES), "objects": list(OBJECTS),
        "n_planar": 30, "n_per_object": 10, "distance_range": [0.1, 0.8],
        "height_m": 0.10, "incidence_deg": 60.0,
        "height_jitter_m": 0.0005, "incidence_jitter_deg": 0.1,
        "albedo_variation": True, "ambient_variation": True,
    },
    "top_down": {
        "surfaces": ["solid_carpet"], "objects": list(TOP_DOWN_OBJECTS),
        "n_planar": 30, "n_per_object": 10, "footprint_radius_m": 0.12,
        "height_m": 0.28, "incidence_deg": 0.0,
        "height_jitter_m": 0.0005, "incidence_jitter_deg": 0.1,
        "albedo_variation": True, "ambient_variation": True,
    },
    "cliff_sweep": {
        "edge_distances": [round(0.05 * i, 2) for i in range(1, 16)],
        "n_per_distance": 4, "n_test_planar": 15, "include_training": False,
        "n_train_planar": 15, "height_m": 0.10, "incidence_deg": 60.0,
        "height_jitter_m": 0.0005, "incidence_jitter_deg": 0.1,
    },
    "ambiguity_demo": {
        "n_planar": 30, "n_pair": 10, "height_m": 0.10, "incidence_deg": 60.0,
        "albedo": 0.5, "box": [0.16, 0.0, 0.06, 0.06, 0.003],
    },
    "sensitivity_demo": {
        "n_each": 16, "height_m": 0.20, "incidence_deg": 0.0, "albedo": 0.8,
        "patch": [0.02, 0.02, 0.001],
    },
}


def default_params(kind: str) -> dict:
    if kind not in _DEFAULTS:
        raise InvalidInputError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    return {k: (list(v) if isinstance(v, list) else v) for k, v in _DEFAULTS[kind].items()}


def _frame_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _pose(params, rng):
    h = params["height_m"] + rng.normal(0.0, params.get("height_jitter_m", 0.0))
    inc = params["incidence_deg"] + rng.normal(0.0, params.get("incidence_jitter_deg", 0.0))
    return float(h), float(inc)


def _surface_scene(profile: SurfaceProfile, params, rng, **kw) -> SceneSpec:
    h, inc = _pose(params, rng)
    albedo = profile.albedo_map(rng)
    if not params.get("albedo_variation", True):
        albedo = dataclasses.replace(albedo, base=profile.base_albedo)
    ambient = profile.ambient(rng) if params.get("ambient_variation", True) else 1.0
    return SceneSpec(plane_distance_m=h, incidence_deg=inc, albedo=albedo,
                     ambient_scale=ambient, surface_id=profile.name, **kw)


def _render(sensor, scene, rng):
    return render_frame(sensor, scene, seed=rng)


def _forward_facing(sensor, params, seed):
    frames = []
    index = 0
    lo, hi = params["distance_range"]
    for surface in params["surfaces"]:
        profile = SURFACES[surface]
        for i in range(params["n_planar"]):
            rng = _frame_rng(seed, index)
            scene = _surface_scene(profile, params, rng,
                                   capture_id=f"{surface}-planar-{i:03d}")
            frames.append(_render(sensor, scene, rng))
            index += 1
        for obj in params["objects"]:
            n = params["n_per_object"]
            for i in range(n):
                rng = _frame_rng(seed, index)
                # Stratified over the distance range so every bucket is covered.
                d = lo + (i + rng.uniform()) / n * (hi - lo)
                y = rng.uniform(-1.0, 1.0) * 0.3 * d
                scene = _surface_scene(
                    profile, params, rng, deviations=_object_boxes(obj, d, y),
                    label=Label.DEVIATION, sublabel=obj, deviation_distance_m=round(d, 4),
                    capture_id=f"{surface}-{obj}-{i:03d}")
                frames.append(_render(sensor, scene, rng))
                index += 1
    return frames


def _top_down(sensor, params, seed):
    frames = []
    index = 0
    radius = params["footprint_radius_m"]
    for surface in params["surfaces"]:
        profile = SURFACES[surface]
        for i in range(params["n_planar"]):
            rng = _frame_rng(seed, index)
            scene = _surface_scene(profile, params, rng,
                                   capture_id=f"topdown-{surface}-planar-{i:03d}")
            frames.append(_render(sensor, scene, rng))
            index += 1
        for obj in params["objects"]:
            for i in range(params["n_per_object"]):
                rng = _frame_rng(seed, index)
                r = radius * np.sqrt(rng.uniform())
                phi = rng.uniform(0.0, 2 * np.pi)
                x, y = r * np.cos(phi), r * np.sin(phi)
                boxes = _object_boxes(obj, x, y)
                scene = _surface_scene(
                    profile, params, rng, deviations=boxes, label=Label.DEVIATION,
                    sublabel=obj, deviation_distance_m=round(float(r), 4),
                    capture_id=f"topdown-{surface}-{obj}-{i:03d}")
                frames.append(_render(sensor, scene, rng))
                index += 1
    return frames


def _cliff_sweep(sensor, params, seed):
    frames = []
    index = 0
    if params["include_training"]:
        for i in range(params["n_train_planar"]):
            rng = _frame_rng(seed, index)
            scene = _surface_scene(TABLE, params, rng, sublabel="train",
                                   capture_id=f"cliff-train-{i:03d}")
            frames.append(_render(sensor, scene, rng))
            index += 1
    else:
        index += params["n_train_planar"]
    for i in range(params["n_test_planar"]):
        rng = _frame_rng(seed, index)
        scene = _surface_scene(TABLE, params, rng, sublabel="test",
                               capture_id=f"cliff-test-{i:03d}")
        frames.append(_render(sensor, scene, rng))
        index += 1
    for d in params["edge_distances"]:
        for i in range(params["n_per_distance"]):
            rng = _frame_rng(seed, index)
            scene = _surface_scene(
                TABLE, params, rng, deviations=(Cliff(float(d)),), label=Label.DEVIATION,
                sublabel="cliff", deviation_distance_m=float(d),
                capture_id=f"cliff-{int(round(d * 100)):03d}cm-{i}")
            frames.append(_render(sensor, scene, rng))
            index += 1
    return frames


def tune_albedo_patch(sensor: SensorSpec, scene: SceneSpec, box: Box, n_strips: int = 16):
    """Find a flat albedo pattern that mimics ``box`` on ``scene``'s plane.

    A box moves returned light to shorter ranges (its top and front face are
    nearer than the floor they hide), so a single patch can only match its
    brightness, not that shift. The mimic is a run of ``n_strips`` patches
    along the range direction, covering the box footprint and the floor just
    before and beyond it. The signal is linear in each strip's albedo, so the albedos
    come from one bounded least-squares solve.

    Returns:
        ``(patches, rel_l1)``: the strips and the relative L1 distance
        between the two scenes' noiseless signal histograms.
    """
    target = expected_signal(sensor, dataclasses.replace(scene, deviations=(box,)))
    lo = box.x - box.depth
    hi = box.x + box.depth * 1.5
    step = (hi - lo) / n_strips
    width = box.width

    def strips(albedos):
        return tuple(AlbedoPatch(lo + (i + 0.5) * step, box.y, width, step, float(a))
                     for i, a in enumerate(albedos))

    def signal(albedos):
        return expected_signal(sensor, dataclasses.replace(scene, deviations=strips(albedos)))

    eps = 1e-3
    floor = np.full(n_strips, eps)
    base = signal(floor)
    basis = np.stack([(signal(np.where(np.arange(n_strips) == i, 1.0, eps)) - base).ravel()
                      for i in range(n_strips)], axis=1) / (1.0 - eps)
    fit = lsq_linear(basis, (target - base).ravel() + basis @ floor, bounds=(eps, 1.0))
    patches = strips(fit.x)
    rel = float(np.abs(signal(fit.x) - target).sum() / target.sum())
    return patches, rel


def _ambiguity_demo(sensor, params, seed):
    """Planar reference frames, then noisy box frames and matched-patch frames.

    The first frame of each of the pair groups is rendered without noise.
    """
    base = SceneSpec(plane_distance_m=params["height_m"], incidence_deg=params["incidence_deg"],
                     albedo=AlbedoMap(base=params["albedo"]), surface_id="ambiguity")
    x, y, width, depth, height = params["box"]
    box = Box(x + depth / 2, y, width, depth, height, params["albedo"])
    patches, _ = tune_albedo_patch(sensor, base, box)

    frames = []
    index = 0
    for i in range(params["n_planar"]):
        scene = dataclasses.replace(base, capture_id=f"ambiguity-planar-{i:03d}")
        frames.append(render_frame(sensor, scene, seed=_frame_rng(seed, index)))
        index += 1
    groups = (("box", (box,), Label.DEVIATION), ("albedo_patch", patches, Label.PLANAR))
    for name, devs, label in groups:
        for i in range(params["n_pair"]):
            scene = dataclasses.replace(base, deviations=devs, label=label, sublabel=name,
                                        deviation_distance_m=x,
                                        capture_id=f"ambiguity-{name}-{i:03d}")
            frames.append(render_frame(sensor, scene, seed=_frame_rng(seed, index),
                                       noise=i > 0))
            index += 1
    return frames


def _sensitivity_demo(sensor, params, seed):
    base = SceneSpec(plane_distance_m=params["height_m"], incidence_deg=params["incidence_deg"],
                     albedo=AlbedoMap(base=params["albedo"]), surface_id="paper")
    width, depth, height = params["patch"]
    sheet = Box(0.0, 0.0, width, depth, height, params["albedo"])
    frames = []
    index = 0
    for name, devs, label in (("flat", (), Label.PLANAR),
                              ("paper_square", (sheet,), Label.DEVIATION)):
        for i in range(params["n_each"]):
            scene = dataclasses.replace(
                base, deviations=devs, label=label,
                sublabel=None if not devs else name,
                capture_id=f"sensitivity-{name}-{i:03d}")
            frames.append(render_frame(sensor, scene, seed=_frame_rng(seed, index)))
            index += 1
    return frames


_BUILDERS = {
    "forward_facing": _forward_facing,
    "top_down": _top_down,
    "cliff_sweep": _cliff_sweep,
    "ambiguity_demo": _ambiguity_demo,
    "sensitivity_demo": _sensitivity_demo,
}


def generate_experiment(kind: str, params: Optional[dict] = None, seed: int = 0,
                        sensor: Optional[SensorSpec] = None) -> list:
    """Generate the labeled frames of one synthetic experiment.

    Args:
        kind: One of :data:`KINDS`.
        params: Overrides for :func:`default_params` of ``kind``.
        seed: Root seed; frame ``i`` uses ``SeedSequence([seed, i])``.
        sensor: Sensor intrinsics, defaults to :class:`SensorSpec`.
    """
    full = default_params(kind)
    unknown = set(params or {}) - set(full)
    if unknown:
        raise InvalidInputError(f"unknown parameters for {kind}: {sorted(unknown)}")
    full.update(params or {})
    return _BUILDERS[kind](sensor or SensorSpec(), full, seed)

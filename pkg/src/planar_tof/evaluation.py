"""Metrics and experiment protocols.

Scores produced by a surface model are log-likelihoods: high means "looks
like the training plane". For ROC analysis the deviation class is positive
and the anomaly score is the negated log-likelihood.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import baselines
from .core import Frame, PreprocessConfig, feature_matrix
from .errors import InvalidInputError
from .mixture import FitConfig, SurfaceModel, score_many, select_components

METHODS = ("histogram", "peaks", "onboard")
PROTOCOLS = ("per_object", "by_distance", "surface_splits", "cliff_range", "ablation",
             "sample_sweep", "ambiguity")


# -- metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auroc: float


def compute_roc(scores, labels) -> RocCurve:
    """ROC of ``scores`` (higher = more likely positive) against boolean ``labels``.

    The threshold sweeps every unique score from high to low; samples that
    share a score enter together, giving a diagonal segment. The curve
    starts at (0, 0) with an infinite threshold. AUROC is the trapezoidal
    area, so ties count one half.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise InvalidInputError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auroc)


def threshold_at_fpr(negative_scores, max_fpr: float) -> float:
    """Largest log-likelihood threshold whose false positive rate is below ``max_fpr``.

    A sample is called a deviation when its score is strictly below the
    threshold, so the returned value is the ``m``-th smallest negative score
    with ``m`` the most negatives allowed below it.
    """
    neg = np.sort(np.asarray(negative_scores, dtype=float).ravel())
    if neg.size == 0:
        raise InvalidInputError("no negative scores")
    if not 0 < max_fpr < 1:
        raise InvalidInputError("max_fpr must lie in (0, 1)")
    allowed = math.ceil(max_fpr * neg.size) - 1
    return float(neg[max(allowed, 0)])


def false_positive_rate(negative_scores, threshold: float) -> float:
    neg = np.asarray(negative_scores, dtype=float)
    return float(np.mean(neg < threshold))


def default_buckets():
    return [round(0.1 * i, 1) for i in range(1, 9)]


def detection_by_distance(scores, distances, threshold: float, edges) -> list:
    """Detection rate of deviation samples per distance bucket ``(lo, hi]``."""
    s = np.asarray(scores, dtype=float)
    d = np.asarray(distances, dtype=float)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        inside = (d > lo) & (d <= hi)
        n = int(inside.sum())
        hits = int((s[inside] < threshold).sum())
        rows.append({"lo": lo, "hi": hi, "n": n, "detected": hits,
                     "rate": hits / n if n else None})
    return rows


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    scores: list
    roc: RocCurve
    auroc: float
    per_group_auroc: dict
    threshold_at_fpr: float
    detection_by_distance: list
    model_components: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "auroc": self.auroc,
            "per_group_auroc": self.per_group_auroc,
            "threshold_at_fpr": self.threshold_at_fpr,
            "model_components": self.model_components,
            "detection_by_distance": self.detection_by_distance,
            "roc": [{"fpr": float(f), "tpr": float(t), "threshold": _finite(th)}
                    for f, t, th in zip(self.roc.fpr, self.roc.tpr, self.roc.thresholds)],
            "scores": self.scores,
        }


def _finite(v):
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass
class ProtocolResult:
    protocol: str
    reports: dict = field(default_factory=dict)
    table: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "summary": self.summary,
            "table": self.table,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
        }


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple = METHODS
    preprocess: PreprocessConfig = PreprocessConfig()
    fit: FitConfig = FitConfig()
    score_form: str = "eq3"
    max_fpr: float = 0.05
    seed: int = 0
    bucket_edges: tuple = tuple(default_buckets())
    sweep_counts: tuple = (1, 2, 3, 5, 10, 15)
    sweep_repeats: int = 100


# -- features and fitting ------------------------------------------------------

def method_features(frames: Sequence[Frame], method: str,
                    preprocess: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Feature matrix for ``method``: ``(N, p*(hi-lo))`` histograms or ``(N, p)`` distances."""
    if method == "histogram":
        return feature_matrix(frames, preprocess)
    if method == "peaks":
        return np.stack([baselines.peaks_feature(f, preprocess.kde_bandwidth).values
                         for f in frames])
    if method == "onboard":
        return np.stack([baselines.onboard_feature(f).values for f in frames])
    raise InvalidInputError(f"unknown method {method!r}; expected one of {METHODS}")


def fit_model(X, method: str, config: EvalConfig, fit: Optional[FitConfig] = None,
              preprocess: Optional[PreprocessConfig] = None) -> SurfaceModel:
    return select_components(X, fit or config.fit, score_form=config.score_form,
                             preprocess_config=preprocess or config.preprocess,
                             method=method)


def _sorted_frames(frames):
    return sorted(frames, key=lambda f: f.capture_id)


def planar_split(frames, seed: int, train_fraction: float = 0.5):
    """Split planar frames per surface into train and test halves.

    Frames are ordered by ``capture_id`` before a seeded permutation, so the
    split ignores input order. Returns ``(train_idx, test_idx)`` into the
    capture-sorted frame list, test including every deviation frame.
    """
    by_surface = {}
    for i, f in enumerate(frames):
        if not f.is_deviation:
            by_surface.setdefault(f.surface_id, []).append(i)
    train = []
    for n_surf, surface in enumerate(sorted(by_surface)):
        idx = by_surface[surface]
        rng = np.random.default_rng([seed, n_surf])
        perm = rng.permutation(len(idx))
        n_train = int(len(idx) * train_fraction)
        train.extend(idx[j] for j in perm[:n_train])
    train_set = set(train)
    test = [i for i in range(len(frames)) if i not in train_set]
    return sorted(train), test


def _require(frames, attr, when=lambda f: True):
    for f in frames:
        if when(f) and getattr(f, attr) is None:
            raise InvalidInputError(f"frame {f.capture_id!r} is missing '{attr}'")


def _report(method, model, frames, X_test, test_idx, config: EvalConfig) -> EvalReport:
    ll = score_many(model, X_test)
    test = [frames[i] for i in test_idx]
    labels = np.array([f.is_deviation for f in test])
    roc = compute_roc(-ll, labels)
    groups = {}
    for f, s in zip(test, ll):
        if f.is_deviation:
            groups.setdefault(f.sublabel or "deviation", []).append(s)
    neg = ll[~labels]
    per_group = {}
    for name in sorted(groups):
        g = np.asarray(groups[name])
        per_group[name] = compute_roc(np.r_[-g, -neg],
                                      np.r_[np.ones(g.size), np.zeros(neg.size)]).auroc
    thr = threshold_at_fpr(neg, config.max_fpr)
    pos_idx = np.flatnonzero(labels)
    dist = [test[i].deviation_distance_m for i in pos_idx]
    if all(d is not None for d in dist) and dist:
        by_dist = detection_by_distance(ll[pos_idx], dist, thr, list(config.bucket_edges))
    else:
        by_dist = []
    rows = [{"capture_id": f.capture_id, "score": float(s), "label": f.label.value,
             "sublabel": f.sublabel, "deviation_distance_m": f.deviation_distance_m}
            for f, s in zip(test, ll)]
    return EvalReport(method, rows, roc, roc.auroc, per_group, thr, by_dist,
                      model.component_count)


# -- protocols -----------------------------------------------------------------

def _per_object(frames, config: EvalConfig) -> ProtocolResult:
    train, test = planar_split(frames, config.seed)
    result = ProtocolResult("per_object")
    for method in config.methods:
        X = method_features(frames, method, config.preprocess)
        model = fit_model(X[train], method, config)
        rep = _report(method, model, frames, X[test], test, config)
        result.reports[method] = rep
        result.table.append({"method": method, "auroc": rep.auroc,
                             "components": model.component_count, **rep.per_group_auroc})
    result.summary = {"auroc": {m: r.auroc for m, r in result.reports.items()},
                      "n_train": len(train), "n_test": len(test)}
    return result


def _by_distance(frames, config: EvalConfig) -> ProtocolResult:
    _require(frames, "deviation_distance_m", lambda f: f.is_deviation)
    result = _per_object(frames, config)
    result.protocol = "by_distance"
    result.table = []
    edges = list(config.bucket_edges)
    for lo, hi in zip(edges[:-1], edges[1:]):
        row = {"lo": lo, "hi": hi}
        for method, rep in result.reports.items():
            match = [b for b in rep.detection_by_distance if b["lo"] == lo]
            row[method] = match[0]["rate"] if match else None
        result.table.append(row)
    return result


def _surface_splits(frames, config: EvalConfig) -> ProtocolResult:
    train, test = planar_split(frames, config.seed)
    surfaces = sorted({frames[i].surface_id for i in train})
    if len(surfaces) < 2:
        raise InvalidInputError("surface_splits needs at least two surface_id values")
    result = ProtocolResult("surface_splits")
    for method in config.methods:
        X = method_features(frames, method, config.preprocess)
        models = {"all": fit_model(X[train], method, config)}
        averages = {"all": [], "test_only": [], "all_but_test": []}
        for surface in surfaces:
            own = [i for i in train if frames[i].surface_id == surface]
            rest = [i for i in train if frames[i].surface_id != surface]
            fitted = {"all": models["all"],
                      "test_only": fit_model(X[own], method, config),
                      "all_but_test": fit_model(X[rest], method, config)}
            t_idx = [i for i in test if frames[i].surface_id == surface]
            labels = np.array([frames[i].is_deviation for i in t_idx])
            row = {"method": method, "test_surface": surface}
            for name, model in fitted.items():
                ll = score_many(model, X[t_idx])
                row[name] = compute_roc(-ll, labels).auroc
                averages[name].append(row[name])
            result.table.append(row)
        result.table.append({"method": method, "test_surface": "(average)",
                             **{k: float(np.mean(v)) for k, v in averages.items()}})
    return result


ABLATIONS = (
    ("base", dict()),
    ("no_ambient_correction", dict(ambient_correction=False)),
    ("no_normalization", dict(normalization=False)),
    ("no_normalization_no_ambient_correction", dict(ambient_correction=False,
                                                    normalization=False)),
    ("one_component", dict(one_component=True)),
    ("no_normalization_no_ambient_correction_one_component",
     dict(ambient_correction=False, normalization=False, one_component=True)),
)


def _ablation(frames, config: EvalConfig) -> ProtocolResult:
    train, test = planar_split(frames, config.seed)
    result = ProtocolResult("ablation")
    for name, change in ABLATIONS:
        change = dict(change)
        one = change.pop("one_component", False)
        pre = dataclasses.replace(config.preprocess, **change)
        fit = dataclasses.replace(config.fit, component_range=(1, 1)) if one else config.fit
        X = method_features(frames, "histogram", pre)
        model = fit_model(X[train], "histogram", config, fit=fit, preprocess=pre)
        rep = _report("histogram", model, frames, X[test], test, config)
        result.reports[name] = rep
        result.table.append({"configuration": name, "auroc": rep.auroc,
                             "components": model.component_count})
    return result


def _sample_sweep(frames, config: EvalConfig) -> ProtocolResult:
    train, test = planar_split(frames, config.seed)
    by_surface = {}
    for i in train:
        by_surface.setdefault(frames[i].surface_id, []).append(i)
    surfaces = sorted(by_surface)
    labels = np.array([frames[i].is_deviation for i in test])
    result = ProtocolResult("sample_sweep")
    for method in config.methods:
        X = method_features(frames, method, config.preprocess)
        for n in config.sweep_counts:
            if any(len(by_surface[s]) < n for s in surfaces):
                continue
            aurocs = []
            for r in range(config.sweep_repeats):
                rng = np.random.default_rng([config.seed, n, r])
                chosen = [i for s in surfaces
                          for i in rng.choice(by_surface[s], size=n, replace=False)]
                model = fit_model(X[chosen], method, config)
                aurocs.append(compute_roc(-score_many(model, X[test]), labels).auroc)
            result.table.append({"method": method, "n_per_surface": n,
                                 "n_total": n * len(surfaces), "min": float(np.min(aurocs)),
                                 "mean": float(np.mean(aurocs)),
                                 "max": float(np.max(aurocs))})
    return result


def _cliff_range(frames, config: EvalConfig, train_frames=None) -> ProtocolResult:
    _require(frames, "deviation_distance_m", lambda f: f.is_deviation)
    train_pool = [f for f in frames if not f.is_deviation and f.sublabel == "train"]
    if train_frames is not None:
        train_pool = _sorted_frames(train_frames)
    if not train_pool:
        raise InvalidInputError(
            "cliff_range needs planar training frames: frames with sublabel 'train' "
            "or a separate training set (--train-input)")
    test = [f for f in frames if f not in train_pool and
            not (not f.is_deviation and f.sublabel == "train")]
    neg = [f for f in test if not f.is_deviation]
    pos = [f for f in test if f.is_deviation]
    if not neg or not pos:
        raise InvalidInputError("cliff_range needs planar test frames and cliff frames")
    distances = sorted({f.deviation_distance_m for f in pos})
    result = ProtocolResult("cliff_range")
    rates = {}
    for method in config.methods:
        model = fit_model(method_features(train_pool, method, config.preprocess), method, config)
        ll_neg = score_many(model, method_features(neg, method, config.preprocess))
        ll_pos = score_many(model, method_features(pos, method, config.preprocess))
        # Zero false positives on the held-out planar frames.
        thr = float(ll_neg.min())
        d = np.array([f.deviation_distance_m for f in pos])
        rates[method] = [float(np.mean(ll_pos[d == dist] < thr)) for dist in distances]
        result.reports[method] = EvalReport(
            method,
            [{"capture_id": f.capture_id, "score": float(s), "label": f.label.value,
              "sublabel": f.sublabel, "deviation_distance_m": f.deviation_distance_m}
             for f, s in zip(neg + pos, np.r_[ll_neg, ll_pos])],
            compute_roc(-np.r_[ll_neg, ll_pos], np.r_[np.zeros(len(neg)), np.ones(len(pos))]),
            0.0, {}, thr, [], model.component_count)
        result.reports[method].auroc = result.reports[method].roc.auroc
    for j, dist in enumerate(distances):
        result.table.append({"edge_distance_m": dist,
                             **{m: rates[m][j] for m in config.methods}})
    result.summary = {
        "max_reliable_distance_m": {m: max_reliable_distance(distances, rates[m])
                                    for m in config.methods},
        "monotone": {m: bool(np.all(np.diff(rates[m]) <= 0)) for m in config.methods},
    }
    return result


def max_reliable_distance(distances, rates) -> float:
    """Largest distance up to which every distance is detected 100% of the time."""
    best = 0.0
    for d, r in zip(distances, rates):
        if r < 1.0:
            break
        best = d
    return best


def _ambiguity(frames, config: EvalConfig) -> ProtocolResult:
    """Can a detector tell a small box from an albedo patch tuned to mimic it?

    Fits on half of the plain planar frames, sets the threshold at the FPR
    limit on the other half, then compares the scores of the noiseless box
    and patch frames (the first of each group).
    """
    plain = [i for i, f in enumerate(frames) if not f.is_deviation and f.sublabel is None]
    box = [i for i, f in enumerate(frames) if f.sublabel == "box"]
    patch = [i for i, f in enumerate(frames) if f.sublabel == "albedo_patch"]
    if not plain or not box or not patch:
        raise InvalidInputError("ambiguity needs plain, 'box' and 'albedo_patch' frames")
    rng = np.random.default_rng(config.seed)
    perm = [plain[j] for j in rng.permutation(len(plain))]
    train, held = sorted(perm[:len(perm) // 2]), sorted(perm[len(perm) // 2:])
    result = ProtocolResult("ambiguity")
    for method in config.methods:
        X = method_features(frames, method, config.preprocess)
        model = fit_model(X[train], method, config)
        neg = score_many(model, X[held])
        thr = threshold_at_fpr(neg, config.max_fpr)
        s_box, s_patch = score_many(model, X[[box[0], patch[0]]])
        margin = float(np.median(neg) - thr)
        separation = abs(float(s_box - s_patch))
        result.table.append({
            "method": method, "box_score": float(s_box), "patch_score": float(s_patch),
            "separation": separation, "threshold": thr, "threshold_margin": margin,
            "box_detected": bool(s_box < thr), "patch_detected": bool(s_patch < thr),
            "indistinguishable": bool(separation <= margin
                                      and (s_box < thr) == (s_patch < thr)),
        })
    return result


_PROTOCOLS = {
    "per_object": _per_object,
    "by_distance": _by_distance,
    "surface_splits": _surface_splits,
    "cliff_range": _cliff_range,
    "ablation": _ablation,
    "sample_sweep": _sample_sweep,
    "ambiguity": _ambiguity,
}


def run_protocol(protocol: str, frames: Sequence[Frame], config: EvalConfig = EvalConfig(),
                 train_frames: Optional[Sequence[Frame]] = None) -> ProtocolResult:
    """Run a named evaluation protocol on a labeled dataset.

    Frames are put in ``capture_id`` order first, so row order in the input
    never changes a reported number.
    """
    if protocol not in _PROTOCOLS:
        raise InvalidInputError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    frames = _sorted_frames(frames)
    if not frames:
        raise InvalidInputError("empty dataset")
    if protocol == "cliff_range":
        return _cliff_range(frames, config, train_frames)
    return _PROTOCOLS[protocol](frames, config)

"""Spherical Gaussian mixture surface model.

Each of ``c`` components has a mean vector over all ``k`` feature bins, one
scalar variance shared by every bin, and a mixing weight. Parameters are fit
by expectation-maximization on the joint density

    p(x) = sum_j w_j prod_i N(x_i; mu_ij, var_j)

and the component count is chosen by AIC with ``k*c + 2*c`` parameters.

Two scoring rules are available. ``"eq3"`` (the default) mixes the
components independently in every bin and multiplies across bins:

    ln L(x) = sum_i ln sum_j w_j N(x_i; mu_ij, var_j)

``"joint"`` scores with the fitted density ``ln p(x)`` itself. The two agree
when ``c == 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from ._io import atomic_write_text
from .core import Label, PreprocessConfig, ProcessedFeature
from .errors import InvalidInputError, ModelLoadError, ModelStateError

MODEL_FORMAT_VERSION = 1
SCORE_FORMS = ("eq3", "joint")
AIC_FORMS = ("standard", "literal")
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FitConfig:
    component_range: tuple = (1, 16)
    max_iters: int = 200
    rel_tol: float = 1e-6
    restarts: int = 5
    seed: int = 0
    variance_floor: float = 1e-10
    aic_form: str = "standard"

    def __post_init__(self):
        lo, hi = (int(v) for v in self.component_range)
        object.__setattr__(self, "component_range", (lo, hi))
        if not 1 <= lo <= hi <= 64:
            raise InvalidInputError(f"component_range {self.component_range} outside [1, 64]")
        if self.max_iters < 1 or self.restarts < 1:
            raise InvalidInputError("max_iters and restarts must be >= 1")
        if not self.variance_floor > 0:
            raise InvalidInputError("variance_floor must be positive")
        if self.aic_form not in AIC_FORMS:
            raise InvalidInputError(f"aic_form must be one of {AIC_FORMS}")

    def to_dict(self) -> dict:
        return {
            "component_range": list(self.component_range),
            "max_iters": self.max_iters,
            "rel_tol": self.rel_tol,
            "restarts": self.restarts,
            "seed": self.seed,
            "variance_floor": self.variance_floor,
            "aic_form": self.aic_form,
        }


@dataclass(eq=False)
class SurfaceModel:
    """A fitted mixture plus everything needed to score new frames.

    Treated as immutable once fitted. ``calibration`` holds the sorted
    training-set scores used to map a score to a percentile in ``[0, 1]``.
    """

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    preprocess_config: PreprocessConfig = field(default_factory=PreprocessConfig)
    calibration: Optional[np.ndarray] = None
    score_form: str = "eq3"
    method: str = "histogram"
    aic: Optional[float] = None
    aic_form: str = "standard"
    aic_trace: tuple = ()
    log_likelihood: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.asarray(self.variances, dtype=float).ravel()
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        c = self.means.shape[0]
        if self.variances.shape != (c,) or self.weights.shape != (c,):
            raise InvalidInputError("means, variances and weights disagree on component count")
        if self.score_form not in SCORE_FORMS:
            raise InvalidInputError(f"score_form must be one of {SCORE_FORMS}")
        if self.calibration is not None:
            self.calibration = np.sort(np.asarray(self.calibration, dtype=float))

    @property
    def component_count(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_calibrated(self) -> bool:
        return self.calibration is not None and len(self.calibration) > 0


class EMFit(NamedTuple):
    model: SurfaceModel
    log_likelihood: float
    histories: list


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = features
    else:
        rows = [f.values if isinstance(f, ProcessedFeature) else f for f in features]
        if not rows:
            raise InvalidInputError("no features given")
        dims = {len(r) for r in rows}
        if len(dims) != 1:
            raise InvalidInputError(f"features have unequal dimensions {sorted(dims)}")
        X = np.stack([np.asarray(r, dtype=float) for r in rows])
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise InvalidInputError("no features given")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("features contain non-finite values")
    return X


def _sq_dist(X, means):
    """Squared Euclidean distance between every row of X and every mean, (N, c)."""
    d = (X * X).sum(1)[:, None] - 2.0 * X @ means.T + (means * means).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _joint_log_prob(X, means, variances, weights):
    """ln(w_j) + ln prod_i N(x_i; mu_ij, var_j) for every sample and component."""
    k = X.shape[1]
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return (log_w[None, :]
            - 0.5 * k * (_LOG_2PI + np.log(variances))[None, :]
            - 0.5 * _sq_dist(X, means) / variances[None, :])


def _kmeanspp(X, c, rng):
    """Greedy k-means++ seeding: D^2 sampling, best of a few candidates per step."""
    n = X.shape[0]
    n_trials = 2 + int(math.log(c))
    centers = np.empty((c, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = ((X - X[first]) ** 2).sum(1)
    for j in range(1, c):
        total = closest.sum()
        if total <= 0:
            cand = rng.integers(n, size=n_trials)
        else:
            cand = np.searchsorted(np.cumsum(closest), rng.random(n_trials) * total)
            cand = np.minimum(cand, n - 1)
        d_cand = np.minimum(closest[None, :], _sq_dist(X, X[cand]).T)
        best = int(np.argmin(d_cand.sum(1)))
        centers[j] = X[cand[best]]
        closest = d_cand[best]
    return centers


def _lloyd(X, centers, iters=20):
    """Refine seed centers with Lloyd iterations; returns the hard assignment."""
    for _ in range(iters):
        assign = np.argmin(_sq_dist(X, centers), axis=1)
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = assign == j
            if members.any():
                new[j] = X[members].mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    return np.argmin(_sq_dist(X, centers), axis=1)


def _m_step(X, resp, means, variances, floor):
    n, k = X.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    live = nk > 0
    # Components with no responsibility keep their parameters at zero weight.
    means = means.copy()
    means[live] = (resp[:, live].T @ X) / nk[live, None]
    variances = variances.copy()
    variances[live] = (resp[:, live] * _sq_dist(X, means[live])).sum(0) / (k * nk[live])
    return means, np.maximum(variances, floor), weights


def _em_run(X, assign, c, config: FitConfig):
    n, k = X.shape
    pooled = max(float(X.var(axis=0).mean()), config.variance_floor)
    resp = np.zeros((n, c))
    resp[np.arange(n), assign] = 1.0
    means, variances, weights = _m_step(
        X, resp, np.zeros((c, k)), np.full(c, pooled), config.variance_floor)
    history = []
    for it in range(config.max_iters + 1):
        log_prob = _joint_log_prob(X, means, variances, weights)
        log_norm = logsumexp(log_prob, axis=1)
        ll = float(log_norm.sum())
        history.append(ll)
        if it == config.max_iters:
            break
        if it > 0 and abs(ll - history[-2]) <= config.rel_tol * abs(history[-2]):
            break
        resp = np.exp(log_prob - log_norm[:, None])
        means, variances, weights = _m_step(X, resp, means, variances, config.variance_floor)
    return means, variances, weights, history


def fit_em(features, c: int, config: FitConfig = FitConfig()) -> EMFit:
    """Fit a ``c``-component spherical mixture by EM with seeded restarts.

    Rows are put in a canonical (lexicographic) order first so the result
    does not depend on the order features are supplied in. Among
    ``config.restarts`` initializations the highest final training
    log-likelihood wins, earlier restarts winning ties.

    Returns:
        ``EMFit(model, log_likelihood, histories)`` where ``histories`` has
        the per-iteration training log-likelihood of every restart.
    """
    X = _as_matrix(features)
    n = X.shape[0]
    if not 1 <= c <= n:
        raise InvalidInputError(f"cannot fit {c} components to {n} samples")
    X = X[np.lexsort(X.T[::-1])]
    # Centering improves the conditioning of the expanded squared distances.
    offset = X.mean(axis=0)
    Xc = X - offset

    best = None
    histories = []
    for r in range(config.restarts):
        rng = np.random.default_rng([config.seed, c, r])
        assign = _lloyd(Xc, _kmeanspp(Xc, c, rng))
        means, variances, weights, hist = _em_run(Xc, assign, c, config)
        histories.append(hist)
        if best is None or hist[-1] > best[3]:
            best = (means, variances, weights, hist[-1])
    means, variances, weights, ll = best
    model = SurfaceModel(means=means + offset, variances=variances, weights=weights,
                         log_likelihood=ll)
    return EMFit(model, ll, histories)


def parameter_count(k: int, c: int) -> int:
    return k * c + 2 * c


def aic(log_likelihoods, k: int, c: int, aic_form: str = "standard") -> float:
    """AIC of a fit from its per-sample joint log-likelihoods.

    ``standard`` sums the per-sample log-likelihoods; ``literal`` takes
    the log of the summed likelihoods instead.
    """
    ll = np.asarray(log_likelihoods, dtype=float)
    if aic_form == "standard":
        total = float(ll.sum())
    elif aic_form == "literal":
        total = float(logsumexp(ll))
    else:
        raise InvalidInputError(f"unknown aic_form {aic_form!r}")
    return 2.0 * parameter_count(k, c) - 2.0 * total


def select_components(features, config: FitConfig = FitConfig(),
                      score_form: str = "eq3",
                      preprocess_config: Optional[PreprocessConfig] = None,
                      method: str = "histogram") -> SurfaceModel:
    """Fit every component count in ``config.component_range`` and keep the AIC minimizer.

    The upper end of the range is capped at the number of samples. The
    returned model carries the AIC trace and is calibrated on its own
    training scores.
    """
    X = _as_matrix(features)
    n, k = X.shape
    lo, hi = config.component_range
    if lo > n:
        raise InvalidInputError(f"cannot fit {lo} components to {n} samples")
    trace = []
    best = None
    for c in range(lo, min(hi, n) + 1):
        fit = fit_em(X, c, config)
        m = fit.model
        per_sample = logsumexp(_joint_log_prob(X, m.means, m.variances, m.weights), axis=1)
        value = aic(per_sample, k, c, config.aic_form)
        trace.append({"c": c, "aic": value, "log_likelihood": fit.log_likelihood})
        if best is None or value < best[1]:
            best = (m, value)
    m, value = best
    model = SurfaceModel(
        means=m.means, variances=m.variances, weights=m.weights,
        preprocess_config=preprocess_config or PreprocessConfig(),
        score_form=score_form, method=method, aic=value, aic_form=config.aic_form,
        aic_trace=tuple(trace), log_likelihood=m.log_likelihood,
        metadata={"fit_config": config.to_dict(), "n_train": n})
    return calibrate(model, X)


def score_many(model: SurfaceModel, features) -> np.ndarray:
    """Log-likelihood of each row of ``features`` under ``model``."""
    X = _as_matrix(features)
    if X.shape[1] != model.feature_dim:
        raise InvalidInputError(
            f"feature dimension {X.shape[1]} does not match model dimension {model.feature_dim}")
    if model.score_form == "joint":
        return logsumexp(_joint_log_prob(X, model.means, model.variances, model.weights), axis=1)
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    var = model.variances
    out = np.empty(X.shape[0])
    # Chunked to bound the (rows, k, c) temporary.
    step = max(1, 2_000_000 // (model.feature_dim * model.component_count))
    for s in range(0, X.shape[0], step):
        diff = X[s:s + step, :, None] - model.means.T[None, :, :]
        per_bin = (log_w - 0.5 * (_LOG_2PI + np.log(var)))[None, None, :] - 0.5 * diff * diff / var
        out[s:s + step] = logsumexp(per_bin, axis=2).sum(axis=1)
    return out


def score(model: SurfaceModel, feature) -> float:
    values = feature.values if isinstance(feature, ProcessedFeature) else feature
    return float(score_many(model, np.asarray(values, dtype=float)[None, :])[0])


def calibrate(model: SurfaceModel, features) -> SurfaceModel:
    model.calibration = np.sort(score_many(model, features))
    return model


class Classification(NamedTuple):
    label: Label
    ell: float
    score: float


def percentile(model: SurfaceModel, value: float) -> float:
    """Fraction of training calibration scores at or below ``value``."""
    if not model.is_calibrated:
        raise ModelStateError("model has no calibration scores")
    cal = model.calibration
    return float(np.searchsorted(cal, value, side="right")) / len(cal)


def classify(model: SurfaceModel, feature, threshold: float) -> Classification:
    """Planar if the score reaches ``threshold`` (log-likelihood units), else deviation."""
    if not model.is_calibrated:
        raise ModelStateError("model has no calibration scores")
    s = score(model, feature)
    label = Label.PLANAR if s >= threshold else Label.DEVIATION
    return Classification(label, percentile(model, s), s)


# -- persistence -------------------------------------------------------------

def model_to_dict(model: SurfaceModel) -> dict:
    return {
        "version": MODEL_FORMAT_VERSION,
        "c": model.component_count,
        "k": model.feature_dim,
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
        "weights": model.weights.tolist(),
        "preprocess": model.preprocess_config.to_dict(),
        "calibration_scores": (model.calibration.tolist()
                               if model.calibration is not None else []),
        "aic": model.aic,
        "aic_form": model.aic_form,
        "aic_trace": list(model.aic_trace),
        "score_form": model.score_form,
        "method": model.method,
        "log_likelihood": model.log_likelihood,
        "metadata": model.metadata,
    }


def model_from_dict(d: dict) -> SurfaceModel:
    if not isinstance(d, dict):
        raise ModelLoadError("model file is not a JSON object")
    if d.get("version") != MODEL_FORMAT_VERSION:
        raise ModelLoadError(f"unsupported model version {d.get('version')!r}")
    for key in ("c", "k", "means", "variances", "weights", "preprocess"):
        if key not in d:
            raise ModelLoadError(f"model file missing '{key}'")
    try:
        model = SurfaceModel(
            means=np.asarray(d["means"], dtype=float),
            variances=d["variances"],
            weights=d["weights"],
            preprocess_config=PreprocessConfig.from_dict(d["preprocess"]),
            calibration=d.get("calibration_scores") or None,
            score_form=d.get("score_form", "eq3"),
            method=d.get("method", "histogram"),
            aic=d.get("aic"),
            aic_form=d.get("aic_form", "standard"),
            aic_trace=tuple(d.get("aic_trace", ())),
            log_likelihood=d.get("log_likelihood"),
            metadata=d.get("metadata", {}),
        )
    except (TypeError, ValueError) as exc:
        raise ModelLoadError(f"malformed model: {exc}") from exc
    if model.means.shape != (d["c"], d["k"]):
        raise ModelLoadError(f"means shape {model.means.shape} != ({d['c']}, {d['k']})")
    return model


def dumps_model(model: SurfaceModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True) + "\n"


def save_model(model: SurfaceModel, path) -> None:
    atomic_write_text(path, dumps_model(model))


def load_model(path) -> SurfaceModel:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path}: not valid JSON ({exc.msg})") from exc
    return model_from_dict(d)

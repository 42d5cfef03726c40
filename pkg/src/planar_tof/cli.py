"""Command-line entry point: simulate, fit, score, eval, ablate.

Every option can also come from a JSON file given with ``--config``; flags
on the command line win over the file. All randomness derives from
``--seed``, and every artifact records the seed and a hash of the resolved
configuration, so rerunning a command reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text, config_hash
from .core import Label, PreprocessConfig, read_dataset, write_dataset
from .errors import InvalidInputError, PlanarTofError
from .evaluation import (METHODS, PROTOCOLS, EvalConfig, compute_roc, method_features,
                         run_protocol, threshold_at_fpr)
from .experiments import KINDS, generate_experiment
from .mixture import FitConfig, dumps_model, load_model, percentile, score_many, select_components
from .plotting import plot_score_histogram
from .report import write_csv, write_json, write_protocol_outputs
from .simulator import sensor_from_dict, sensor_to_dict

DEFAULTS = {
    "seed": 0,
    "kind": None,
    "method": None,
    "protocol": None,
    "components_min": 1,
    "components_max": 16,
    "bandwidth": 5.0,
    "bin_lo": 13,
    "bin_hi": 73,
    "max_fpr": 0.05,
    "ambient_correction": True,
    "normalization": True,
    "normalize_after_ambient": False,
    "aic_form": "standard",
    "score_form": "eq3",
    "surface": None,
    "threshold": None,
    "sweep_repeats": 100,
    "params": None,
    "sensor": None,
}
AIC_FLAGS = {"standard": "standard", "literal": "literal"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {self.prog}: {message}\n")


def _hyphen_choice(choices):
    def parse(value):
        v = value.replace("-", "_")
        if v not in choices:
            raise argparse.ArgumentTypeError(
                f"invalid choice {value!r} (choose from {', '.join(c.replace('_', '-') for c in choices)})")
        return v
    return parse


def _add_preprocess(p):
    p.add_argument("--bandwidth", type=float, help="KDE bandwidth for the ambient estimate")
    p.add_argument("--bin-lo", type=int, help="first kept bin")
    p.add_argument("--bin-hi", type=int, help="one past the last kept bin")
    p.add_argument("--no-ambient-correction", dest="ambient_correction",
                   action="store_const", const=False)
    p.add_argument("--no-normalization", dest="normalization", action="store_const", const=False)
    p.add_argument("--normalize-after-ambient", dest="normalize_after_ambient",
                   action="store_const", const=True,
                   help="divide by the L1 norm of the ambient-corrected histogram")


def _add_fit(p):
    p.add_argument("--components-min", type=int)
    p.add_argument("--components-max", type=int)
    p.add_argument("--aic-form", choices=sorted(AIC_FLAGS))
    p.add_argument("--score-form", choices=["eq3", "joint"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="planar-tof", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--output", required=True)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    common(p)
    p.add_argument("--kind", type=_hyphen_choice(KINDS), help="experiment to simulate")

    p = sub.add_parser("fit", help="fit a surface model to the planar frames of a dataset")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--method", type=_hyphen_choice(METHODS))
    p.add_argument("--surface", help="only use planar frames of this surface_id")
    _add_preprocess(p)
    _add_fit(p)

    p = sub.add_parser("score", help="score a dataset against a model")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--max-fpr", type=float,
                   help="pick the threshold at this FPR of the training scores")
    p.add_argument("--threshold", type=float, help="explicit log-likelihood threshold")

    for name, helptext in (("eval", "run an evaluation protocol"),
                           ("ablate", "run the ablation protocol")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--input", required=True)
        p.add_argument("--train-input", help="separate planar training frames (cliff-range)")
        p.add_argument("--method", type=_hyphen_choice(METHODS + ("all",)))
        if name == "eval":
            p.add_argument("--protocol", type=_hyphen_choice(PROTOCOLS))
        p.add_argument("--max-fpr", type=float)
        p.add_argument("--sweep-repeats", type=int)
        _add_preprocess(p)
        _add_fit(p)
    return parser


def resolve(args) -> dict:
    """Merge defaults, the optional config file and explicit flags, in that order."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{args.config}: not valid JSON ({exc.msg})") from exc
        if not isinstance(loaded, dict):
            raise InvalidInputError(f"{args.config}: expected a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise InvalidInputError(f"{args.config}: unknown keys {sorted(unknown)}")
        opts.update(loaded)
    for key, value in vars(args).items():
        if value is not None and key in DEFAULTS:
            opts[key] = value
    for key in ("kind", "method", "protocol"):
        if isinstance(opts[key], str):
            opts[key] = opts[key].replace("-", "_")
    return opts


def _preprocess_config(o) -> PreprocessConfig:
    return PreprocessConfig(kde_bandwidth=float(o["bandwidth"]),
                            bin_range=(int(o["bin_lo"]), int(o["bin_hi"])),
                            ambient_correction=bool(o["ambient_correction"]),
                            normalization=bool(o["normalization"]),
                            normalize_after_ambient=bool(o["normalize_after_ambient"]))


def _fit_config(o) -> FitConfig:
    if o["aic_form"] not in AIC_FLAGS:
        raise InvalidInputError(f"unknown aic form {o['aic_form']!r}")
    return FitConfig(component_range=(int(o["components_min"]), int(o["components_max"])),
                     seed=int(o["seed"]), aic_form=AIC_FLAGS[o["aic_form"]])


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _provenance(command, opts, **files) -> dict:
    return {"command": command, "version": __version__, "seed": opts["seed"],
            "config_hash": config_hash(opts), "config": opts,
            **{f"{k}_sha256": _sha256(v) for k, v in files.items() if v}}


def _load(path):
    if not Path(path).is_file():
        raise InvalidInputError(f"input file not found: {path}")
    return read_dataset(path)


def cmd_simulate(opts, args) -> None:
    if not opts["kind"]:
        raise InvalidInputError("simulate needs --kind")
    sensor = sensor_from_dict(opts["sensor"])
    frames = generate_experiment(opts["kind"], params=opts["params"], seed=int(opts["seed"]),
                                 sensor=sensor)
    write_dataset(frames, args.output)
    manifest = _provenance("simulate", {**opts, "sensor": sensor_to_dict(sensor)},
                           dataset=args.output)
    manifest["n_frames"] = len(frames)
    write_json(f"{args.output}.manifest.json", manifest)
    print(f"wrote {len(frames)} frames to {args.output}")


def cmd_fit(opts, args) -> None:
    method = opts["method"] or "histogram"
    if method not in METHODS:
        raise InvalidInputError(f"fit needs one method out of {METHODS}")
    frames = sorted(_load(args.input), key=lambda f: f.capture_id)
    train = [f for f in frames if f.label is Label.PLANAR
             and (opts["surface"] is None or f.surface_id == opts["surface"])]
    if not train:
        raise InvalidInputError("no planar frames to fit" +
                             (f" for surface {opts['surface']!r}" if opts["surface"] else ""))
    pre = _preprocess_config(opts)
    model = select_components(method_features(train, method, pre), _fit_config(opts),
                              score_form=opts["score_form"], preprocess_config=pre,
                              method=method)
    model.metadata.update(_provenance("fit", opts, dataset=args.input))
    model.metadata["n_pixels"] = train[0].n_pixels
    atomic_write_text(args.output, dumps_model(model))
    print(f"fitted {model.component_count} components (k={model.feature_dim}) "
          f"on {len(train)} frames; wrote {args.output}")


def cmd_score(opts, args) -> None:
    model = load_model(args.model)
    frames = sorted(_load(args.input), key=lambda f: f.capture_id)
    X = method_features(frames, model.method, model.preprocess_config)
    if X.shape[1] != model.feature_dim:
        raise InvalidInputError(f"dataset gives k={X.shape[1]} but the model has "
                             f"k={model.feature_dim}")
    if not model.is_calibrated:
        raise InvalidInputError("model has no calibration scores")
    scores = score_many(model, X)
    thr = (float(opts["threshold"]) if opts["threshold"] is not None
           else threshold_at_fpr(model.calibration, float(opts["max_fpr"])))
    rows = [{"capture_id": f.capture_id, "surface_id": f.surface_id, "label": f.label.value,
             "sublabel": f.sublabel, "deviation_distance_m": f.deviation_distance_m,
             "score": float(s), "ell": percentile(model, s),
             "predicted": (Label.PLANAR if s >= thr else Label.DEVIATION).value}
            for f, s in zip(frames, scores)]
    out = Path(args.output)
    write_csv(out / "scores.csv", rows)
    labels = np.array([f.is_deviation for f in frames])
    summary = {"n_frames": len(frames), "threshold": thr, "method": model.method,
               "n_flagged": int(np.sum(scores < thr))}
    if 0 < labels.sum() < len(labels):
        roc = compute_roc(-scores, labels)
        summary["auroc"] = roc.auroc
        write_csv(out / "roc.csv", [{"fpr": float(a), "tpr": float(b), "threshold": float(c)}
                                    for a, b, c in zip(roc.fpr, roc.tpr, roc.thresholds)])
    write_json(out / "report.json", {"summary": summary, "scores": rows,
                                     "provenance": _provenance("score", opts, dataset=args.input,
                                                               model=args.model)})
    plot_score_histogram(scores, labels, thr, out / "score_histogram.svg")
    print(f"scored {len(frames)} frames; {summary['n_flagged']} flagged; wrote {out}")


def cmd_eval(opts, args, protocol=None) -> None:
    protocol = protocol or opts["protocol"]
    if not protocol:
        raise InvalidInputError("eval needs --protocol")
    method = opts["method"] or "all"
    methods = METHODS if method == "all" else (method,)
    config = EvalConfig(methods=methods, preprocess=_preprocess_config(opts),
                        fit=_fit_config(opts), score_form=opts["score_form"],
                        max_fpr=float(opts["max_fpr"]), seed=int(opts["seed"]),
                        sweep_repeats=int(opts["sweep_repeats"]))
    frames = _load(args.input)
    train = _load(args.train_input) if args.train_input else None
    result = run_protocol(protocol, frames, config, train_frames=train)
    prov = _provenance("eval", {**opts, "protocol": protocol}, dataset=args.input,
                       train_dataset=args.train_input)
    paths = write_protocol_outputs(result, args.output, prov)
    print(f"{protocol}: wrote {len(paths)} files to {args.output}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve(args)
        if args.command == "simulate":
            cmd_simulate(opts, args)
        elif args.command == "fit":
            cmd_fit(opts, args)
        elif args.command == "score":
            cmd_score(opts, args)
        elif args.command == "eval":
            cmd_eval(opts, args)
        else:
            cmd_eval(opts, args, protocol="ablation")
    except (PlanarTofError, ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

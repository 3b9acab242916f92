"""Command-line entry point.

Every command resolves its settings from built-in defaults, then the JSON
file given with ``--config``, then explicit flags, and writes the resolved
settings into each output file.

Exit codes: 0 success, 2 usage error, 3 data error, 4 non-finite numbers.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, scvae
from .anomaly import Thresholds, calibrate, classify_type, evaluate_scores, score_windows, write_report
from .datagen import DataError, DatasetSpec, WindowSet, build_dataset, normalize_fit
from .experiments import EXPERIMENTS, PIPELINE_MODEL_OVERRIDES, ModelCache, run_experiment
from .nn_core import NonFiniteError
from .scvae import ScvaeConfig

log = logging.getLogger("laserprog")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SECTIONS = ("dataset", "model", "calibration")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or set(cfg) - set(CONFIG_SECTIONS):
        raise UsageError(f"config file must be an object with sections {list(CONFIG_SECTIONS)}")
    return cfg


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults -> config file -> flags."""
    file_cfg = load_config_file(args.config)
    dataset = dict(file_cfg.get("dataset", {}))
    model = {**PIPELINE_MODEL_OVERRIDES, **file_cfg.get("model", {})}
    calibration = {"min_precision": None, **file_cfg.get("calibration", {})}
    if args.seed is not None:
        dataset["seed"] = args.seed
        model["seed"] = args.seed
    for flag, key in (("epochs", "epochs"), ("kl_weight", "kl_weight"), ("latent_dim", "latent_dim"),
                      ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            model[key] = v
    if getattr(args, "no_oc", False):
        model["oc_dim"] = 0
    if getattr(args, "min_precision", None) is not None:
        calibration["min_precision"] = args.min_precision
    try:
        spec = DatasetSpec.from_dict(dataset) if args.spec is None else _spec_from_file(args.spec, dataset)
        model_cfg = ScvaeConfig.from_dict(model)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return {"dataset": spec.to_dict(), "model": model_cfg.to_dict(), "calibration": calibration,
            "seed": args.seed, "version": __version__}


def _spec_from_file(path: str, overrides: dict) -> DatasetSpec:
    if not Path(path).is_file():
        raise UsageError(f"spec file not found: {path}")
    base = DatasetSpec.load(path).to_dict()
    return DatasetSpec.from_dict({**base, **overrides})


# ---------------------------------------------------------------------------
# Helpers


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _guard_outputs(inputs: list[Path], outputs: list[Path]) -> None:
    ins = {p.resolve() for p in inputs}
    for o in outputs:
        if o.resolve() in ins:
            raise UsageError(f"refusing to overwrite input {o}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, float) and not np.isfinite(o):
        return None
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args, resolved: dict) -> int:
    spec = DatasetSpec.from_dict(resolved["dataset"])
    out = _out_dir(args)
    ds = build_dataset(spec)
    for name in ("train", "calib", "test"):
        getattr(ds, name).to_csv(out / f"{name}.csv")
    (out / "spec.json").write_text(spec.to_json())
    _write_json(out / "manifest.json", {**ds.manifest, "resolved_config": resolved})
    print(json.dumps(ds.manifest["windows"]))
    return EXIT_OK


def cmd_train(args, resolved: dict) -> int:
    train_csv = _require_file(args.train, "train")
    out = _out_dir(args)
    model_path = out / "model.json"
    _guard_outputs([train_csv], [model_path, out / "loss_trace.csv"])
    data = WindowSet.from_csv(train_csv)
    config = ScvaeConfig.from_dict(resolved["model"])
    norm = normalize_fit(data)
    model, trace = scvae.train(data, config, norm)
    scvae.save(model, model_path, provenance={"resolved_config": resolved, "train_csv": str(train_csv)})
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "recon", "kl"])
        for i, row in enumerate(zip(trace.total, trace.recon, trace.kl)):
            w.writerow([i, *map(repr, row)])
    print(f"model written to {model_path}")
    return EXIT_OK


def cmd_calibrate(args, resolved: dict) -> int:
    model_path = _require_file(args.model, "model")
    calib_csv = _require_file(args.calib, "calib")
    out = _out_dir(args)
    outputs = [out / "thresholds.json", out / "sweep_alpha.csv", out / "sweep_beta.csv"]
    _guard_outputs([model_path, calib_csv], outputs)
    model = scvae.load(model_path)
    data = WindowSet.from_csv(calib_csv)
    scores = score_windows(model, data)
    thresholds, a, b = calibrate(scores, data, resolved["calibration"]["min_precision"])
    thresholds.meta["resolved_config"] = resolved
    thresholds.save(outputs[0])
    a.write_csv(outputs[1])
    b.write_csv(outputs[2])
    print(json.dumps({"alpha": thresholds.alpha, "beta": thresholds.beta, "f1_alpha": a.f1, "f1_beta": b.f1}))
    return EXIT_OK


def cmd_eval(args, resolved: dict) -> int:
    model_path = _require_file(args.model, "model")
    thr_path = _require_file(args.thresholds, "thresholds")
    test_csv = _require_file(args.test, "test")
    out = _out_dir(args)
    _guard_outputs([model_path, thr_path, test_csv], [out / "report.json", out / "roc.csv", out / "verdicts.csv"])
    model = scvae.load(model_path)
    thresholds = Thresholds.load(thr_path)
    data = WindowSet.from_csv(test_csv)
    if len(data) == 0:
        raise DataError("test set is empty")
    report = evaluate_scores(score_windows(model, data), data, thresholds)
    write_report(report, data, out, extra={"resolved_config": resolved})
    m = report.metrics
    print(json.dumps({"precision": m.precision, "recall": m.recall, "f1": m.f1, "auc": report.auc}))
    return EXIT_OK


def cmd_score(args, resolved: dict) -> int:
    model_path = _require_file(args.model, "model")
    input_csv = _require_file(args.input, "input")
    out = _out_dir(args)
    out_csv = out / "scores.csv"
    _guard_outputs([model_path, input_csv], [out_csv])
    model = scvae.load(model_path)
    data = WindowSet.from_csv(input_csv)
    scores = score_windows(model, data)
    thresholds = None if args.thresholds is None else Thresholds.load(_require_file(args.thresholds, "thresholds"))
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "t_start_h", "score", "decision"])
        for dev, t, s in zip(data.device_id.tolist(), data.t_start_h.tolist(), scores.tolist()):
            decision = "" if thresholds is None else classify_type(s, thresholds)
            w.writerow([dev, repr(t), repr(s), decision])
    print(f"{len(data)} scores written to {out_csv}")
    return EXIT_OK


def cmd_experiment(args, resolved: dict) -> int:
    spec = DatasetSpec.from_dict(resolved["dataset"])
    model = resolved["model"]
    overrides = {k: v for k, v in model.items() if k != "seed" and v != ScvaeConfig().to_dict()[k]}
    cache = ModelCache(args.cache_dir) if args.cache_dir else ModelCache()
    kwargs = {}
    if args.n_seeds is not None:
        if args.name not in ("oc_ablation", "baselines", "seqlen_sweep"):
            raise UsageError(f"--n-seeds does not apply to {args.name}")
        kwargs["n_seeds"] = args.n_seeds
    report = run_experiment(args.name, spec, model["seed"], cache=cache, **kwargs, **overrides)
    report.config["resolved_config"] = resolved
    report.write(_out_dir(args))
    print(report.table())
    print(json.dumps(report.summary, default=_json_default))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "score": cmd_score,
    "experiment": cmd_experiment,
}


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for data and model")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with dataset/model/calibration sections")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for outputs (default: .)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="laserprog", parents=[common], description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="simulate devices and write train/calib/test CSVs")
    g.add_argument("--spec", help="dataset spec JSON (defaults used when omitted)")

    t = sub.add_parser("train", parents=[common], help="fit a model on normal windows")
    t.add_argument("--train", help="training CSV")
    t.add_argument("--epochs", type=int)
    t.add_argument("--kl-weight", dest="kl_weight", type=float)
    t.add_argument("--latent-dim", dest="latent_dim", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--no-oc", dest="no_oc", action="store_true", help="do not condition the decoder on (T, I)")

    c = sub.add_parser("calibrate", parents=[common], help="fit alpha and beta on a calibration CSV")
    c.add_argument("--model")
    c.add_argument("--calib")
    c.add_argument("--min-precision", dest="min_precision", type=float,
                   help="maximize recall subject to this precision instead of maximizing F1")

    e = sub.add_parser("eval", parents=[common], help="evaluate a model and thresholds on a test CSV")
    e.add_argument("--model")
    e.add_argument("--thresholds")
    e.add_argument("--test")

    s = sub.add_parser("score", parents=[common], help="score windows from a CSV")
    s.add_argument("--model")
    s.add_argument("--input")
    s.add_argument("--thresholds")

    x = sub.add_parser("experiment", parents=[common], help="run a seeded experiment")
    x.add_argument("name", choices=sorted(EXPERIMENTS))
    x.add_argument("--n-seeds", dest="n_seeds", type=int)
    x.add_argument("--cache-dir", dest="cache_dir", help="reuse trained models across runs")
    x.add_argument("--epochs", type=int)
    x.add_argument("--kl-weight", dest="kl_weight", type=float)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    for name, default in (("seed", None), ("config", None), ("out_dir", "."), ("verbose", False), ("spec", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = resolve_config(args)
        return COMMANDS[args.command](args, resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # DataError, ModelFormatError and CalibrationError are all ValueErrors
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

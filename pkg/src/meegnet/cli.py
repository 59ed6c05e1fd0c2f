"""``meegnet`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Annotation, annotations_text, imbalance_factor, load_manifest,
                   load_recording, save_annotations, save_recording, window, window_cases,
                   write_manifest)
from .errors import ConfigError, FormatError, MEEGNetError, NumericError
from .evaluation import (Confusion, MetricsReport, aggregate, emit_report, nemenyi,
                         pooled_report, friedman)
from .gradcheck import gradient_check
from .losses import LossConfig
from .model import (ModelConfig, build, count_parameters_from_config, detect_intervals,
                    load_checkpoint, parameter_breakdown, parameter_count)
from .synth import SynthConfig, realized_ratio, synth_generate
from .training import (OptimizerConfig, grid_search_loss, kernel_sweep,
                       run_protocol)

OUTPUT_ENV = "MEEGNET_OUTPUT"
EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 2, 3, 4

log = logging.getLogger("meegnet")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def output_root(args) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    return Path(os.environ.get(OUTPUT_ENV, "meegnet-runs"))


def load_config_file(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _overlay(base: dict, **flags) -> dict:
    """Flags that were given on the command line win over config-file values."""
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def resolve_model(doc, args) -> ModelConfig:
    d = _overlay(doc.get("model", {}), temporal_kernel=getattr(args, "kernel", None),
                 dtype=getattr(args, "dtype", None),
                 decision_threshold=getattr(args, "threshold", None))
    return ModelConfig.from_dict(d)


def resolve_loss(doc, args) -> LossConfig:
    d = _overlay(doc.get("loss", {}), kind=getattr(args, "loss", None),
                 alpha=getattr(args, "alpha", None), gamma=getattr(args, "gamma", None),
                 beta=getattr(args, "beta", None))
    try:
        return LossConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad loss config: {exc}") from None


def resolve_optimizer(doc, args) -> OptimizerConfig:
    d = _overlay(doc.get("optimizer", {}), epochs=getattr(args, "epochs", None),
                 batch_size=getattr(args, "batch_size", None),
                 learning_rate=getattr(args, "lr", None))
    return OptimizerConfig.from_dict(d)


def resolve_seeds(doc, args) -> list[int]:
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds]
    if "seeds" in doc and args.repeats is None and args.seed is None:
        return [int(s) for s in doc["seeds"]]
    base = args.seed if args.seed is not None else int(doc.get("seed", 0))
    repeats = args.repeats if args.repeats is not None else int(doc.get("repeats", 1))
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    return [base + i for i in range(repeats)]


def _manifest_path(doc, args) -> Path:
    path = getattr(args, "manifest", None) or doc.get("manifest")
    if path is None:
        raise ConfigError("a dataset manifest is required (--manifest or config 'manifest')")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest {path} does not exist")
    return path


def _load_windows(doc, args):
    rule = getattr(args, "rule", None) or doc.get("labeling_rule", "majority")
    cases = load_manifest(_manifest_path(doc, args))
    return window_cases(cases, rule=rule), rule


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def _run_record(command, **fields):
    return {"command": command, "version": __version__, **fields}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    doc = load_config_file(args.config)
    d = _overlay(doc.get("synth", {}), n_cases=args.cases, duration_sec=args.duration,
                 target_abnormal_ratio=args.ratio, seed=args.seed,
                 spike_amplitude_ratio=args.snr, burst_freq_hz=args.burst_freq,
                 n_normal_cases=args.normal_cases)
    cfg = SynthConfig.from_dict(d)
    out = Path(args.out) if args.out else output_root(args) / f"synth-seed{cfg.seed}"
    cases = synth_generate(cfg)
    rec_paths, ann_paths = [], []
    for rec, anns in cases:
        rec_paths.append(save_recording(out / f"{rec.case_id}.eegr", rec))
        ann_paths.append(save_annotations(out / f"{rec.case_id}.ann.csv", anns, rec.electrode_names))
    manifest = write_manifest(out / "manifest.json", cases, rec_paths, ann_paths)
    ratio = realized_ratio(cases)
    total = sum(r.duration_sec for r, _ in cases)
    print(f"wrote {len(cases)} cases to {out}")
    print(f"realized abnormal ratio {ratio:.5f} (target {cfg.target_abnormal_ratio})")
    if ratio > 0:
        print(f"imbalance factor {imbalance_factor(total, ratio * total):.3f}")
    else:
        print("imbalance factor undefined (no abnormal time)")
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    write_json(out / "run.json", _run_record("synth", synth=cfg.to_dict(), manifest=str(manifest),
                                             manifest_sha256=digest, realized_ratio=ratio))
    return 0


def _progress(session):
    r = session.report
    auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
    f1 = "n/a" if r.f1 is None else f"{r.f1:.4f}"
    print(f"  seed {session.seed} {session.key}: auc {auc} f1 {f1}", flush=True)


def _label(model_cfg, loss_cfg):
    return f"K{model_cfg.temporal_kernel}-{loss_cfg.kind}"


def _protocol_outputs(run_dir, label, result, threshold):
    """Session and per-case reports plus the pooled test-set report of a protocol run."""
    sessions = {label: result.reports}
    cases = {label: result.case_reports}
    emit_report(run_dir / "report", sessions, {label: aggregate(result.reports)})
    emit_report(run_dir / "report-cases", cases, {label: aggregate(result.case_reports)})
    by_seed = {}
    for s in result.sessions:
        by_seed.setdefault(s.seed, []).append(s)
    pooled = [pooled_report(f"seed{seed}", [s.probs for s in ss], [s.labels for s in ss], threshold)
              for seed, ss in by_seed.items()]
    emit_report(run_dir / "report-pooled", {label: pooled}, {label: aggregate(pooled)})
    return pooled


def cmd_validate(args):
    doc = load_config_file(args.config)
    model_cfg = resolve_model(doc, args)
    loss_cfg = resolve_loss(doc, args)
    opt_cfg = resolve_optimizer(doc, args)
    seeds = resolve_seeds(doc, args)
    protocol = args.protocol or doc.get("protocol", "kfold")
    k = args.k if args.k is not None else int(doc.get("k", 5))
    gridsearch = bool(args.gridsearch or doc.get("gridsearch", False))
    ds, rule = _load_windows(doc, args)
    label = _label(model_cfg, loss_cfg)
    run_dir = Path(args.run_dir) if args.run_dir else (
        output_root(args) / f"validate-{protocol}-{label}-seed{seeds[0]}")
    print(f"{protocol}: {len(ds)} windows from {len(ds.cases)} cases, seeds {seeds}")
    result = run_protocol(ds, protocol, model_cfg, loss_cfg, opt_cfg, seeds, k, run_dir,
                          gridsearch=gridsearch, progress=_progress)
    pooled = _protocol_outputs(run_dir, label, result, model_cfg.decision_threshold)
    summary = aggregate(result.reports)
    print(f"{len(result.sessions)} sessions")
    print(f"auc {summary['auc'].formatted()}  f1 {summary['f1'].formatted()}  "
          f"sensitivity {summary['sensitivity'].formatted()}  "
          f"specificity {summary['specificity'].formatted()}")
    write_json(run_dir / "run.json", _run_record(
        "validate", manifest=str(_manifest_path(doc, args)), labeling_rule=rule,
        model=model_cfg.to_dict(), loss=loss_cfg.to_dict(), optimizer=opt_cfg.to_dict(),
        protocol=protocol, k=k, seeds=seeds, gridsearch=gridsearch,
        sessions=[{"seed": s.seed, "key": s.key, "init_seed": s.init_seed,
                   "loss": s.loss.to_dict(), "checkpoint": s.checkpoint} for s in result.sessions],
        split_fingerprints=result.plan_fingerprints,
        pooled={r.scope: {"auc": r.auc, "f1": r.f1} for r in pooled}))
    return 0


def cmd_sweep_kernel(args):
    doc = load_config_file(args.config)
    model_cfg = resolve_model(doc, args)
    loss_cfg = resolve_loss(doc, args)
    opt_cfg = resolve_optimizer(doc, args)
    seeds = resolve_seeds(doc, args)
    protocol = args.protocol or doc.get("protocol", "kfold")
    k = args.k if args.k is not None else int(doc.get("k", 5))
    kernels = [int(x) for x in (args.kernels or doc.get("kernels", (10, 50, 125, 250)))]
    metric = args.metric
    ds, rule = _load_windows(doc, args)
    run_dir = Path(args.run_dir) if args.run_dir else (
        output_root(args) / f"sweep-{protocol}-{loss_cfg.kind}-seed{seeds[0]}")
    results = kernel_sweep(ds, kernels, protocol, seeds, model_cfg, loss_cfg, opt_cfg, k,
                           run_dir, progress=_progress)
    tables = {f"K{K}": r.reports for K, r in results.items()}
    summaries = {name: aggregate(reps) for name, reps in tables.items()}
    scores = np.array([[getattr(rep, metric) or 0.0 for rep in reps] for reps in tables.values()]).T
    stats = nemenyi(scores, treatments=list(tables)) if len(kernels) >= 2 else None
    emit_report(run_dir / "report", tables, summaries, stats)
    print((run_dir / "report" / "summary.txt").read_text(), end="")
    write_json(run_dir / "run.json", _run_record(
        "sweep-kernel", manifest=str(_manifest_path(doc, args)), labeling_rule=rule,
        model=model_cfg.to_dict(), loss=loss_cfg.to_dict(), optimizer=opt_cfg.to_dict(),
        protocol=protocol, k=k, seeds=seeds, kernels=kernels, metric=metric,
        split_fingerprints={f"K{K}": r.plan_fingerprints for K, r in results.items()},
        friedman=None if stats is None else {"chi_square": stats.chi_square,
                                             "dof": stats.degrees_of_freedom,
                                             "p_value": stats.p_value}))
    return 0


def cmd_gridsearch(args):
    doc = load_config_file(args.config)
    model_cfg = resolve_model(doc, args)
    loss_cfg = resolve_loss(doc, args)
    opt_cfg = resolve_optimizer(doc, args)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    ds, _ = _load_windows(doc, args)
    result = grid_search_loss(ds, loss_cfg.kind, doc.get("grid"), opt_cfg, model_cfg, seed,
                              base_loss=loss_cfg)
    run_dir = Path(args.run_dir) if args.run_dir else output_root(args) / f"grid-{loss_cfg.kind}-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(result.candidates[0].params)
        w.writerow(keys + ["mean_f1"] + [f"fold{i}_f1" for i in range(len(result.candidates[0].fold_f1))])
        for c in result.candidates:
            w.writerow([c.params[key] for key in keys] + [repr(c.mean_f1)] + [repr(v) for v in c.fold_f1])
    print(f"{len(result.candidates)} candidates; best {result.best.params} "
          f"(mean F1 {result.best.mean_f1:.4f})")
    write_json(run_dir / "run.json", _run_record(
        "gridsearch", model=model_cfg.to_dict(), loss=loss_cfg.to_dict(),
        optimizer=opt_cfg.to_dict(), seed=seed, best=result.best.params))
    return 0


def cmd_detect(args):
    model = load_checkpoint(args.checkpoint)
    rec = load_recording(args.recording)
    cfg = model.config
    if rec.samples.shape[0] != cfg.electrodes or rec.sampling_rate_hz != cfg.sampling_rate_hz:
        raise ConfigError(
            f"recording has {rec.samples.shape[0]} electrodes at {rec.sampling_rate_hz} Hz; "
            f"model expects {cfg.electrodes} at {cfg.sampling_rate_hz} Hz")
    ds = window(rec)
    threshold = args.threshold if args.threshold is not None else cfg.decision_threshold
    probs = model.predict(ds.X)
    intervals = detect_intervals(probs, threshold)
    anns = [Annotation(float(iv.onset_sec), float(iv.offset_sec), (iv.electrode,)) for iv in intervals]
    text = annotations_text(anns, rec.electrode_names)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    for iv in intervals:
        print(f"{rec.electrode_names[iv.electrode]}\t{iv.onset_sec}\t{iv.offset_sec}")
    if not intervals:
        print("no abnormal seconds detected")
    return 0


def cmd_param_count(args):
    doc = load_config_file(args.config)
    cfg = resolve_model(doc, args)
    model = build(cfg, 0)
    total = parameter_count(model)
    breakdown = parameter_breakdown(model)
    if breakdown != count_parameters_from_config(cfg):
        raise ConfigError("parameter inventory disagrees with the closed-form count")
    print(total)
    if args.verbose:
        for name, n in breakdown.items():
            print(f"  {name}: {n}")
    return 0


def cmd_gradcheck(args):
    doc = load_config_file(args.config)
    cfg = replace(resolve_model(doc, args), dtype="float64")
    rng = np.random.default_rng(args.seed)
    model = build(cfg, args.seed)
    for bn in model.batch_norm_layers():
        bn.buffers["moving_mean"] = rng.normal(0.0, 0.1, bn.buffers["moving_mean"].shape)
        bn.buffers["moving_var"] = rng.uniform(0.5, 2.0, bn.buffers["moving_var"].shape)
    x = rng.standard_normal((args.batch, 1, cfg.electrodes, cfg.window_samples))
    y = (rng.random((args.batch, cfg.electrodes)) < 0.3).astype(float)
    loss_cfg = resolve_loss(doc, args).with_counts(y)
    res = gradient_check(model, x, y, loss_cfg, bn_mode=args.bn_mode,
                         max_entries=args.max_entries, seed=args.seed, fused=args.fused)
    for name, err in res.per_array.items():
        print(f"  {name}: {err:.3e}")
    verdict = "PASS" if res.passed(args.tol) else "FAIL"
    print(f"max relative error {res.max_rel_error:.3e} over {res.checked} entries: {verdict} "
          f"(tolerance {args.tol:g})")
    return 0 if verdict == "PASS" else EXIT_NUMERIC


def _read_reports(path):
    tables = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            num = {k: (None if row[k] == "" else float(row[k]))
                   for k in ("auc", "f1", "sensitivity", "specificity", "precision")}
            c = Confusion(int(row["tp"]), int(row["fp"]), int(row["tn"]), int(row["fn"]))
            tables.setdefault(row["config"], []).append(MetricsReport(row["scope"], c, **num))
    return tables


def cmd_report(args):
    tables = {}
    for run in args.runs:
        path = Path(run)
        if path.is_dir():
            path = path / "report" / "reports.csv"
        if not path.exists():
            raise FormatError(f"no reports.csv found at {path}")
        for name, reps in _read_reports(path).items():
            if name in tables:
                name = f"{name}@{Path(run).name}"
            tables[name] = reps
    summaries = {name: aggregate(reps) for name, reps in tables.items()}
    stats = None
    scopes = [[r.scope for r in reps] for reps in tables.values()]
    if len(tables) >= 2 and all(s == scopes[0] for s in scopes):
        scores = np.array([[getattr(r, args.metric) or 0.0 for r in reps]
                           for reps in tables.values()]).T
        stats = friedman(scores, list(tables))
        if len(tables) <= 10 and len(scores) >= 2:
            stats = nemenyi(scores, treatments=list(tables))
    out = Path(args.out) if args.out else output_root(args) / "report"
    emit_report(out, tables, summaries, stats)
    print((out / "summary.txt").read_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON config file; command-line flags override it")
    p.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./meegnet-runs)")


def _training_flags(p):
    p.add_argument("--manifest", help="dataset manifest written by 'synth'")
    p.add_argument("--kernel", type=int, help="temporal kernel size K")
    p.add_argument("--loss", choices=("bce", "fl", "cbf"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--rule", choices=("majority", "any"), help="window labelling rule")
    p.add_argument("--seed", type=int, help="base seed (repeat i uses seed + i)")
    p.add_argument("--run-dir", help="explicit run directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="meegnet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--cases", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--snr", type=float, help="event-to-background RMS ratio")
    p.add_argument("--burst-freq", type=float)
    p.add_argument("--normal-cases", type=int)
    p.add_argument("--out", help="dataset directory")
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("validate", cmd_validate, "run 5-fold or leave-one-case-out validation"),
                              ("sweep-kernel", cmd_sweep_kernel, "paired kernel-size study")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _training_flags(p)
        p.add_argument("--protocol", choices=("kfold", "loco"))
        p.add_argument("--k", type=int)
        p.add_argument("--repeats", type=int)
        p.add_argument("--seeds", type=int, nargs="+")
        if name == "validate":
            p.add_argument("--gridsearch", action="store_true")
        else:
            p.add_argument("--kernels", type=int, nargs="+")
            p.add_argument("--metric", choices=("f1", "auc"), default="f1")
        p.set_defaults(func=func)

    p = sub.add_parser("gridsearch", help="3-fold loss hyperparameter search on a dataset")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("detect", help="per-second detection with a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--recording", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="write detections in annotation format")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("param-count", help="print the parameter count")
    _common(p)
    p.add_argument("--kernel", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    _common(p)
    p.add_argument("--kernel", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--bn-mode", choices=("infer", "train"), default="infer")
    p.add_argument("--max-entries", type=int, default=24)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--fused", action="store_true", help="check the fused front end used in training")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="re-aggregate reports.csv files and compare configs")
    _common(p)
    p.add_argument("runs", nargs="+", help="run directories or reports.csv files")
    p.add_argument("--metric", choices=("f1", "auc"), default="f1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MEEGNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands::

    gen      write a synthetic dataset (volumes, manifest, mask, ground truth)
    run-a    leave-one-subject-out pipeline with hyperalignment and Model A
    run-b    random-split pipeline with Model B, repeated training
    bench    single-sample and batched inference timing of a checkpoint
    metrics  recompute a metrics report from stored predictions

Exit codes: 0 success, 1 numerical failure, 2 bad input or file format.
"""
import argparse
import json
import os
import sys
import time

import numpy as np

from .evaluation import (
    PipelineAConfig,
    PipelineBConfig,
    compute_metrics,
    run_pipeline_a,
    run_pipeline_b,
)
from .exceptions import NumericalError
from .io import (
    SynthSpec,
    load_dataset,
    subject_matrices,
    synth_generate,
    write_manifest,
    write_mask_file,
    write_volume_file,
)
from .models import CompiledConvNet, load_network, predict

PRESETS = {
    "paper-a": dict(n_subjects=11, runs_per_subject=2, timepoints_per_run=200),
    "paper-b": dict(n_subjects=22, runs_per_subject=[1] * 9 + [2] * 9 + [3] * 4, timepoints_per_run=40),
}

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(defaults, file_cfg, flags):
    """defaults < config file < explicitly given flags (``None`` means not given)."""
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(args, resolved):
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), {"command": args.command, "seed": args.seed, **resolved})


def cmd_gen(args):
    file_cfg = _load_config(args.config)
    defaults = SynthSpec().to_dict()
    defaults.update(PRESETS[args.preset])
    flags = {"noise_sigma": args.noise, "class_signal_amplitude": args.amplitude}
    resolved = _resolve(defaults, file_cfg, flags)
    resolved["seed"] = args.seed
    try:
        spec = SynthSpec(**{k: tuple(v) if k == "dims" else v for k, v in resolved.items()})
    except TypeError as exc:
        raise ValueError(f"bad synthetic dataset options: {exc}") from exc
    _prepare_out(args, {"preset": args.preset, "synth": spec.to_dict()})

    series, mask, truth = synth_generate(spec)
    entries = []
    for s in series:
        name = f"{s.subject_id}_{s.run_id}.bvol"
        write_volume_file(os.path.join(args.out, name), s)
        entries.append((s.subject_id, s.run_id, name))
    write_manifest(os.path.join(args.out, "manifest.jsonl"), entries)
    write_mask_file(os.path.join(args.out, "mask.bmsk"), mask)
    with open(os.path.join(args.out, "ground_truth.json"), "w", encoding="utf-8") as fh:
        fh.write(truth.to_json())
    print(f"wrote {len(series)} runs for {spec.n_subjects} subjects to {args.out}")
    return EXIT_OK


def _dump_report(out, stem, report, predictions):
    _write_json(os.path.join(out, f"{stem}.json"), report.to_dict())
    report.write_roc_csv(os.path.join(out, f"{stem}_roc.csv"))
    _write_json(os.path.join(out, f"{stem}_predictions.json"), predictions)


def cmd_run_a(args):
    defaults = PipelineAConfig().to_dict()
    flags = {"epochs": args.epochs, "alignment": args.alignment, "n_voxels": args.voxels}
    resolved = _resolve(defaults, _load_config(args.config), flags)
    config = PipelineAConfig.from_dict(resolved)
    series, mask = load_dataset(args.dataset)
    if mask is None:
        raise FileNotFoundError(os.path.join(args.dataset, "mask.bmsk"))
    subjects = subject_matrices(series, mask)
    _prepare_out(args, {"dataset": args.dataset, "pipeline": config.to_dict()})
    ckpt = os.path.join(args.out, "checkpoints")
    os.makedirs(ckpt, exist_ok=True)
    results, summary = run_pipeline_a(subjects, config, seed=args.seed, log=print, checkpoint_dir=ckpt)
    for r in results:
        _dump_report(args.out, f"fold_{r.held_out_subject}", r.report, r.predictions)
    summary["folds"] = [r.held_out_subject for r in results]
    summary["provenance"] = {r.held_out_subject: r.provenance for r in results}
    _write_json(os.path.join(args.out, "summary.json"), summary)
    print(f"LOOCV accuracy {summary['mean_accuracy']:.4f} +- {summary['sd_accuracy']:.4f}")
    return EXIT_OK


def cmd_run_b(args):
    defaults = PipelineBConfig().to_dict()
    flags = {"epochs": args.epochs, "repeats": args.repeats, "grouped_split": args.grouped_split}
    resolved = _resolve(defaults, _load_config(args.config), flags)
    config = PipelineBConfig.from_dict(resolved)
    series, _ = load_dataset(args.dataset)
    volumes = np.concatenate([s.volumes for s in series])
    labels = np.concatenate([s.labels for s in series])
    groups = np.concatenate([[f"{s.subject_id}/{s.run_id}"] * len(s) for s in series])
    _prepare_out(args, {"dataset": args.dataset, "pipeline": config.to_dict()})
    ckpt = os.path.join(args.out, "checkpoints")
    os.makedirs(ckpt, exist_ok=True)
    reports, predictions, summary, split = run_pipeline_b(
        volumes, labels, config, seed=args.seed, groups=groups, log=print, checkpoint_dir=ckpt
    )
    for r, (report, preds) in enumerate(zip(reports, predictions)):
        _dump_report(args.out, f"repeat_{r:02d}", report, preds)
    summary["split"] = split
    _write_json(os.path.join(args.out, "summary.json"), summary)
    print(f"test accuracy {summary['mean_accuracy']:.4f} +- {summary['sd_accuracy']:.4f}")
    return EXIT_OK


def _bench_inputs(args, kind, cfg):
    if kind == "a":
        shape = (1, cfg.input_len)
    else:
        shape = tuple(cfg.input_shape)
    if args.inputs is not None:
        X = np.load(args.inputs).astype(np.float64)
    elif args.dataset is not None:
        series, _ = load_dataset(args.dataset)
        X = np.concatenate([s.volumes for s in series])[: args.n]
    else:
        X = np.random.default_rng(args.seed).standard_normal((args.n,) + shape)
    if X.ndim == len(shape):
        X = X[:, None]
    if X.shape[1:] != shape:
        raise ValueError(f"inputs of shape {X.shape[1:]} do not fit the checkpoint's {shape}")
    return X


def _timing(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"n": 0, "mean": 0.0, "sd": 0.0}
    return {"n": int(values.size), "mean": float(values.mean()), "sd": float(values.std())}


def cmd_bench(args):
    kind, cfg, net = load_network(args.checkpoint)
    X = _bench_inputs(args, kind, cfg)
    engines = {"float64": net}
    if kind == "a":
        engines["float32"] = CompiledConvNet(net)
    report = {"kind": kind, "n_samples": int(len(X)), "batch_size": args.batch_size, "engines": {}}
    for name, engine in engines.items():
        single = [predict(engine, x)[2] for x in X]
        batch_totals = []
        for _ in range(args.repeats):
            start = time.perf_counter()
            for i in range(0, len(X), args.batch_size):
                engine.predict_proba(X[i: i + args.batch_size])
            batch_totals.append(time.perf_counter() - start)
        per_sample = [t / len(X) for t in batch_totals] if len(X) else []
        report["engines"][name] = {
            "single_sample_seconds": _timing(single),
            "batch_total_seconds": _timing(batch_totals),
            "batch_per_sample_seconds": _timing(per_sample),
        }
        s = report["engines"][name]["single_sample_seconds"]
        print(f"{name}: single {s['mean'] * 1e3:.3f} +- {s['sd'] * 1e3:.3f} ms over {s['n']} samples")
    _prepare_out(args, {"checkpoint": args.checkpoint, "n": args.n, "batch_size": args.batch_size,
                        "repeats": args.repeats})
    _write_json(os.path.join(args.out, "bench.json"), report)
    return EXIT_OK


def cmd_metrics(args):
    with open(args.predictions, encoding="utf-8") as fh:
        stored = json.load(fh)
    try:
        y_true, y_pred = stored["y_true"], stored["y_pred"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{args.predictions}: needs 'y_true' and 'y_pred' lists") from exc
    scores = stored.get("scores")
    if scores is not None and len(scores) == 0:
        scores = None
    report = compute_metrics(y_true, y_pred, scores, n_classes=stored.get("n_classes"))
    _prepare_out(args, {"predictions": args.predictions})
    _write_json(os.path.join(args.out, "metrics.json"), report.to_dict(timing=False))
    if report.roc:
        report.write_roc_csv(os.path.join(args.out, "roc.csv"))
    print(f"accuracy {report.accuracy:.4f} over {int(report.n_samples)} samples")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--config", default=None, help="JSON file of option overrides")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")

    parser = argparse.ArgumentParser(prog="brainstate", description="fMRI brain-state decoding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper-a")
    p.add_argument("--noise", type=float, default=None, help="noise standard deviation")
    p.add_argument("--amplitude", type=float, default=None, help="class signal amplitude")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run-a", parents=[common], help="leave-one-subject-out Model A pipeline")
    p.add_argument("dataset")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alignment", choices=["hyperalign", "identity"], default=None)
    p.add_argument("--voxels", type=int, default=None, help="voxels kept by the ANOVA selection")
    p.set_defaults(func=cmd_run_a)

    p = sub.add_parser("run-b", parents=[common], help="random-split Model B pipeline")
    p.add_argument("dataset")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--grouped-split", action="store_true", default=None, help="keep each run inside one split")
    p.set_defaults(func=cmd_run_b)

    p = sub.add_parser("bench", parents=[common], help="inference latency of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", default=None)
    p.add_argument("--inputs", default=None, help=".npy array of samples")
    p.add_argument("--n", type=int, default=600, help="number of samples")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", parents=[common], help="recompute metrics from stored predictions")
    p.add_argument("predictions")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

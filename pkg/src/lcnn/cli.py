"""``lcnn`` command line: features, training, pruning, quantization, complexity and ensembles.

Exit status is 0 on success, 1 when a complexity gate fails and 2 for
invalid input.  Diagnostics go to stderr; ``--json`` switches stdout to
machine-readable output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from itertools import combinations
from pathlib import Path

import numpy as np
import tomli

from . import complexity, ensemble, features, io, pruning, trainer
from .config import ConfigError, PipelineConfig, load_config
from .nn import Model, ShapeError, parse_architecture

log = logging.getLogger("lcnn")

EXIT_OK, EXIT_GATE, EXIT_INPUT = 0, 1, 2


class InputError(ValueError):
    pass


def _jobs(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("LCNN_JOBS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise InputError(f"LCNN_JOBS must be an integer, got {env!r}") from None


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2) if args.json else text)


def _labels(args) -> tuple[str, ...]:
    return tuple(s.strip() for s in args.labels.split(",")) if args.labels else io.SCENE_LABELS


def load_dataset(manifest_path, vocabulary=io.SCENE_LABELS, feature_cfg=None) -> trainer.Dataset:
    """Stack the features listed in a manifest; WAV entries are extracted on the fly."""
    m = io.read_manifest(manifest_path, vocabulary)
    if len(m) == 0:
        raise InputError(f"{manifest_path}: manifest lists no files")
    fc = feature_cfg
    xs = []
    for p in m.paths():
        if p.suffix.lower() == ".wav" and fc is not None:
            xs.append(features.extract(features.read_wav(p), fc.window_ms, fc.hop_ms, fc.n_mels))
        else:
            xs.append(features.load_feature(p))
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise InputError(f"{manifest_path}: features have differing shapes {sorted(shapes)}")
    return trainer.Dataset(np.stack(xs)[..., None].astype(np.float32), m.labels())


def _split(cfg: PipelineConfig) -> trainer.Split:
    if cfg.data.train is None or cfg.data.val is None:
        raise InputError("config needs [data] train and val manifests")
    return trainer.Split(load_dataset(cfg.data.train, cfg.data.labels, cfg.features),
                         load_dataset(cfg.data.val, cfg.data.labels, cfg.features))


def _model(path) -> Model:
    spec, params = io.load_model(path)
    return Model(spec, params, Path(path).stem)


def _members(text: str) -> list[Model]:
    paths = [p.strip() for p in text.split(",") if p.strip()]
    if not paths:
        raise InputError("--members needs at least one model file")
    return [_model(p) for p in paths]


def _metrics_path(out: Path) -> Path:
    return out.with_name(out.stem + ".metrics.csv")


def _train_summary(args, out: Path, spec, record: trainer.MetricsRecord) -> None:
    payload = {"model": str(out), "metrics": str(_metrics_path(out)), "epochs": record.epochs,
               "best_epoch": record.best_epoch, "val_accuracy": record.best_accuracy,
               "val_logloss": record.best_logloss, "diverged": record.diverged,
               "params": complexity.count_params(spec)}
    text = (f"wrote {out} ({payload['params']} params); best epoch {record.best_epoch} of {record.epochs}: "
            f"val accuracy {record.best_accuracy:.2f}%, log-loss {record.best_logloss:.4f}")
    if record.diverged:
        print(f"warning: training diverged; kept epoch {record.best_epoch} weights", file=sys.stderr)
    _emit(args, payload, text)


def _save(path: Path, spec, params, quantize: bool) -> None:
    io.save_model(path, spec, params, "int8" if quantize else "float32")


# ---- subcommands ------------------------------------------------------------

def cmd_features_extract(args) -> int:
    m = io.read_manifest(args.manifest, _labels(args))
    out = Path(args.out)
    written = features.extract_to_cache(m.paths(), out, _jobs(args.jobs))
    io.write_manifest(out / "manifest.csv", [(p.name, label) for p, (_, label) in zip(written, m.rows)])
    _emit(args, {"files": len(written), "manifest": str(out / "manifest.csv")},
          f"extracted {len(written)} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = _split(cfg)
    spec = parse_architecture(cfg.model.architecture, kernel=cfg.model.kernel,
                              activations=cfg.model.activations, input_shape=data.train.x.shape[1:],
                              classes=len(cfg.data.labels))
    params, record = trainer.train(spec, data, cfg.train, seed=args.seed)
    out = Path(args.out)
    _save(out, spec, params, cfg.quantize.enabled)
    record.write_csv(_metrics_path(out))
    _train_summary(args, out, spec, record)
    return EXIT_OK


def _parse_counts(text: str) -> dict[str, int]:
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"--counts expects integers like 4,0,0; got {text!r}") from None
    if len(values) != 3 or min(values) < 0:
        raise InputError("--counts needs three non-negative integers for C1,C2,C3")
    return {name: n for name, n in zip(("C1", "C2", "C3"), values) if n}


def cmd_prune(args) -> int:
    model = _model(args.model)
    counts = _parse_counts(args.counts)
    plan = pruning.plan_pruning(model.spec, model.params, counts)
    spec, params = pruning.apply_prune(model.spec, model.params, plan)
    io.save_model(args.out, spec, params)
    if args.plan:
        Path(args.plan).write_text(plan.to_json() + "\n")
    before, after = complexity.count_params(model.spec), complexity.count_params(spec)
    _emit(args, {"model": args.out, "removed": {k: plan.removed(k) for k in plan.pairs},
                 "params_before": before, "params_after": after},
          f"wrote {args.out}: {before} -> {after} params; removed "
          + (", ".join(f"{k} {plan.removed(k)}" for k in plan.pairs) or "nothing"))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    model = _model(args.model)
    data = _split(cfg)
    params, record = trainer.finetune(model.spec, model.params, data, cfg.train)
    out = Path(args.out)
    _save(out, model.spec, params, cfg.quantize.enabled)
    record.write_csv(_metrics_path(out))
    _train_summary(args, out, model.spec, record)
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = _model(args.model)
    size = io.save_model(args.out, model.spec, model.params, "int8")
    src = Path(args.model).stat().st_size
    _emit(args, {"model": args.out, "bytes": size, "source_bytes": src, "ratio": size / src},
          f"wrote {args.out}: {size} B (source {src} B, ratio {size / src:.3f})")
    return EXIT_OK


def cmd_complexity(args) -> int:
    if bool(args.model) == bool(args.arch):
        raise InputError("give exactly one of --model or --arch")
    if args.model:
        spec = _model(args.model).spec
    else:
        spec = parse_architecture(args.arch, kernel=args.kernel, activations=args.activations,
                                  classes=args.classes)
    r = complexity.report(spec, gate=True)
    payload = r.to_dict()
    text = r.table()
    if args.model:
        payload["file"] = {"path": args.model, "precision": io.model_precision(args.model),
                           "bytes": Path(args.model).stat().st_size}
        text += f"\nfile: {args.model} ({payload['file']['precision']}, {payload['file']['bytes']} B)"
    _emit(args, payload, text)
    if args.gate and not r.gate.passed:
        print("complexity gate failed: "
              f"{r.total_params} params (limit {complexity.MAX_PARAMS}), "
              f"{r.total_macs} MACs (limit {complexity.MAX_MACS})", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def _mse_reports(ens: ensemble.Ensemble, layers: list[str], x) -> dict:
    reports = {}
    for layer in layers:
        for i, j in combinations(range(len(ens)), 2):
            try:
                reports[(i, j, layer)] = ensemble.feature_map_mse(ens.members[i], ens.members[j], layer, x)
            except ValueError as exc:
                log.info("members %d and %d: %s", i, j, exc)
    return reports


def cmd_ensemble_eval(args) -> int:
    ens = ensemble.Ensemble(_members(args.members))
    data = load_dataset(args.dataset, _labels(args))
    per_member = [trainer.evaluate(m, data) for m in ens.members]
    rep = ens.complexity()
    payload = {"members": [{"model": m.name, "accuracy": e.accuracy, "logloss": e.logloss}
                           for m, e in zip(ens.members, per_member)],
               "total_params": rep.total_params, "total_macs": rep.total_macs,
               "gate_passed": rep.gate.passed}
    lines = [f"{m.name:<24} accuracy {e.accuracy:6.2f}%  log-loss {e.logloss:.4f}"
             for m, e in zip(ens.members, per_member)]
    if args.dedup:
        reports = _mse_reports(ens, args.layers.split(","), data.x)
        plan = ensemble.build_share_plan(reports, args.threshold)
        result = ensemble.ensemble_infer(ens, plan, data.x, measure_drift=True)
        ev = trainer.metrics_from_probabilities(result.probabilities, data.y)
        payload["dedup"] = {**result.to_dict(), "threshold": args.threshold,
                            "edges": json.loads(plan.to_json())["edges"]}
        lines.append(f"shared maps {result.shared_maps} (threshold {args.threshold:g}): "
                     f"MACs {result.macs_plain:,} -> {result.macs_dedup:,} (saved {result.macs_saved:,}), "
                     f"params saved {result.params_saved}, max drift {result.max_drift:.3g}")
    else:
        ev = trainer.metrics_from_probabilities(ens.predict(data.x), data.y)
    payload.update(accuracy=ev.accuracy, logloss=ev.logloss)
    lines.insert(0, f"ensemble of {len(ens)}: accuracy {ev.accuracy:.2f}%, log-loss {ev.logloss:.4f}; "
                    f"{rep.total_params} params, {rep.total_macs:,} MACs")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _model(args.model)
    data = load_dataset(args.dataset, _labels(args))
    ev = trainer.evaluate(model, data)
    if args.confusion:
        Path(args.confusion).write_text(ev.confusion_csv(list(_labels(args))))
    _emit(args, {"model": args.model, "accuracy": ev.accuracy, "logloss": ev.logloss,
                 "confusion": ev.confusion.tolist()},
          f"{model.name}: accuracy {ev.accuracy:.2f}%, log-loss {ev.logloss:.4f}")
    return EXIT_OK


def cmd_analyze_share(args) -> int:
    members = _members(args.members)
    if len(members) != 2:
        raise InputError("analyze share compares exactly two models")
    data = load_dataset(args.dataset, _labels(args))
    r = ensemble.feature_map_mse(members[0], members[1], args.layer, data.x)
    rows = [("provenance", "index_a", "index_b", "mse", "shared")]
    rows += [(p, a, b, f"{v:.6g}", int(v <= args.threshold))
             for p, a, b, v in zip(r.provenance, r.indices_a, r.indices_b, r.values)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    if args.json:
        print(json.dumps({**r.to_dict(), "threshold": args.threshold,
                          "shared": int(np.sum(r.values <= args.threshold))}, indent=2))
    elif not args.out:
        csv.writer(sys.stdout).writerows(rows)
    else:
        print(f"wrote {args.out}: {int(np.sum(r.values <= args.threshold))} of {len(r.values)} "
              f"{args.layer} maps within {args.threshold:g}")
    return EXIT_OK


def _load_grid(path) -> list[trainer.SweepPoint]:
    raw = tomli.loads(Path(path).read_text())
    unknown = sorted(set(raw) - {"kernels", "activations"})
    if unknown:
        raise InputError(f"{path}: unknown grid key(s): {', '.join(unknown)}")
    acts = raw.get("activations")
    for a in acts or []:
        if len(a) != 4 or set(a) - set("TRN"):
            raise InputError(f"{path}: activation pattern {a!r} must be 4 letters from T, R, N")
    return trainer.build_grid(tuple(raw.get("kernels", (1, 3, 5, 7))), acts)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    data = _split(cfg)
    points = _load_grid(args.grid)
    widths = tuple(int(w) for w in cfg.model.architecture.split("-"))
    rows = trainer.run_sweep(points, data, cfg.train, widths, classes=len(cfg.data.labels),
                             jobs=_jobs(args.jobs))
    trainer.write_sweep_csv(rows, args.out)
    failed = [r for r in rows if r["error"] and r["seed"] != "mean"]
    for r in failed:
        print(f"{r['config_id']} seed {r['seed']}: {r['error']}", file=sys.stderr)
    _emit(args, {"out": args.out, "rows": len(rows), "failed": len(failed)},
          f"wrote {args.out}: {len(points)} configurations x {len(cfg.train.seeds)} seeds")
    return EXIT_OK


def cmd_toy_data(args) -> int:
    """Write a synthetic dataset as .lmel files, manifests and a starter config."""
    if not 2 <= args.classes <= len(io.SCENE_LABELS):
        raise InputError(f"--classes must be between 2 and {len(io.SCENE_LABELS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = trainer.make_toy_dataset(args.classes, args.per_class, seed=args.seed)
    labels = io.SCENE_LABELS[:args.classes]
    for name, ds in (("train", split.train), ("val", split.val)):
        rows = []
        for k, (x, y) in enumerate(zip(ds.x, ds.y)):
            fname = f"{name}_{k:05d}.lmel"
            features.write_lmel(out / fname, x[..., 0])
            rows.append((fname, labels[y]))
        io.write_manifest(out / f"{name}.csv", rows)
    (out / "config.toml").write_text(
        '[data]\ntrain = "train.csv"\nval = "val.csv"\n'
        f"labels = [{', '.join(json.dumps(l) for l in labels)}]\n\n"
        '[model]\narchitecture = "16-16-32-100"\n\n'
        "[train]\nbatch_size = 32\nmax_epochs = 20\npatience = 5\nbn_momentum = 0.9\n")
    _emit(args, {"out": str(out), "train": len(split.train), "val": len(split.val)},
          f"wrote {len(split.train)} training and {len(split.val)} validation examples to {out}")
    return EXIT_OK


# ---- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument("--jobs", type=int, default=None, help="worker processes (default $LCNN_JOBS or 1)")
    labels = argparse.ArgumentParser(add_help=False)
    labels.add_argument("--labels", help="comma-separated class vocabulary (default: the 10 scene labels)")

    p = argparse.ArgumentParser(prog="lcnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    feat = sub.add_parser("features", help="feature extraction").add_subparsers(dest="action", required=True)
    s = feat.add_parser("extract", parents=[common, jobs, labels], help="WAV clips to .lmel cache")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features_extract)

    s = sub.add_parser("train", parents=[common], help="train a network from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="weight-init seed (default: first config seed)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("prune", parents=[common], help="remove redundant conv filters")
    s.add_argument("--model", required=True)
    s.add_argument("--counts", required=True, help="filters to remove from C1,C2,C3, e.g. 4,0,0")
    s.add_argument("--out", required=True)
    s.add_argument("--plan", help="write the prune plan (JSON) here")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("finetune", parents=[common], help="continue training a (pruned) model")
    s.add_argument("--model", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("quantize", parents=[common], help="write an int8 model container")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("complexity", parents=[common], help="params, MACs and model size")
    s.add_argument("--model")
    s.add_argument("--arch", help="C1-C2-C3-dense widths, e.g. 16-16-32-100")
    s.add_argument("--kernel", type=int, default=3)
    s.add_argument("--activations", default="TRTT")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--gate", action="store_true", help="exit 1 if over 128k params or 30M MACs")
    s.set_defaults(func=cmd_complexity)

    s = sub.add_parser("evaluate", parents=[common, labels], help="accuracy and log-loss of one model")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--confusion", help="write the confusion matrix CSV here")
    s.set_defaults(func=cmd_evaluate)

    ens = sub.add_parser("ensemble", help="ensembles of models").add_subparsers(dest="action", required=True)
    s = ens.add_parser("eval", parents=[common, labels], help="evaluate an averaged ensemble")
    s.add_argument("--members", required=True, help="comma-separated model files, in order")
    s.add_argument("--dataset", required=True)
    s.add_argument("--dedup", action="store_true", help="copy similar feature maps between members")
    s.add_argument("--threshold", type=float, default=1e4)
    s.add_argument("--layers", default="C1", help="conv layers eligible for sharing")
    s.set_defaults(func=cmd_ensemble_eval)

    an = sub.add_parser("analyze", help="analyses").add_subparsers(dest="action", required=True)
    s = an.add_parser("share", parents=[common, labels], help="per-map MSE between two models")
    s.add_argument("--members", required=True)
    s.add_argument("--layer", default="C1")
    s.add_argument("--dataset", required=True)
    s.add_argument("--threshold", type=float, default=1e4)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_analyze_share)

    s = sub.add_parser("sweep", parents=[common, jobs], help="kernel size / activation sweep")
    s.add_argument("--grid", required=True, help="TOML with 'kernels' and 'activations' lists")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("toy-data", parents=[common], help="write a small synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_toy_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, io.ModelFormatError, ShapeError, ValueError, KeyError,
            FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"lcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

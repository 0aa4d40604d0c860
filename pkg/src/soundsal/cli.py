"""``soundsal`` command line: data generation, training, masking, evaluation,
the linear interval experiment and the randomization sanity check.

Every command writes ``manifest.json`` into its output directory; ``soundsal
replay`` re-executes a manifest.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .datasets import (
    ShapesConfig,
    generate_splits,
    generate_two_object,
    load_dataset,
    save_dataset,
)
from .export import (
    dump_json,
    map_stem,
    read_map_csv,
    write_map_csv,
    write_pgm,
    write_rows_csv,
)
from .lintheory import theorem_experiment
from .masker import (
    BlurFill,
    CenteredGaussian,
    GradientInput,
    GrayFill,
    MaskSaliency,
    RandomSaliency,
)
from .metrics import (
    MetricThresholds,
    completeness_score,
    deletion_curve,
    insertion_curve,
    saliency_metric,
    soundness_score,
    tune_saliency_threshold,
)
from .net import MlpClassifier, load_model, save_model
from .sanity import sanity_check


class CliError(Exception):
    """A user-facing failure; reported on stderr with exit code 2."""


# -- helpers ------------------------------------------------------------------------


_INPUT_FLAGS = ("train", "test", "model", "data", "pool", "maps", "holdout_data", "holdout_maps")


def _write_manifest(args, outputs, results=None):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    inputs = {k: config[k] for k in _INPUT_FLAGS if config.get(k)}
    manifest = {
        "inputs": inputs,
        "command": args.command,
        "tool_version": __version__,
        "seed": config.get("seed"),
        "config": config,
        "outputs": sorted(outputs),
        "results": results or {},
    }
    dump_json(os.path.join(args.out, "manifest.json"), manifest)


def _load_data(path, limit=None):
    try:
        ds = load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    if limit is not None:
        ds.images, ds.labels = ds.images[:limit], ds.labels[:limit]
    return ds


def _load_model(path):
    try:
        return load_model(path)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def _mask_method(args, model, pool):
    if args.method == "mask":
        return MaskSaliency(
            model, lambda_tv=args.lambda_tv, lambda_l1=args.lambda_l1, scale=args.scale,
            steps=args.steps, learning_rate=args.lr, distractors=args.distractors,
            fill=args.fill, gray_level=args.gray_level, blur_sigma=args.blur_sigma,
            seed=args.seed, n_jobs=args.jobs,
        ).fit(pool)
    if args.method == "gradinput":
        return GradientInput(model)
    if args.method == "random":
        return RandomSaliency(model, seed=args.seed)
    return CenteredGaussian(model)


def _parse_list(text, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = ShapesConfig(h=args.h, w=args.w, class_count=args.classes, n_train=args.n_train,
                       n_test=args.n_test, n_holdout=args.n_holdout, fg_low=args.fg_low,
                       fg_high=args.fg_high, noise=args.noise, seed=args.seed)
    try:
        splits = generate_splits(cfg)
        if args.two_object:
            splits["two_object"] = generate_two_object(cfg, args.n_two_object, args.seed)
    except (ValueError, RuntimeError) as exc:
        raise CliError(str(exc)) from exc
    outputs, counts = [], {}
    for name, ds in splits.items():
        fname = f"{name}.ssds"
        save_dataset(ds, os.path.join(args.out, fname))
        outputs.append(fname)
        counts[name] = len(ds)
    _write_manifest(args, outputs, {"counts": counts})


def cmd_train(args):
    train = _load_data(args.train)
    test = _load_data(args.test)
    if train.shape != test.shape or train.class_count != test.class_count:
        raise CliError(
            f"train data is {train.shape} with {train.class_count} classes but test data is "
            f"{test.shape} with {test.class_count} classes"
        )
    model = MlpClassifier(hidden_dim=args.hidden, n_classes=train.class_count,
                          epochs=args.epochs, batch_size=args.batch_size,
                          learning_rate=args.lr, seed=args.seed)
    try:
        model.fit(train.images, train.labels)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    save_model(model, os.path.join(args.out, "model.ssmf"))
    write_rows_csv(os.path.join(args.out, "loss.csv"), ["epoch", "loss"],
                   [{"epoch": i + 1, "loss": v} for i, v in enumerate(model.loss_curve_)])
    acc = float(model.score(test.images, test.labels)) if len(test) else float("nan")
    _write_manifest(args, ["model.ssmf", "loss.csv"],
                    {"test_accuracy": acc, "final_loss": model.loss_curve_[-1]})


def cmd_mask(args):
    model = _load_model(args.model)
    data = _load_data(args.data, args.limit)
    if data.shape[0] * data.shape[1] != model.n_features_in_:
        raise CliError(f"images of shape {data.shape} do not match model input "
                       f"{model.n_features_in_}")
    pool = None
    if args.method == "mask" and args.fill == "random":
        if not args.pool:
            raise CliError("--fill random needs --pool")
        pool = _load_data(args.pool).images
    X = data.images.astype(np.float64)
    C = model.n_classes_
    try:
        method = _mask_method(args, model, pool)
        if args.labels == "all":
            maps = method.explain_all_labels(X)
            pairs = [(i, a) for i in range(len(X)) for a in range(C)]
            flat = maps.reshape(-1, *X.shape[1:])
        else:
            pred = model.predict(X) if len(X) else np.zeros(0, dtype=int)
            flat = method.explain(X, pred, np.arange(len(X)) * C + pred)
            pairs = list(zip(range(len(X)), pred.tolist()))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    os.makedirs(os.path.join(args.out, "maps"), exist_ok=True)
    outputs = []
    for (i, a), m in zip(pairs, flat):
        stem = os.path.join("maps", map_stem(i, a))
        write_map_csv(os.path.join(args.out, stem + ".csv"), m)
        write_pgm(os.path.join(args.out, stem + ".pgm"), m)
        outputs += [stem + ".csv", stem + ".pgm"]
    _write_manifest(args, outputs, {"maps": len(pairs)})


def _read_maps(maps_dir, needed):
    missing = [map_stem(i, a) for i, a in needed
               if not os.path.exists(os.path.join(maps_dir, map_stem(i, a) + ".csv"))]
    if missing:
        raise CliError(f"missing {len(missing)} map file(s) in {maps_dir}: " + ", ".join(missing))
    return {(i, a): read_map_csv(os.path.join(maps_dir, map_stem(i, a) + ".csv"))
            for i, a in needed}


def _maps_subdir(path):
    sub = os.path.join(path, "maps")
    return sub if os.path.isdir(sub) else path


def cmd_eval(args):
    model = _load_model(args.model)
    data = _load_data(args.data, args.limit)
    X = data.images.astype(np.float64)
    n, C = len(X), model.n_classes_
    metrics = set(args.metrics)
    unknown = metrics - {"insertion", "deletion", "saliency", "cs"}
    if unknown:
        raise CliError(f"unknown metrics: {sorted(unknown)}")
    thresholds = MetricThresholds(args.eps1, args.eps2)
    fill = GrayFill(args.gray_level) if args.fill == "gray" else BlurFill(args.blur_sigma)
    f = model.predict_proba(X) if n else np.zeros((0, C))
    pred = f.argmax(axis=1)
    labels_needed = range(C) if ("cs" in metrics or args.cheating) else None
    needed = [(i, a) for i in range(n) for a in (labels_needed or [pred[i]])]
    maps = _read_maps(_maps_subdir(args.maps), needed)
    if args.cheating:
        for i in range(n):
            for a in range(C):
                maps[(i, a)] = maps[(i, int(pred[i]))]

    threshold = args.saliency_threshold
    if "saliency" in metrics and args.holdout_data:
        hold = _load_data(args.holdout_data)
        hX = hold.images.astype(np.float64)
        hpred = model.predict(hX)
        hmaps = _read_maps(_maps_subdir(args.holdout_maps or ""), list(enumerate(hpred.tolist())))
        threshold = tune_saliency_threshold(model, hX, [hmaps[(i, int(a))]
                                                        for i, a in enumerate(hpred)])

    rows, curve_files = [], []
    if args.curves:
        os.makedirs(os.path.join(args.out, "curves"), exist_ok=True)
    g = np.full((n, C), np.nan)
    for i, a in needed:
        m, x = maps[(i, a)], X[i]
        row = {"sample_id": i, "label": a, "f": f[i, a], "g_auc": None, "alpha": None,
               "beta": None, "insertion_auc": None, "deletion_auc": None,
               "saliency_metric": None}
        if "cs" in metrics:
            g[i, a] = insertion_curve(model, x, a, m, GrayFill(args.gray_level)).auc
            row["g_auc"] = g[i, a]
            row["alpha"] = completeness_score(g[i, a], f[i, a], thresholds.eps1) \
                if f[i, a] > 0 else None
            row["beta"] = soundness_score(f[i, a], g[i, a], thresholds.eps2)
        if "insertion" in metrics:
            curve = insertion_curve(model, x, a, m, fill)
            row["insertion_auc"] = curve.auc
            if args.curves:
                name = os.path.join("curves", map_stem(i, a) + "_insertion.csv")
                write_rows_csv(os.path.join(args.out, name), ["retention_fraction", "probability"],
                               [{"retention_fraction": r, "probability": p}
                                for r, p in curve.rows()])
                curve_files.append(name)
        if "deletion" in metrics:
            curve = deletion_curve(model, x, a, m, fill)
            row["deletion_auc"] = curve.auc
            if args.curves:
                name = os.path.join("curves", map_stem(i, a) + "_deletion.csv")
                write_rows_csv(os.path.join(args.out, name), ["retention_fraction", "probability"],
                               [{"retention_fraction": r, "probability": p}
                                for r, p in curve.rows()])
                curve_files.append(name)
        if "saliency" in metrics and a == pred[i]:
            row["saliency_metric"] = saliency_metric(model, x, m, threshold)
        rows.append(row)

    fields = ["sample_id", "label", "f", "g_auc", "alpha", "beta", "insertion_auc",
              "deletion_auc", "saliency_metric"]
    write_rows_csv(os.path.join(args.out, "report.csv"), fields, rows)

    def mean_of(key):
        vals = [r[key] for r in rows if r[key] is not None and r["label"] == pred[r["sample_id"]]]
        return float(np.mean(vals)) if vals else None

    summary = {
        "method": os.path.basename(os.path.normpath(args.maps)) + (" (cheating)" if args.cheating else ""),
        "n_samples": n,
        "means": {k: mean_of(k) for k in ("insertion_auc", "deletion_auc", "saliency_metric")},
        "saliency_threshold": threshold if "saliency" in metrics else None,
    }
    if "cs" in metrics and n:
        alpha = np.array([[completeness_score(g[i, a], f[i, a], thresholds.eps1)
                           if f[i, a] > 0 else 1.0 for a in range(C)] for i in range(n)])
        beta = soundness_score(f, g, thresholds.eps2)
        wrong = (np.arange(C)[None, :] != pred[:, None]) & (f >= 0.01)
        summary["worst_case"] = {
            "completeness": float(alpha.min(axis=1).mean()),
            "soundness": float(beta.min(axis=1).mean()),
            "wrong_label_completeness": float(alpha[wrong].mean()) if wrong.any() else None,
        }
    dump_json(os.path.join(args.out, "summary.json"), summary)
    _write_manifest(args, ["report.csv", "summary.json"] + curve_files,
                    {"rows": len(rows), "worst_case": summary.get("worst_case")})


def cmd_lintheory(args):
    if args.trials < 1:
        raise CliError("--trials must be at least 1")
    if any(not 1 <= L <= args.d for L in args.L_list):
        raise CliError(f"every L must lie in [1, {args.d}]")
    table = theorem_experiment(args.d, args.gamma, args.L_list, args.trials, args.seed,
                               n_jobs=args.jobs)
    table.to_csv(os.path.join(args.out, "frequencies.csv"))
    _write_manifest(args, ["frequencies.csv"], {"rows": table.rows()})


def cmd_sanity(args):
    model = _load_model(args.model)
    data = _load_data(args.data, args.limit)
    pool = _load_data(args.pool).images if args.pool else None
    if args.fill == "random" and pool is None:
        raise CliError("--fill random needs --pool")
    report = sanity_check(
        model, data.images, pool, seed=args.seed, top_fraction=args.top_fraction,
        mask_seed=args.mask_seed, lambda_tv=args.lambda_tv, lambda_l1=args.lambda_l1,
        scale=args.scale, steps=args.steps, learning_rate=args.lr,
        distractors=args.distractors, fill=args.fill, n_jobs=args.jobs,
    )
    rows = report.rows()
    write_rows_csv(os.path.join(args.out, "sanity.csv"), list(rows[0]) if rows else
                   ["sample_id"], rows)
    dump_json(os.path.join(args.out, "summary.json"), report.summary())
    _write_manifest(args, ["sanity.csv", "summary.json"], report.summary())


def cmd_replay(args):
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    config = dict(manifest["config"])
    if args.out:
        config["out"] = args.out
    ns = argparse.Namespace(**config)
    ns.func = COMMANDS[manifest["command"]]
    _run(ns)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "mask": cmd_mask,
    "eval": cmd_eval,
    "lintheory": cmd_lintheory,
    "sanity": cmd_sanity,
}


# -- parser -----------------------------------------------------------------------------


def _add_mask_flags(p, default_tv=0.01):
    p.add_argument("--lambda-tv", type=float, default=default_tv)
    p.add_argument("--lambda-l1", type=float, default=4e-3)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--distractors", type=int, default=10)
    p.add_argument("--fill", choices=["random", "gray", "blur"], default="random")
    p.add_argument("--jobs", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="soundsal", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/test/holdout shape datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=int, default=16)
    p.add_argument("--w", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--n-holdout", type=int, default=100)
    p.add_argument("--fg-low", type=float, default=0.6)
    p.add_argument("--fg-high", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--two-object", action="store_true")
    p.add_argument("--n-two-object", type=int, default=200)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the classifier")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mask", help="compute heatmaps for every image")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool", help="distractor dataset for --fill random")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", choices=["all", "predicted"], default="predicted")
    p.add_argument("--method", choices=["mask", "gradinput", "random", "center"], default="mask")
    p.add_argument("--gray-level", type=float, default=0.5)
    p.add_argument("--blur-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int)
    _add_mask_flags(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("eval", help="score heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--eps1", type=float, default=0.01)
    p.add_argument("--eps2", type=float, default=0.001)
    p.add_argument("--fill", choices=["gray", "blur"], default="gray")
    p.add_argument("--gray-level", type=float, default=0.5)
    p.add_argument("--blur-sigma", type=float, default=1.0)
    p.add_argument("--metrics", type=lambda t: _parse_list(t, str),
                   default=["insertion", "deletion", "saliency", "cs"])
    p.add_argument("--cheating", action="store_true")
    p.add_argument("--saliency-threshold", type=float, default=0.5)
    p.add_argument("--holdout-data")
    p.add_argument("--holdout-maps")
    p.add_argument("--curves", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lintheory", help="interval vs greedy certification frequencies")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--L-list", dest="L_list", type=lambda t: _parse_list(t, int),
                   default=[8, 16, 32, 64, 128, 256, 512])
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_lintheory)

    p = sub.add_parser("sanity", help="last-layer randomization check")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=100)
    p.add_argument("--top-fraction", type=float, default=0.3)
    _add_mask_flags(p)
    p.set_defaults(func=cmd_sanity)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    p.set_defaults(func=cmd_replay)
    return parser


def _run(args):
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
    args.func(args)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except CliError as exc:
        print(f"soundsal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``m2fusion <subcommand> ...`` (or ``python -m m2fusion``).

Exit codes: 0 success, 2 input/validation error, 3 numerical failure.
"""
import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import ccf, classify, cnn, dataset, imaging, pipeline
from .errors import InputError, NumericalError
from .numerics import bicubic_resize, read_matrix, write_matrix

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

TRAIN_FIELDS = ("momentum", "initial_lr", "lr_drop_factor", "lr_drop_period", "l2", "max_epochs", "minibatch")


def load_image(path):
    if path.lower().endswith(".pgm"):
        return imaging.read_pgm(path)
    return read_matrix(path)


def save_image(path, img):
    """``.pgm`` gets an 8-bit preview of a [0, 1] image, anything else the exact float matrix."""
    if path.lower().endswith(".pgm"):
        imaging.write_pgm8(path, img)
    else:
        write_matrix(path, img)


def write_labels(path, labels):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(str(int(v)) for v in labels) + "\n")


def read_labels(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return np.array([int(ln) for ln in fh if ln.strip()], dtype=np.int64)
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from None


# --- config flags -------------------------------------------------------------

def add_config_args(p):
    g = p.add_argument_group("pipeline configuration")
    g.add_argument("--preset", choices=("full", "desk"), default="full",
                   help="full: 64x64 SFIs, 500-unit fc1, published schedules; desk: small and fast")
    g.add_argument("--sfi-size", type=int)
    g.add_argument("--sfi-segments", type=int)
    g.add_argument("--motion-threshold", type=float)
    g.add_argument("--hidden", type=int, help="fc1 width of every branch")
    g.add_argument("--ccf-lambda", type=float)
    g.add_argument("--ccf-dim", type=int)
    g.add_argument("--svm-c", type=float)
    g.add_argument("--svm-epochs", type=int)
    t = p.add_argument_group("training schedule (applied to every branch)")
    t.add_argument("--momentum", type=float)
    t.add_argument("--initial-lr", type=float)
    t.add_argument("--lr-drop-factor", type=float)
    t.add_argument("--lr-drop-period", type=int)
    t.add_argument("--l2", type=float)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--minibatch", type=int)
    s = p.add_argument_group("evaluation splits")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--train-fraction", type=float, default=0.8)


def config_from_args(args):
    cfg = pipeline.PipelineConfig.desk() if args.preset == "desk" else pipeline.PipelineConfig()
    for name in ("sfi_size", "sfi_segments", "motion_threshold", "ccf_lambda", "ccf_dim", "svm_c", "svm_epochs"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "hidden", None) is not None:
        cfg.signal_hidden = cfg.depth_hidden = args.hidden
    overrides = {f: getattr(args, f) for f in TRAIN_FIELDS if getattr(args, f, None) is not None}
    if overrides:
        cfg.signal_train = dataclasses.replace(cfg.signal_train, **overrides)
        cfg.depth_train = dataclasses.replace(cfg.depth_train, **overrides)
    cfg.split = dataset.SplitSpec(args.train_fraction, args.repeats, args.seed)
    return cfg


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args):
    ds = dataset.synth_dataset(4, args.samples_per_class, args.noise, args.seed)
    path = dataset.write_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples ({ds.classes} classes) to {path}")


def cmd_encode_signal(args):
    seq = imaging.read_inertial_csv(args.input)
    os.makedirs(args.out, exist_ok=True)
    images = imaging.signal_windows(seq, args.stride)
    for k, img in enumerate(images):
        write_matrix(os.path.join(args.out, f"signal_{k:03d}.m2fm"), img)
        imaging.write_pgm8(os.path.join(args.out, f"signal_{k:03d}.pgm"), img)
    print(f"wrote {len(images)} signal images of shape {images.shape[1]}x{images.shape[2]} to {args.out}")


def cmd_encode_sfi(args):
    frames = imaging.read_depth_dir(args.input)
    sfis = imaging.make_sfi(frames, args.segments, args.motion_threshold)
    os.makedirs(args.out, exist_ok=True)
    for k, img in enumerate(sfis):
        if args.size:
            img = np.clip(bicubic_resize(img, args.size, args.size), 0.0, 1.0)
        write_matrix(os.path.join(args.out, f"sfi_{k + 1}.m2fm"), img)
        imaging.write_pgm8(os.path.join(args.out, f"sfi_{k + 1}.pgm"), img)
    print(f"wrote {len(sfis)} SFIs to {args.out}")


def cmd_prewitt(args):
    out = imaging.prewitt(load_image(args.input))
    if args.rescale or args.out.lower().endswith(".pgm"):
        out = imaging.rescale01(out)
    save_image(args.out, out)


def cmd_composite(args):
    base = load_image(args.base)
    filtered = load_image(args.filtered)
    if args.rescale:
        base, filtered = imaging.rescale01(base), imaging.rescale01(filtered)
    rgb = imaging.composite(base, filtered).channels_last()
    if args.out.lower().endswith(".ppm"):
        imaging.write_ppm8(args.out, rgb)
    else:
        np.save(args.out, rgb)


def _encoded(args, cfg):
    ds = dataset.load_dataset(args.manifest)
    return ds, pipeline.encode(ds, cfg)


def cmd_train_cnn(args):
    cfg = config_from_args(args)
    ds, enc = _encoded(args, cfg)
    images = pipeline.branch_images(args.branch, enc)
    model = pipeline.branch_model(args.branch, cfg, ds.classes, images.shape[1:])
    tc = pipeline.branch_train_config(args.branch, cfg, args.seed)
    log = []
    trained = cnn.train(model, images, enc.labels, tc, log)
    cnn.save_model(args.out, trained)
    if args.log:
        cnn.write_training_log(args.log, log)
    if log:
        print(f"final epoch: loss {log[-1]['train_loss']:.4f}, train accuracy {log[-1]['train_accuracy']:.3f}")


def cmd_extract(args):
    cfg = config_from_args(args)
    _, enc = _encoded(args, cfg)
    model = cnn.load_model(args.model)
    feats = cnn.extract_features(model, args.layer, pipeline.branch_images(args.branch, enc))
    write_matrix(args.out, feats.data)
    write_labels(args.labels_out or args.out + ".labels", enc.labels)
    print(f"{feats.dim} x {feats.samples} features from {feats.source_layer}")


def cmd_fit_ccf(args):
    x, y = read_matrix(args.x), read_matrix(args.y)
    if x.shape[0] != y.shape[0] and args.match_rows:
        x = pipeline.match_rows(x, y.shape[0])
    t = ccf.fit_cca(x, y, args.lam, args.dim)
    ccf.save_transform(args.out, t)
    if args.fused_out:
        write_matrix(args.fused_out, ccf.fuse_sum(*ccf.transform(t, x, y)))
    print("canonical correlations: " + " ".join(f"{c:.4f}" for c in t.correlations[:10]))


def cmd_train_svm(args):
    z = read_matrix(args.features)
    labels = read_labels(args.labels)
    m = classify.train_svm(z, labels, args.c, args.epochs, args.seed)
    classify.save_svm(args.out, m)
    acc = float(np.mean(classify.predict(m, z) == labels))
    print(f"{m.classes} classes, {m.dim} features, training accuracy {acc:.3f}")


def cmd_run(args):
    cfg = config_from_args(args)
    ds = dataset.load_dataset(args.manifest)
    cache = pipeline.ExtractorCache(args.cache_dir) if args.cache_dir else None

    def progress(r, res):
        if not args.quiet:
            print(f"repeat {r}: accuracy {np.mean(res.y_true == res.y_pred):.4f}", flush=True)

    report = pipeline.run_framework(args.framework, ds, cfg, cache, progress=progress)
    json_path, csv_path = pipeline.write_report(report, args.out_dir)
    print(summary(report))
    print(f"report: {json_path}\nconfusion: {csv_path}")


def summary(report):
    lines = [
        f"framework: {report.framework}",
        f"mean accuracy: {report.mean_accuracy:.4f} over {len(report.repeat_accuracies)} repeats",
    ]
    for name, acc in report.modality_mean_accuracies.items():
        lines.append(f"{name} only: {acc:.4f}")
    lines.append(f"extractor calls per sample: {report.extractor_calls_per_sample}")
    lines.append(f"inference time per sample: {report.inference_us:.1f} us")
    return "\n".join(lines)


def cmd_report(args):
    with open(args.report, encoding="utf-8") as fh:
        try:
            report = pipeline.RunReport.from_json(fh.read())
        except (json.JSONDecodeError, TypeError) as exc:
            raise InputError(f"{args.report}: not a run report ({exc})") from None
    print(summary(report))
    if args.confusion:
        names = report.class_names or [str(k) for k in range(report.classes)]
        width = max(len(n) for n in names) + 1
        print("confusion (rows: true, columns: predicted)")
        for name, row in zip(names, report.confusion):
            print(name.ljust(width) + " ".join(f"{v:5d}" for v in row))


def build_parser():
    p = argparse.ArgumentParser(prog="m2fusion", description="Multilevel depth + inertial fusion for action recognition")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic two-bit dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--samples-per-class", type=int, default=50)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("encode-signal", help="inertial CSV -> signal images")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=imaging.WINDOW_STRIDE)
    s.set_defaults(func=cmd_encode_signal)

    s = sub.add_parser("encode-sfi", help="depth frame directory -> SFIs")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--segments", type=int, default=5)
    s.add_argument("--motion-threshold", type=float, default=10.0)
    s.add_argument("--size", type=int, default=0, help="bicubic resize to size x size (0 keeps the frame size)")
    s.set_defaults(func=cmd_encode_sfi)

    s = sub.add_parser("prewitt", help="Prewitt-filter an image (.m2fm or .pgm)")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--rescale", action="store_true", help="min-max rescale the response to [0, 1]")
    s.set_defaults(func=cmd_prewitt)

    s = sub.add_parser("composite", help="green-magenta composite of an image and its filtered version")
    s.add_argument("base")
    s.add_argument("filtered")
    s.add_argument("--out", required=True, help=".ppm preview or .npy array")
    s.add_argument("--rescale", action="store_true")
    s.set_defaults(func=cmd_composite)

    branches = ("si", "si_prewitt", "composite", "sfi", "sfi_prewitt")
    s = sub.add_parser("train-cnn", help="train one branch extractor on every sample of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--branch", choices=branches, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="per-epoch CSV log")
    add_config_args(s)
    s.set_defaults(func=cmd_train_cnn)

    s = sub.add_parser("extract", help="tap a layer of a trained extractor")
    s.add_argument("--manifest", required=True)
    s.add_argument("--branch", choices=branches, required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--layer", default=pipeline.FEATURE_LAYER)
    s.add_argument("--out", required=True)
    s.add_argument("--labels-out")
    add_config_args(s)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("fit-ccf", help="fit CCA on two feature matrices")
    s.add_argument("x")
    s.add_argument("y")
    s.add_argument("--out", required=True)
    s.add_argument("--lam", type=float)
    s.add_argument("--dim", type=int)
    s.add_argument("--match-rows", action="store_true", help="bicubic-resize x to y's row count")
    s.add_argument("--fused-out")
    s.set_defaults(func=cmd_fit_ccf)

    s = sub.add_parser("train-svm", help="one-vs-all linear SVM on a feature matrix")
    s.add_argument("features")
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--c", type=float, default=1.0)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_svm)

    s = sub.add_parser("run", help="repeated 80/20 evaluation of one framework")
    s.add_argument("--framework", choices=pipeline.FRAMEWORKS, required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", default=".")
    s.add_argument("--cache-dir", help="reuse trained extractors across runs")
    s.add_argument("--quiet", action="store_true")
    add_config_args(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="summarize a saved run report")
    s.add_argument("report")
    s.add_argument("--confusion", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

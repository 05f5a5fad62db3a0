"""Command line driver for the whole pipeline.

Subcommands cover the workflow end to end: build/split manifests,
augment images, train, evaluate, classify single images, serve over
HTTP, watch a directory, visualize activations and filters, benchmark,
and inspect weight files.

Exit codes: 0 success, 1 usage error, 2 data or IO error, 3 numeric
failure (training diverged).
"""

import argparse
import json
import os
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import backend, dataset, imaging, metrics, service, viz
from .errors import DcdmError, NumericError
from .layers import OptimizerConfig
from .model import (
    TrainConfig,
    build_dcdm,
    fingerprint_weights,
    load_weights,
    save_weights,
    train_model,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flag values discovered after argparse."""


def _parse_ratio(text: str) -> float:
    parts = text.split(":")
    try:
        left, right = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--ratio wants A:B like 80:20, got {text!r}") from None
    if left <= 0 or right <= 0 or left + right != 100:
        raise UsageError(f"--ratio parts must be positive and sum to 100, got {text!r}")
    return left / 100.0


def _parse_hw(text: str) -> tuple:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--input-hw wants HxW like 272x363, got {text!r}") from None
    return h, w


def _parse_addr(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"--addr wants HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _manifest_root(manifest_path) -> Path:
    # record paths are kept relative to the manifest's directory
    return Path(manifest_path).resolve().parent


def cmd_split(args) -> int:
    fraction = _parse_ratio(args.ratio)
    if args.root:
        manifest = dataset.build_manifest(args.root)
        out_path = args.out or args.manifest or str(Path(args.root) / "manifest.csv")
    elif args.manifest:
        manifest = dataset.load_manifest(args.manifest)
        out_path = args.out or args.manifest
    else:
        raise UsageError("split needs --manifest FILE or --root DIR")
    result = dataset.split(manifest, fraction, seed=args.seed,
                           group_aware=args.group_aware)
    dataset.save_manifest(result, out_path)
    counts = result.counts()
    print(f"wrote {out_path}: train={counts.get('train', 0)} "
          f"test={counts.get('test', 0)}"
          + (f" skipped={result.skipped}" if result.skipped else ""))
    return EXIT_OK


def cmd_augment(args) -> int:
    ops = [op.strip() for op in args.ops.split(",") if op.strip()]
    unknown = [op for op in ops if op not in imaging.AUGMENT_OPS]
    if not ops or unknown:
        raise UsageError(
            f"--ops wants names from {', '.join(imaging.AUGMENT_OPS)}"
            + (f"; unknown: {', '.join(unknown)}" if unknown else ""))
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise UsageError(f"--in directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = sorted(p for p in in_dir.iterdir() if p.is_file())
    written = 0
    for i, src in enumerate(sources):
        img = imaging.decode_image(src.read_bytes())
        for j in range(args.per_image):
            op = ops[j % len(ops)]
            sub_seed = int(np.random.SeedSequence(
                [args.seed, i, j]).generate_state(1)[0])
            spec = imaging.AugmentSpec(op=op, seed=sub_seed)
            out = imaging.augment(img, spec)
            name = f"{src.stem}_aug{j:02d}_{op}.png"
            (out_dir / name).write_bytes(imaging.encode_png(out))
            written += 1
    print(f"augmented {len(sources)} images into {written} files under {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = dataset.load_manifest(args.manifest)
    root = _manifest_root(args.manifest)
    hw = _parse_hw(args.input_hw)
    if args.classes is not None:
        num_classes = args.classes
    else:
        num_classes = max(rec.class_index for rec in manifest.records) + 1
    if num_classes < 2:
        raise UsageError(f"need at least 2 classes, got {num_classes}")
    x, y = dataset.load_images(manifest, root, "train", hw)
    has_test = any(rec.split == "test" for rec in manifest.records)
    x_val = y_val = None
    if has_test:
        x_val, y_val = dataset.load_images(manifest, root, "test", hw)

    # class indices are canonical table positions, so any head no wider
    # than the table can take its slugs as labels
    labels = None
    if num_classes <= len(dataset.class_table()):
        labels = dataset.class_slugs()[:num_classes]
    model = build_dcdm(num_classes, hw, seed=args.seed, labels=labels)
    kind = "adam" if args.optimizer == "adam" else "sgd_momentum"
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        optimizer=OptimizerConfig(kind=kind, lr=args.lr),
        checkpoint_dir=str(Path(args.out).resolve().parent),
        checkpoint_every=args.checkpoint_every,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    history = train_model(model, x, y, config, x_val, y_val)
    fingerprint = save_weights(model, args.out)
    if args.history:
        viz.export_curves(history, args.history)
    last = history[-1]
    line = f"trained {len(history)} epochs: loss={last['loss']:.4f} " \
           f"train_acc={last['train_acc']:.4f}"
    if "val_acc" in last:
        line += f" val_acc={last['val_acc']:.4f}"
    print(line)
    print(f"fingerprint {fingerprint}")
    return EXIT_OK


def _predict_in_chunks(model, x, chunk: int = 16) -> np.ndarray:
    preds = []
    for start in range(0, x.shape[0], chunk):
        pred, _ = model.predict(x[start : start + chunk])
        preds.append(pred)
    return np.concatenate(preds)


def cmd_eval(args) -> int:
    model = load_weights(args.model)
    manifest = dataset.load_manifest(args.manifest)
    root = _manifest_root(args.manifest)
    x, y = dataset.load_images(manifest, root, args.split, model.input_hw)
    pred = _predict_in_chunks(model, x)
    cm = metrics.ConfusionMatrix(model.num_classes)
    cm.update_batch(y, pred)
    report = metrics.compute(cm)
    Path(args.report).write_bytes(
        metrics.render_report(report, "json", labels=model.labels))
    if args.confusion:
        img = viz.render_confusion(cm, labels=model.labels)
        Path(args.confusion).write_bytes(imaging.encode_png(img))
    print(metrics.render_report(report, "text", labels=model.labels).decode(),
          end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    bundle = service.load_bundle(args.model)
    payload = Path(args.image).read_bytes()
    response = service.classify_bytes(bundle, payload, top_k=args.top_k)
    print(json.dumps(response, indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    host, port = _parse_addr(args.addr)
    config = service.ServiceConfig(
        host=host, port=port, model_path=args.model, workers=args.threads)
    service.serve(config)
    return EXIT_OK


def cmd_watch(args) -> int:
    bundle = service.load_bundle(args.model)
    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda s, f: stop.set())
    try:
        service.watch_stream(
            bundle, args.dir, poll_s=args.poll, output=args.out,
            max_frames=args.max_frames, stop_event=stop)
    finally:
        signal.signal(signal.SIGINT, previous)
    return EXIT_OK


def _as_rgb(grid: np.ndarray) -> np.ndarray:
    return grid if grid.ndim == 3 else np.repeat(grid[:, :, None], 3, axis=2)


def cmd_viz(args) -> int:
    model = load_weights(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = [args.layer] if args.layer else list(range(1, 7))
    if args.what == "features":
        if not args.image:
            raise UsageError("viz features needs --image FILE")
        img = imaging.decode_image(Path(args.image).read_bytes())
        x = imaging.to_tensor(imaging.register(img, model.input_hw))
        grids = viz.extract_feature_maps(model, x, stages=stages)
        for stage, grid in sorted(grids.items()):
            path = out_dir / f"features_stage{stage}.png"
            path.write_bytes(imaging.encode_png(_as_rgb(grid)))
            print(f"wrote {path}")
    else:
        for stage in stages:
            grid = viz.visualize_filters(model, stage)
            path = out_dir / f"filters_stage{stage}.png"
            path.write_bytes(imaging.encode_png(_as_rgb(grid)))
            print(f"wrote {path}")
    return EXIT_OK


def bench_forward(model, iters: int = 50, warmup: int = 2, seed: int = 0) -> dict:
    """Single-image forward latency stats at the current thread count."""
    rng = np.random.default_rng(seed)
    x = rng.random((1,) + model.input_shape, dtype=np.float32)
    for _ in range(warmup):
        model.predict(x)
    times = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        model.predict(x)
        times[i] = (time.perf_counter() - t0) * 1000.0
    return {
        "iters": iters,
        "threads": backend.get_num_threads(),
        "backend": backend.active_backend(),
        "latency_ms_mean": float(times.mean()),
        "latency_ms_p50": float(np.percentile(times, 50)),
        "latency_ms_p95": float(np.percentile(times, 95)),
        "throughput_img_s": float(1000.0 * iters / times.sum()),
        "reference_latency_ms": service.REFERENCE_LATENCY_MS,
    }


def cmd_bench(args) -> int:
    if args.threads is not None:
        backend.set_num_threads(args.threads)
    model = load_weights(args.model) if args.model else build_dcdm()
    stats = bench_forward(model, iters=args.iters, seed=args.seed)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.model:
        model = load_weights(args.model)
    else:
        model = build_dcdm(init=False)
    for kind, shape in model.stage_shapes():
        print(f"{kind:10s} {'x'.join(str(d) for d in shape)}")
    count = model.param_count() if args.model else model.spec_param_count()
    print(f"param_count {count}")
    if args.model:
        print(f"fingerprint {fingerprint_weights(args.model)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcdm",
        description="Train, evaluate and serve the leaf-disease classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="assign manifest records to train/test")
    p.add_argument("--manifest", help="manifest CSV to split in place")
    p.add_argument("--root", help="scan a class-per-directory tree instead")
    p.add_argument("--ratio", required=True,
                   help="train:test percentages (80:20, 70:30, 60:40)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group-aware", action="store_true",
                   help="keep same-group records on one side of the split")
    p.add_argument("--out", help="write here instead of over the input")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="write augmented copies of a directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--ops", required=True,
                   help="comma-separated op names, cycled per copy")
    p.add_argument("--per-image", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train from a split manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.dcdm")
    p.add_argument("--history", help="write per-epoch curves CSV here")
    p.add_argument("--input-hw", default="272x363")
    p.add_argument("--classes", type=int,
                   help="class count (default: inferred from the manifest)")
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix and metrics report")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="metrics JSON output path")
    p.add_argument("--confusion", help="confusion heatmap PNG output path")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one image file")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--model", required=True)
    p.add_argument("--addr", default="127.0.0.1:8000")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("watch", help="classify files appearing in a directory")
    p.add_argument("--model", required=True)
    p.add_argument("--dir", required=True)
    p.add_argument("--poll", type=float, default=0.5)
    p.add_argument("--out", help="results JSON Lines path (default stdout)")
    p.add_argument("--max-frames", type=int)
    p.set_defaults(func=cmd_watch)

    p = sub.add_parser("viz", help="export feature-map or filter grids")
    p.add_argument("what", choices=["features", "filters"])
    p.add_argument("--model", required=True)
    p.add_argument("--image", help="input image (features mode)")
    p.add_argument("--layer", type=int, help="conv stage 1..6 (default all)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("bench", help="forward-pass latency statistics")
    p.add_argument("--model", help="weight file (default: fresh full-size build)")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print stage shapes and parameter count")
    p.add_argument("--model", help="weight file (default: fresh full-size build)")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    env_threads = os.environ.get("DCDM_THREADS")
    if env_threads:
        try:
            backend.set_num_threads(int(env_threads))
        except ValueError:
            print(f"DCDM_THREADS={env_threads!r} is not an integer",
                  file=sys.stderr)
            return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DcdmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


run_cli = main

if __name__ == "__main__":
    sys.exit(main())

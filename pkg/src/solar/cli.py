"""Command-line interface.

Exit status: 0 on success, 1 on a validation or usage error, 2 on an I/O error.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings

import numpy as np
import torch

from .backbones import DEFAULT_SCALES, BackboneSpec, DescriptorModel, extract_descriptors, transfer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config, load_config
from .errors import ValidationError
from .evaluation import PROTOCOLS, load_ground_truth, p_sweep, query_images, rank_database, score
from .fileio import atomic_write
from .heatmap import HeatmapRequest, attention_row, normalize_map, upscale
from .imageio import encode_pnm, read_image
from .store import read_store, store_matrix, write_store
from .synthetic import generate_synthetic_benchmark, load_benchmark, save_benchmark
from .training import ImageSet, train

log = logging.getLogger("solar")

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")


class UsageError(ValidationError):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for I/O here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _scales(text):
    if text == "default":
        return list(DEFAULT_SCALES)
    return _floats(text)


def _image_paths(paths):
    out = []
    for path in paths:
        if os.path.isdir(path):
            out += sorted(os.path.join(path, f) for f in os.listdir(path)
                          if f.lower().endswith(IMAGE_SUFFIXES))
        else:
            out.append(path)
    if not out:
        raise ValidationError("no input images found")
    return out


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _split(bench, split):
    if split == "train":
        return bench.train_images, bench.train_ids
    if split == "query":
        return bench.query_images, bench.query_ids
    return bench.db_images, bench.db_ids


# subcommands ---------------------------------------------------------------

def cmd_synth(args):
    bench = generate_synthetic_benchmark(args.classes, args.per_class, args.size, args.seed)
    save_benchmark(bench, args.out)
    print(f"wrote {len(bench.train_ids)} train, {len(bench.query_ids)} query and "
          f"{len(bench.db_ids)} database images to {args.out}")


def cmd_train(args):
    cfg = load_config(args.config, args.set + [f"seed={args.seed}"])
    bench = load_benchmark(args.data)
    spec = BackboneSpec(args.backbone, tuple(args.insertions), seed=args.seed)
    if args.init:
        base, _, _ = load_checkpoint(args.init)
        model = transfer(base, BackboneSpec(base.spec.kind, tuple(args.insertions), base.spec.widths,
                                            base.spec.in_channels, base.spec.reduction,
                                            base.spec.min_size, base.spec.seed))
    else:
        model = DescriptorModel(spec)
    os.makedirs(args.out, exist_ok=True)
    atomic_write(os.path.join(args.out, "config.txt"), dump_config(cfg), "w")
    data = ImageSet(bench.train_images, bench.train_labels, bench.train_ids)
    model, report = train(model, data, cfg, checkpoint_dir=args.out, resume=not args.fresh,
                          on_epoch=lambda s: print(
                              f"epoch {s.epoch:3d}  loss {s.loss:.5f}  fos {s.fos:.5f}  "
                              f"sos {s.sos:.5f}  val {s.val_loss:.5f}  p {s.p:.3f}", flush=True))
    save_checkpoint(os.path.join(args.out, "model.ckpt"), model, {"epochs": len(report.epochs)})
    if args.plot and report.epochs:
        from .plotting import plot_training
        plot_training(report, os.path.join(args.out, "training.png"))
    print(f"best model written to {os.path.join(args.out, 'model.ckpt')}")


def cmd_extract(args):
    model, _, _ = load_checkpoint(args.model)
    if args.data:
        bench = load_benchmark(args.data)
        images, names = _split(bench, args.split)
        gt = bench.gt
    else:
        paths = _image_paths(args.images)
        images, names = [read_image(p) for p in paths], [_stem(p) for p in paths]
        gt = load_ground_truth(args.gt) if args.gt else None
    if args.bbox_crop:
        if gt is None:
            raise ValidationError("--bbox-crop needs ground truth (--gt or --data)")
        images = query_images(images, names, gt)
    vecs = extract_descriptors(list(images), model, args.scales)
    write_store(args.out, list(zip(names, vecs)))
    print(f"wrote {len(names)} descriptors of dimension {vecs.shape[1]} to {args.out}")


def _report(metrics, k):
    lines = [f"{'protocol':<10}{'mAP':>10}{f'mP@{k}':>10}"]
    for proto, vals in metrics.items():
        lines.append(f"{proto:<10}{100 * vals['mAP']:>10.2f}{100 * vals[f'mP@{k}']:>10.2f}")
    return "\n".join(lines)


def cmd_evaluate(args):
    q_names, q = store_matrix(read_store(args.queries))
    d_names, d = store_matrix(read_store(args.database))
    gt = load_ground_truth(args.gt)
    known = set(gt.query_ids)
    keep = [i for i, n in enumerate(q_names) if n in known]
    if not keep:
        raise ValidationError("no query in the store appears in the ground truth")
    results = rank_database(q[keep], [q_names[i] for i in keep], d, d_names)
    protocols = args.protocol or list(PROTOCOLS)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        metrics = score(results, gt, protocols, args.k)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(_report(metrics, args.k))
    records = "".join(json.dumps({"protocol": p, "metric": m, "value": v}) + "\n"
                      for p, vals in metrics.items() for m, v in vals.items())
    if args.records == "-":
        print("---")
        sys.stdout.write(records)
    elif args.records:
        atomic_write(args.records, records, "w")


def cmd_ablate_p(args):
    model, _, _ = load_checkpoint(args.model)
    bench = load_benchmark(args.data)
    queries = query_images(bench.query_images, bench.query_ids, bench.gt)
    protocols = args.protocol or list(PROTOCOLS)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sweep = p_sweep(model, queries, bench.query_ids, bench.db_images, bench.db_ids, bench.gt,
                        args.values, protocols=protocols)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["p"] + [f"mAP_{p}" for p in protocols])
    for p, maps in sweep.rows:
        writer.writerow([f"{p:g}"] + [f"{maps[proto]:.6f}" for proto in protocols])
    if args.out:
        atomic_write(args.out, buf.getvalue(), "w")
    else:
        sys.stdout.write(buf.getvalue())
    print(f"learned p = {sweep.learned_p:.4f}", file=sys.stderr if not args.out else sys.stdout)
    if args.plot:
        from .plotting import plot_p_sweep
        plot_p_sweep(sweep, args.plot, protocols)


def cmd_attn_export(args):
    model, _, _ = load_checkpoint(args.model)
    image = read_image(args.image)
    req = HeatmapRequest(_stem(args.image), args.x, args.y, args.insertion)
    row, (i, j), stride = attention_row(model, image, req)
    heat = upscale(normalize_map(row), image.shape[0], image.shape[1], stride)
    atomic_write(args.out, encode_pnm(heat))
    print(f"attention row of cell ({i}, {j}) at insertion {args.insertion}: "
          f"{row.shape[0]}x{row.shape[1]} map, min {row.min():.4g}, max {row.max():.4g}")
    if args.plot:
        from .plotting import plot_heatmap
        plot_heatmap(image, heat, (args.x, args.y), args.plot)


def cmd_verify(args):
    from .verify import run_checks

    failed = 0
    for name, passed, detail, secs in run_checks(args.seed):
        failed += not passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<18} {detail}  ({secs:.2f}s)", flush=True)
    if failed:
        raise ValidationError(f"{failed} check(s) failed")


def build_parser():
    parser = Parser(prog="solar", description="Second-order global descriptors: train, extract, evaluate.")
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed (default 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="write a synthetic retrieval benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="triplet training with hard-negative mining")
    p.add_argument("--data", required=True, help="benchmark directory (synth layout)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--backbone", choices=("toy_fcn", "l2net"), default="toy_fcn")
    p.add_argument("--insertions", type=_ints, default=[], help="SOA insertion points, e.g. 4,5")
    p.add_argument("--init", help="start from this checkpoint (SOA blocks added at identity)")
    p.add_argument("--fresh", action="store_true", help="ignore last.ckpt in --out")
    p.add_argument("--plot", action="store_true", help="also write training.png")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("extract", help="images -> descriptor store")
    p.add_argument("images", nargs="*", help="image files or directories")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="benchmark directory instead of image paths")
    p.add_argument("--split", choices=("train", "query", "db"), default="db")
    p.add_argument("--gt", help="ground truth JSON (for --bbox-crop)")
    p.add_argument("--scales", type=_scales, default=[1.0],
                   help="comma-separated scales or 'default' (1, sqrt 2, 1/sqrt 2)")
    p.add_argument("--bbox-crop", action="store_true", help="crop queries to their boxes")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("evaluate", help="rank a database store and score it")
    p.add_argument("--queries", required=True)
    p.add_argument("--database", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", action="append", choices=PROTOCOLS)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--records", help="JSONL output path, '-' for stdout")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate-p", help="mAP as a function of the GeM exponent")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--values", type=_floats, default=[1, 2, 3, 5, 10, 20, 50, 100])
    p.add_argument("--protocol", action="append", choices=PROTOCOLS)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.add_argument("--plot", help="PNG path for the curve")
    p.set_defaults(fn=cmd_ablate_p)

    p = sub.add_parser("attn-export", help="attention heatmap of one location")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--x", type=int, required=True)
    p.add_argument("--y", type=int, required=True)
    p.add_argument("--insertion", type=int, required=True)
    p.add_argument("--out", required=True, help="PGM path")
    p.add_argument("--plot", help="PNG overlay path")
    p.set_defaults(fn=cmd_attn_export)

    p = sub.add_parser("verify", help="run the oracle self-checks")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    try:
        args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

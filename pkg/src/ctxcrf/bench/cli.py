"""Command-line entry point: ``python -m ctxcrf <command> ...``."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from ..infer import predict, write_scores
from . import imageio
from .ablate import run_ladder, write_ladder_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .experiment import train_model
from .metrics import compute_dataset_metrics, csv_header, write_metrics_csv
from .suites import gradient_suite, oracle_compare
from .synthetic import gen_dataset, load_dataset, load_manifest, to_chw, write_dataset


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    manifest = write_dataset(cfg.data(), args.out, ext=args.format)
    _log(f"wrote {cfg.count} samples, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = load_dataset(args.data)
    if not data.train:
        _log(f"{args.data}: no training samples")
        return 1

    def report(epoch, row):
        _log(f"epoch {epoch}: total loss {row[-1]:.4f}")

    model, history = train_model(cfg, data.train, on_epoch=report if args.verbose else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model, cfg)
    history.write_csv(out / "loss.csv")
    (out / "config.txt").write_text(cfg.to_text())
    _log(f"wrote {out / 'model.ckpt'} and {out / 'loss.csv'}")
    return 0


def _input_images(path: Path) -> list[tuple[str, np.ndarray]]:
    """(stem, [3,H,W] image) pairs from a manifest, a dataset dir, an image dir or one image."""
    if path.is_dir() and (path / "manifest.txt").exists():
        path = path / "manifest.txt"
    if path.suffix == ".txt":
        rows = [r for r in load_manifest(path) if r[2] == "test"] or load_manifest(path)
        files = [r[0] for r in rows]
    elif path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".ppm", ".png"))
    else:
        files = [path]
    return [(f.stem, to_chw(imageio.read_rgb(f))) for f in files]


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stem, image in _input_images(Path(args.input)):
        pred = predict(model, image, cfg.refinement(), cfg.mf_iterations)
        imageio.write_gray(out / f"{stem}.pgm", pred.final.astype(np.uint8))
        imageio.write_gray(out / f"{stem}.coarse.pgm", pred.coarse.astype(np.uint8))
        if args.scores:
            write_scores(out / f"{stem}.scores", pred.scores)
    return 0


def _label_files(path: Path) -> dict[str, Path]:
    if path.is_dir():
        return {p.stem: p for p in sorted(path.iterdir()) if p.suffix in (".pgm", ".png") and ".coarse" not in p.name}
    return {path.stem: path}


def cmd_eval(args) -> int:
    preds = _label_files(Path(args.pred))
    truths = _label_files(Path(args.truth))
    if len(preds) == 1 and len(truths) == 1:
        pairs = [(next(iter(preds.values())), next(iter(truths.values())))]
    else:
        missing = sorted(set(truths) - set(preds))
        if missing:
            _log(f"no prediction for {len(missing)} truth maps (first: {missing[0]})")
            return 1
        pairs = [(preds[k], truths[k]) for k in sorted(truths)]
    try:
        report = compute_dataset_metrics(
            ((imageio.read_gray(p), imageio.read_gray(t)) for p, t in pairs), args.num_classes
        )
    except ValueError as exc:
        _log(f"eval: {exc}")
        return 1
    if args.out:
        write_metrics_csv(args.out, report)
    else:
        wr = csv.writer(sys.stdout, lineterminator="\n")
        wr.writerow(csv_header(args.num_classes))
        wr.writerow(report.row())
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.data:
        data = load_dataset(args.data)
    else:
        data = gen_dataset(cfg.data())

    def report(r):
        _log(f"{r.name:12s} mean IoU {r.metrics.iou:.4f}  (changed: {r.changed or '-'})")

    rungs = run_ladder(cfg, data.train, data.test, on_rung=report)
    write_ladder_csv(args.out, rungs)
    return 0


def cmd_check_grad(args) -> int:
    results = gradient_suite(args.seed, args.seeds)
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:16s} worst rel. err {r.worst:.3e} (< {r.tolerance:g})")
        ok &= r.passed
    return 0 if ok else 1


def cmd_oracle_compare(args) -> int:
    rows = oracle_compare(args.seed, args.instances, args.height, args.width, args.num_classes, args.iterations)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["pairwise_scale", "mean_max_abs_error", "max_abs_error"])
        for r in rows:
            wr.writerow([f"{r.scale:g}", f"{r.mean_error:.6e}", f"{r.max_error:.6e}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxcrf", description="Structured segmentation with CNN pairwise potentials.")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="write the synthetic contextual dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--format", choices=("ppm", "png"), default="ppm")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train potentials piecewise; writes a checkpoint and loss CSV")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write label maps for images")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="image, image directory, dataset directory or manifest")
    pr.add_argument("--out", required=True)
    pr.add_argument("--config")
    pr.add_argument("--scores", action="store_true", help="also dump upsampled score maps")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="metrics CSV for predicted vs ground-truth label maps")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--num-classes", type=int, default=5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the component ladder; writes a CSV with one row per rung")
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--data", help="dataset directory (default: generate from the config)")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("check-grad", help="finite-difference gradient suites")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=10)
    c.set_defaults(func=cmd_check_grad)

    o = sub.add_parser("oracle-compare", help="mean-field vs exact marginal error per coupling scale")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--instances", type=int, default=20)
    o.add_argument("--height", type=int, default=3)
    o.add_argument("--width", type=int, default=3)
    o.add_argument("--num-classes", type=int, default=3)
    o.add_argument("--iterations", type=int, default=10)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

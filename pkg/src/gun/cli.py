"""Experiment driver CLI.

Subcommands: gen-data, train, eval, trimap, bench, grad-check. Every
command writes its resolved config and a tool-version stamp next to its
outputs; reruns with identical inputs produce byte-identical non-timing
outputs. Exit code 0 means every requested output was written and every
internal check passed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import statistics
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__, autodiff, gum, net
from .config import (ExperimentConfig, config_to_dict, default_config,
                     dump_config, load_config)
from .data import (GENERATOR_ID, Corpus, generate_scene, read_pgm, read_tensor,
                   write_pgm, write_tensor)
from .errors import ConfigError, GunError, TrainingDivergedError
from .metrics import ConfusionMatrix, mean_iou, trimap_curve_dataset


def _fmt(x) -> str:
    return repr(float(x))


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stamp(out: Path, command: str, args: argparse.Namespace,
           cfg: Optional[ExperimentConfig]) -> None:
    arg_dict = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(args).items() if k != "func"}
    _write_json(out / "run_info.json",
                {"tool": "gun", "version": __version__, "command": command,
                 "args": arg_dict})
    _write_json(out / "resolved_config.json",
                config_to_dict(cfg) if cfg is not None else {"args": arg_dict})


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _split_counts(count: int, fractions: List[float]) -> List[int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} must sum to 1")
    base = [int(count * f) for f in fractions]
    remainders = [count * f - b for f, b in zip(fractions, base)]
    for _ in range(count - sum(base)):
        i = int(np.argmax(remainders))
        base[i] += 1
        remainders[i] = -1.0
    return base


def load_split(data_dir: Path, split: str) -> Corpus:
    manifest_path = Path(data_dir) / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"dataset manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    samples = manifest["splits"].get(split)
    if samples is None:
        raise ConfigError(f"split {split!r} not in manifest {manifest_path}")
    images, gts, seeds = [], [], []
    for entry in samples:
        images.append(read_tensor(Path(data_dir) / entry["image"]))
        gts.append(read_pgm(Path(data_dir) / entry["gt"]))
        seeds.append(entry["seed"])
    if not images:
        raise ConfigError(f"split {split!r} is empty")
    return Corpus(images=np.stack(images), gts=np.stack(gts), seeds=seeds)


def evaluate_dataset(corpus: Corpus, num_classes: int,
                     predict_fn: Callable[[np.ndarray], np.ndarray]) -> dict:
    """Confusion-based metrics of predict_fn over a corpus."""
    preds = predict_fn(corpus.images)
    conf = ConfusionMatrix(num_classes)
    for p, g in zip(preds, corpus.gts):
        conf.add(p, g)
    per_class, miou = mean_iou(conf)
    return {
        "miou": miou,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "evaluated_pixels": conf.evaluated_pixels,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(Path(args.out), args.force)
    fractions = [float(x) for x in args.split.split(",")]
    counts = _split_counts(args.count, fractions)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    splits: Dict[str, list] = {}
    idx = 0
    digest = hashlib.sha256()
    for split, n in zip(("train", "val", "test"), counts):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        entries = []
        for i in range(n):
            sample_seed = cfg.seed * 1_000_000 + idx
            image, gt = generate_scene(cfg.scene, sample_seed)
            img_rel = f"{split}/{i:05d}.img.gunt"
            gt_rel = f"{split}/{i:05d}.gt.pgm"
            write_tensor(out / img_rel, image)
            write_pgm(out / gt_rel, gt)
            digest.update((out / img_rel).read_bytes())
            digest.update((out / gt_rel).read_bytes())
            entries.append({"seed": sample_seed, "image": img_rel, "gt": gt_rel})
            idx += 1
        splits[split] = entries
        if n == 0:
            print(f"warning: split {split!r} is empty", file=sys.stderr)
    manifest = {
        "generator_version": GENERATOR_ID,
        "seed": cfg.seed,
        "scene": config_to_dict(cfg)["scene"],
        "splits": splits,
        "corpus_sha256": digest.hexdigest(),
    }
    _write_json(out / "manifest.json", manifest)
    _stamp(out, "gen-data", args, cfg)
    print(f"wrote {idx} samples to {out} (corpus {digest.hexdigest()[:12]})")
    return 0


def _write_history_csv(path: Path, history) -> None:
    lines = ["epoch,lr,train_loss,val_miou"]
    for h in history:
        lines.append(f"{h.epoch},{_fmt(h.lr)},{_fmt(h.train_loss)},{_fmt(h.val_miou)}")
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(Path(args.out), args.force)
    train_corpus = load_split(args.data, "train")
    val_corpus = load_split(args.data, "val")
    recipe = cfg.recipe
    if args.seed is not None:
        recipe.seed = args.seed
    try:
        result = net.train(cfg.model, recipe, train_corpus, val_corpus)
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    net.save_params(out / "params", result.params, result.state)
    _write_history_csv(out / "history.csv", result.history)
    _stamp(out, "train", args, cfg)
    final = result.history[-1]
    print(f"trained {recipe.epochs} epochs: loss {final.train_loss:.4f}, "
          f"val mIoU {final.val_miou:.4f}; params -> {out / 'params.bin'}")
    return 0


def _load_model(args, cfg: ExperimentConfig):
    params, state = net.load_params(args.params)
    net.check_params_match(cfg.model, params, state)
    return params, state


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(Path(args.out), args.force)
    corpus = load_split(args.data, args.split)
    params, state = _load_model(args, cfg)
    metrics = evaluate_dataset(
        corpus, cfg.model.num_classes,
        lambda images: net.predict(images, cfg.model, params, state))
    _write_json(out / "metrics.json", metrics)
    _stamp(out, "eval", args, cfg)
    print(f"{args.split} mIoU {metrics['miou']:.4f} "
          f"over {metrics['evaluated_pixels']} pixels -> {out / 'metrics.json'}")
    return 0


def cmd_trimap(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(Path(args.out), args.force)
    corpus = load_split(args.data, args.split)
    params, state = _load_model(args, cfg)
    radii = [float(r) for r in args.radii.split(",")] if args.radii else cfg.radii
    preds = net.predict(corpus.images, cfg.model, params, state)
    curve = trimap_curve_dataset(preds, corpus.gts, radii, cfg.model.num_classes)
    c = cfg.model.num_classes
    lines = ["radius,miou,evaluated_pixels," + ",".join(f"iou_{i}" for i in range(c))]
    for pt in curve.points:
        ious = ",".join("" if np.isnan(v) else _fmt(v) for v in pt.per_class)
        lines.append(f"{_fmt(pt.radius)},{_fmt(pt.miou)},{pt.evaluated_pixels},{ious}")
    (out / "trimap.csv").write_text("\n".join(lines) + "\n")
    for r in curve.skipped_radii:
        print(f"warning: radius {r} has an empty band, skipped", file=sys.stderr)
    _stamp(out, "trimap", args, cfg)
    print(f"wrote {len(curve.points)} trimap points -> {out / 'trimap.csv'}")
    return 0


def cmd_bench(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    interp = "nearest" if args.mode.endswith("nearest") else "bilinear"
    h_out, w_out, ratio = args.height, args.width, args.ratio
    if h_out % ratio or w_out % ratio:
        raise ConfigError(f"extents {h_out}x{w_out} must be divisible by ratio {ratio}")
    grid = gum.make_regular_grid(h_out // ratio, w_out // ratio, h_out, w_out)
    rng = np.random.default_rng(args.seed or 0)
    u = rng.standard_normal((1, args.channels, h_out // ratio, w_out // ratio))
    offsets = rng.uniform(-1.0, 1.0, size=(1, 2, h_out, w_out))

    def time_fn(fn) -> List[float]:
        for _ in range(3):
            fn()
        samples = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        return samples

    plain_times = time_fn(lambda: gum.plain_upsample_forward(u, grid, interp))
    guided_times = time_fn(lambda: gum.guided_sample_forward(u, grid, offsets, interp))
    mp = h_out * w_out / 1e6
    plain_med = statistics.median(plain_times)
    guided_med = statistics.median(guided_times)
    report = {
        "mode": interp,
        "h_out": h_out, "w_out": w_out, "channels": args.channels,
        "ratio": ratio, "reps": args.reps,
        "plain": {"median_s": plain_med, "megapixels_per_s": mp / plain_med,
                  "times_s": plain_times},
        "guided": {"median_s": guided_med, "megapixels_per_s": mp / guided_med,
                   "times_s": guided_times},
        "guided_over_plain": guided_med / plain_med,
    }
    _write_json(out / "bench.json", report)
    _stamp(out, "bench", args, None)
    print(f"{interp} {h_out}x{w_out}x{args.channels}: plain {mp / plain_med:.1f} MP/s, "
          f"guided {mp / guided_med:.1f} MP/s, ratio {guided_med / plain_med:.2f}x")
    return 0


def cmd_grad_check(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    rows = []
    ok = True
    if args.component in ("ops", "all"):
        for name, case in autodiff.gradcheck_cases(args.seed or 0).items():
            report = case()
            rows.append(("ops/" + name, report, 1e-4))
    if args.component in ("gum", "all"):
        for k in range(5):
            report = autodiff.gradcheck_cases((args.seed or 0) + k)["guided-bilinear"]()
            rows.append((f"gum/guided-bilinear-{k}", report, 1e-4))
    if args.component in ("pipeline", "all"):
        report = net.pipeline_fd_check(seed=args.seed or 0)
        rows.append(("pipeline/full-model", report, 1e-3))
    results = []
    print(f"{'case':38s} {'max rel err':>12s} {'checked':>8s} {'skipped':>8s}  verdict")
    for name, report, tol in rows:
        passed = report.ok and report.max_rel_error < tol
        ok = ok and passed
        print(f"{name:38s} {report.max_rel_error:12.3e} {report.checked:8d} "
              f"{len(report.skipped):8d}  {'pass' if passed else 'FAIL'}")
        results.append({"case": name, "max_rel_error": report.max_rel_error,
                        "checked": report.checked, "skipped": len(report.skipped),
                        "tolerance": tol, "pass": passed})
    _write_json(out / "gradcheck.json", results)
    _stamp(out, "grad-check", args, None)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gun",
        description="Guided upsampling experiments: data, training, evaluation, "
                    "boundary analysis, kernel benchmarks, gradient checks.")
    parser.add_argument("--version", action="version", version=f"gun {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", type=Path, help="experiment config JSON")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true",
                       help="reuse a non-empty output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--split", default="0.8,0.1,0.1",
                   help="train,val,test fractions summing to 1")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved params on a dataset split")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--params", type=Path, required=True,
                   help="params path prefix (…/params)")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trimap", help="boundary-band mIoU sweep")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--radii", default=None, help="comma list, e.g. 1,2,4,8")
    p.set_defaults(func=cmd_trimap)

    p = sub.add_parser("bench", help="plain vs guided sampling throughput")
    common(p, needs_config=False)
    p.add_argument("--mode", default="bilinear",
                   choices=("nearest", "bilinear", "gum-nearest", "gum-bilinear"))
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--channels", type=int, default=19)
    p.add_argument("--ratio", type=int, default=2)
    p.add_argument("--reps", type=int, default=20)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    common(p, needs_config=False)
    p.add_argument("--component", default="all",
                   choices=("ops", "gum", "pipeline", "all"))
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``vartext {gen-data,train,infer,eval,gradcheck,viz}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .estimator import ABLATIONS, image_score_maps, maps_to_detections
from .evalkit import evaluate
from .labelgen import CharScene
from .network import ModelConfig
from .postprocess import MIN_AREA, TAU_AFFINITY, TAU_REGION, DetectionSet
from .synthdata import (
    SceneSpec,
    load_annotation,
    load_corpus,
    load_image,
    resize_keep_aspect,
    word_quad,
    write_corpus,
)
from .tensor import Tensor, no_grad
from .train import FUSION_CSV_HEADER, TrainConfig, load_checkpoint, train_loop

logger = logging.getLogger("vartext")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class CliError(Exception):
    """Raised for user-facing failures; reported as JSON on stderr."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# -- helpers ------------------------------------------------------------------------

def _save_gray(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(255 * arr), 0, 255).astype(np.uint8), mode="L").save(path)


def _normalize(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    return (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)


def _list_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise CliError(f"no such image file or directory: {path}")
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _model_input(model, image: np.ndarray, long_side: int):
    scene, scale = resize_keep_aspect(CharScene(image, []), long_side)
    dtype = model.parameters()[0].data.dtype
    return Tensor(scene.image[None].astype(dtype), dtype=dtype), scale


def _echo(name: str, args: argparse.Namespace) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k != "func"}
    logger.info("%s config: %s", name, json.dumps(cfg, sort_keys=True))


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SceneSpec(seed=args.seed, canvas=(args.height, args.width))
    manifest = write_corpus(args.out, spec, args.count, start=args.start)
    print(json.dumps({"out": str(args.out), "count": manifest["count"], "seed": args.seed}))
    return 0


def cmd_train(args) -> int:
    scenes = load_corpus(args.corpus)
    tcfg = TrainConfig(lr0=args.lr, decay=args.decay, decay_every=args.decay_every,
                       batch_size=args.batch, max_iters=args.iters,
                       checkpoint_every=args.checkpoint_every, kl_weight=args.kl_weight,
                       seed=args.seed, long_side=args.long_side, augment=not args.no_augment)
    model = opt = None
    start = 0
    if args.resume:
        model, manifest, opt = load_checkpoint(args.resume)
        mcfg = ModelConfig(**manifest["config"])
        start = manifest["iteration"]
    else:
        mcfg = ModelConfig.for_ablation(args.ablation, width_mult=args.width_mult,
                                        num_bifpn=args.num_bifpn, min_width=args.min_width)
    logger.info("model config: %s", json.dumps(mcfg.to_dict(), sort_keys=True))
    logger.info("train config: %s", json.dumps(tcfg.to_dict(), sort_keys=True))

    def progress(it, rec, _model):
        if it % args.log_every == 0:
            logger.info("iter %d total %.4f recon %.4f kl %.4f lr %.2e", it, rec["total"],
                        rec["recon"], rec["kl"], rec["lr"])

    res = train_loop(scenes, mcfg, tcfg, out_dir=args.out, model=model, start_iter=start,
                     opt=opt, callback=progress)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"out": str(args.out), "iterations": start + args.iters,
                      "final_total": last.get("total"), "skipped": res.opt.skipped,
                      "seconds": res.seconds}))
    return 0


def cmd_infer(args) -> int:
    if not (0 < args.tau_r < 1 and 0 < args.tau_a < 1):
        raise CliError("--tau-r and --tau-a must lie in (0, 1)")
    if args.long_side % 32:
        raise CliError("--long-side must be divisible by 32")
    model, _, _ = load_checkpoint(args.checkpoint)
    paths = _list_images(Path(args.images))
    if args.dump_maps:
        Path(args.dump_maps).mkdir(parents=True, exist_ok=True)
    results, failed = [], []
    with no_grad():
        for path in paths:
            try:
                image = load_image(path)
            except Exception as exc:  # unreadable or corrupt file
                logger.warning("skipping %s: %s", path.name, exc)
                failed.append(path.name)
                continue
            maps = image_score_maps(model, image, args.long_side)
            dets = maps_to_detections(maps, image.shape[1:], args.long_side, args.tau_r,
                                      args.tau_a, args.min_area)
            results.append(dets.to_json(path.name))
            if args.dump_maps:
                stem = Path(args.dump_maps) / path.stem
                _save_gray(stem.with_name(stem.name + "_region.png"), maps[0])
                _save_gray(stem.with_name(stem.name + "_affinity.png"), maps[1])
    out = json.dumps(results, indent=1)
    if args.out:
        Path(args.out).write_text(out)
    else:
        print(out)
    if failed:
        print(json.dumps({"error": "unreadable images", "skipped": failed,
                          "processed": len(results)}), file=sys.stderr)
        return 1
    return 0


def _load_dets(path: Path) -> dict[str, list]:
    obj = json.loads(path.read_text())
    if isinstance(obj, dict):
        obj = [obj]
    return {entry["image"]: DetectionSet.from_json(entry).quads for entry in obj}


def _load_gts(path: Path) -> dict[str, list]:
    if path.is_dir():
        manifest = path / "manifest.json"
        if not manifest.exists():
            raise CliError(f"no manifest.json in {path}")
        entries = [load_annotation(path / f["annotation"])
                   for f in json.loads(manifest.read_text())["files"]]
    else:
        obj = json.loads(path.read_text())
        obj = [obj] if isinstance(obj, dict) else obj
        entries = [(e["image"], [[np.asarray(q, dtype=np.float64) for q in w] for w in e["words"]])
                   for e in obj]
    return {name: [word_quad(w) for w in words if len(w)] for name, words in entries}


def cmd_eval(args) -> int:
    dets = _load_dets(Path(args.dets))
    gts = _load_gts(Path(args.gts))
    extra = sorted(set(dets) - set(gts))
    if extra:
        raise CliError(f"detections for images without ground truth: {extra[:5]}")
    names = sorted(gts)
    report = evaluate([dets.get(n, []) for n in names], [gts[n] for n in names], args.iou)
    out = report.to_json()
    out["images"] = names
    print(json.dumps(out))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    report = run_suite(instances=args.instances, composed_instances=args.composed,
                       seed=args.seed, operators=args.operators)
    print(json.dumps(report.to_json()))
    return 0 if report.passed else 1


def cmd_viz(args) -> int:
    run = Path(args.run)
    src = run / "fusion_weights.csv"
    if not src.exists():
        raise CliError(f"missing training log {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(src, newline="") as fh, open(out / "fusion_trajectory.csv", "w", newline="") as dst:
        reader = csv.reader(fh)
        header = next(reader)
        if header != FUSION_CSV_HEADER:
            raise CliError(f"unexpected CSV header in {src}")
        writer = csv.writer(dst)
        writer.writerow(["iter", "step", "node", "coefficient_0", "coefficient_1",
                         "coefficient_2", "coefficient_sum"])
        for row in reader:
            step, node = row[1].split(".", 1)
            coefs = [float(c) for c in row[2:] if c != ""]
            writer.writerow([row[0], step, node, *row[2:], f"{sum(coefs):.8f}"])
    written = ["fusion_trajectory.csv"]
    if args.image:
        ckpt = Path(args.checkpoint) if args.checkpoint else run / "final"
        model, _, _ = load_checkpoint(ckpt)
        x, _ = _model_input(model, load_image(args.image), args.long_side)
        with no_grad():
            feats = model.bifpn_forward(model.backbone_forward(x, "eval"), "eval")
        for level, f in enumerate(feats, start=1):
            name = f"features_level{level}.png"
            _save_gray(out / name, _normalize(f.data[0].mean(axis=0)))
            written.append(name)
    print(json.dumps({"out": str(out), "files": written}))
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vartext", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--start", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--width", type=int, default=128)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector on a corpus")
    t.add_argument("--corpus", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--iters", type=int, default=500)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--decay", type=float, default=0.95)
    t.add_argument("--decay-every", type=int, default=1000)
    t.add_argument("--kl-weight", type=float, default=1.0)
    t.add_argument("--ablation", choices=ABLATIONS, default="full")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--width-mult", type=float, default=0.125)
    t.add_argument("--num-bifpn", type=int, default=3)
    t.add_argument("--min-width", type=int, default=16)
    t.add_argument("--long-side", type=int, default=128)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    t.add_argument("--log-every", type=int, default=25)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect text in images")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--images", type=Path, required=True, help="image file or directory")
    i.add_argument("--out", type=Path, help="detection JSON (default: stdout)")
    i.add_argument("--tau-r", type=float, default=TAU_REGION)
    i.add_argument("--tau-a", type=float, default=TAU_AFFINITY)
    i.add_argument("--min-area", type=float, default=MIN_AREA)
    i.add_argument("--long-side", type=int, default=640)
    i.add_argument("--dump-maps", type=Path, help="directory for region/affinity PNGs")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--dets", type=Path, required=True)
    e.add_argument("--gts", type=Path, required=True, help="corpus directory or annotation JSON")
    e.add_argument("--iou", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--composed", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--operators", nargs="+")
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("viz", help="fusion-weight trajectories and feature-map dumps")
    v.add_argument("--run", type=Path, required=True, help="training output directory")
    v.add_argument("--out", type=Path, required=True)
    v.add_argument("--image", type=Path, help="image for per-level feature maps")
    v.add_argument("--checkpoint", type=Path, help="defaults to RUN/final")
    v.add_argument("--long-side", type=int, default=128)
    v.set_defaults(func=cmd_viz)
    return p


def _thread_limit():
    value = os.environ.get("VARTEXT_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"VARTEXT_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise CliError(f"VARTEXT_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr)
        _echo(args.command, args)
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except CliError as exc:
        print(json.dumps({"error": str(exc), "type": "usage"}), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

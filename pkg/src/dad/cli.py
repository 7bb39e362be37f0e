"""Command-line entry point: ``dad gen-shapes | train | eval | infer``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set ``DAD_NUM_THREADS`` to bound the number of torch CPU threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PROFILES, RunProfile, get_profile
from .data import (DatasetManifest, generate_shapes_dataset, load_manifest, validation_split)
from .model import ConfigError

log = logging.getLogger("dad")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class UsageError(Exception):
    """Bad flags or inconsistent configuration (exit code 2)."""


def _set_threads():
    n = os.environ.get("DAD_NUM_THREADS")
    if n:
        import torch
        try:
            torch.set_num_threads(int(n))
        except ValueError:
            raise UsageError(f"DAD_NUM_THREADS must be a positive integer, got {n!r}") from None


def _emit(kind: str, **fields):
    """One tab-delimited ``key=value`` summary line on stdout."""
    parts = [kind] + [f"{k}={_fmt(v)}" for k, v in fields.items()]
    print("\t".join(parts), flush=True)


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def cmd_gen_shapes(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    out = Path(args.out)
    manifest, _ = generate_shapes_dataset(args.seed, args.n, args.image_size, out_dir=out)
    n_inst = manifest.num_instances
    _emit("gen-shapes", out=out, images=args.n, instances=n_inst, seed=args.seed)
    return 0


def _overrides_from_args(args) -> dict:
    train = {}
    for flag, key in (("max_epochs", "max_epochs"), ("lr", "base_lr"),
                      ("batch_size", "batch_size"), ("seed", "seed"),
                      ("val_fraction", "val_fraction"), ("hflip", "hflip")):
        v = getattr(args, flag)
        if v is not None:
            train[key] = v
    weights = {k: v for k, v in (("attr", args.lambda_attr), ("box", args.lambda_box))
               if v is not None}
    focal = {k: v for k, v in (("alpha", args.alpha), ("gamma", args.gamma)) if v is not None}
    if weights:
        train["loss_weights"] = weights
    if focal:
        train["focal"] = focal
    return {"train": train} if train else {}


def build_profile(args) -> RunProfile:
    """Built-in profile < ``--config`` JSON file < command-line flags."""
    try:
        profile = get_profile(args.profile)
        if args.config:
            profile = profile.with_overrides(json.loads(Path(args.config).read_text()))
        return profile.with_overrides(_overrides_from_args(args))
    except (ConfigError, ValueError, KeyError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _check_dataset(profile: RunProfile, manifest: DatasetManifest, what: str):
    mc = profile.model
    if manifest.num_attributes != mc.num_attributes or manifest.num_classes != mc.num_classes:
        raise UsageError(
            f"{what} has K={manifest.num_classes}, Z={manifest.num_attributes} but profile "
            f"{profile.name!r} expects K={mc.num_classes}, Z={mc.num_attributes}")


def cmd_train(args) -> int:
    from .model import build_model
    from .plotting import plot_training
    from .trainer import train

    profile = build_profile(args)
    train_m = load_manifest(args.data)
    _check_dataset(profile, train_m, "--data")
    cfg = profile.train
    if args.val:
        val_src = load_manifest(args.val)
        _check_dataset(profile, val_src, "--val")
        val_m = validation_split(val_src, cfg.val_fraction, cfg.seed)
    else:
        # hold out a disjoint slice of the training set
        val_m = validation_split(train_m, cfg.val_fraction, cfg.seed)
        held = {s.image for s in val_m.samples}
        keep = [i for i, s in enumerate(train_m.samples) if s.image not in held]
        train_m = train_m.subset(keep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.json").write_text(profile.to_json() + "\n")

    model = build_model(profile.model, seed=cfg.seed)
    t0 = time.perf_counter()
    _, runlog = train(model, train_m, val_m, profile, out_dir=out,
                      echo=None if args.quiet else print)
    if runlog.records:
        plot_training(runlog.records, out / "training.png")
    best = runlog.best_epoch
    best_auc = next((r["val_micro_auc"] for r in runlog.records if r["epoch"] == best), None)
    _emit("train", out=out, epochs=len(runlog.records), best_epoch=best, val_micro_auc=best_auc,
          seconds=round(time.perf_counter() - t0, 1))
    return 0


def _load(checkpoint):
    from .model import load_checkpoint
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model, meta = load_checkpoint(checkpoint)
    if "profile" not in meta:
        raise UsageError(f"{checkpoint}: no run profile recorded in checkpoint")
    profile = RunProfile.from_dict(meta["profile"])
    return model, meta, profile


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .inference import Predictor
    from .plotting import plot_attribute_auc, plot_roc

    model, meta, profile = _load(args.checkpoint)
    manifest = load_manifest(args.data)
    _check_dataset(profile, manifest, "--data")
    predictor = Predictor(model, profile.anchors, profile.decode, profile.resize)
    report = evaluate(predictor, manifest, profile.eval)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_json()
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out / "per_attribute_auc.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["attribute", "auc", "positives", "negatives"])
        labels = np.array([p.gt.attributes for p in report.pairs]).reshape(-1, len(
            manifest.attribute_names))
        for z, name in enumerate(manifest.attribute_names):
            auc = report.auc.per_attribute_auc[z]
            pos = int(labels[:, z].sum())
            w.writerow([name, "" if auc is None else f"{auc:.6f}", pos, len(labels) - pos])
    if report.pairs:
        scores = np.array([p.pred_attr_probs for p in report.pairs])
        plot_roc(scores, labels, out / "roc.png", auc=report.micro_auc)
        plot_attribute_auc(manifest.attribute_names, report.auc.per_attribute_auc,
                           out / "attribute_auc.png")
    _emit("eval", micro_auc=report.micro_auc, recall=report.recall,
          precision=report.precision, match_coverage=report.match_coverage,
          n_images=report.n_images, out=out)
    return 0


def _image_paths(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        files = sorted(f for f in p.rglob("*") if f.suffix.lower() in IMAGE_SUFFIXES)
    elif p.exists():
        files = [p]
    else:
        raise FileNotFoundError(f"no such image or directory: {spec}")
    return files


def cmd_infer(args) -> int:
    from dataclasses import replace

    from .inference import Predictor
    from .postprocess import detections_to_json, render

    if args.attr_top < 0:
        raise UsageError("--attr-top must be >= 0")
    if args.render_scale < 1:
        raise UsageError("--render-scale must be >= 1")
    model, meta, profile = _load(args.checkpoint)
    decode_cfg = profile.decode
    if args.score_threshold is not None:
        try:
            decode_cfg = replace(decode_cfg, score_threshold=args.score_threshold)
        except ValueError as e:
            raise UsageError(str(e)) from None
    predictor = Predictor(model, profile.anchors, decode_cfg, profile.resize)
    class_names = meta.get("class_names") or [f"class_{i}" for i in
                                              range(profile.model.num_classes)]
    attr_names = meta.get("attribute_names") or [f"attr_{i}" for i in
                                                 range(profile.model.num_attributes)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _image_paths(args.images)
    total = 0
    for path in files:
        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"))
        dets = predictor(img)
        total += len(dets)
        doc = detections_to_json(path.name, dets, class_names, attr_names)
        (out / f"{path.stem}.json").write_text(json.dumps(doc, indent=1) + "\n")
        canvas = img
        shown_dets = [d for d in dets if d.score >= args.render_threshold]
        k = args.render_scale
        if k != 1:
            # upscale before drawing so the text stays legible on small inputs
            canvas = np.asarray(Image.fromarray(img).resize((img.shape[1] * k, img.shape[0] * k),
                                                            Image.NEAREST))
            shown_dets = [_scaled(d, k) for d in shown_dets]
        shown = render(canvas, shown_dets, class_names, attr_names, attr_top=args.attr_top)
        Image.fromarray(shown).save(out / f"{path.stem}.png")
        _emit("infer", image=path.name, detections=len(dets))
    _emit("infer-summary", images=len(files), detections=total, out=out)
    return 0


def _scaled(det, s):
    from dataclasses import replace

    from .geometry import Box
    b = det.box
    return replace(det, box=Box(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-shapes", help="render the synthetic attributed-shapes dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True, help="number of images")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--image-size", type=int, default=96)
    g.set_defaults(func=cmd_gen_shapes)

    t = sub.add_parser("train", help="train a model and keep the best-validation checkpoint")
    t.add_argument("--profile", default="shapes-tiny", choices=sorted(PROFILES))
    t.add_argument("--data", required=True, help="training dataset directory or manifest")
    t.add_argument("--val", help="dataset to draw the validation split from "
                                 "(default: hold out part of --data)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="JSON file of nested profile overrides")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--lambda-attr", type=float, help="attribute loss weight")
    t.add_argument("--lambda-box", type=float, help="box loss weight")
    t.add_argument("--alpha", type=float, help="focal alpha")
    t.add_argument("--gamma", type=float, help="focal gamma")
    t.add_argument("--hflip", action=argparse.BooleanOptionalAction, default=None,
                   help="random horizontal flips")
    t.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="attribute AUC and detection recall/precision")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect and describe objects in images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--images", required=True, help="image file or directory")
    i.add_argument("--out", required=True)
    i.add_argument("--attr-top", type=int, default=8,
                   help="attribute decisions shown per box (most confident first)")
    i.add_argument("--score-threshold", type=float)
    i.add_argument("--render-threshold", type=float, default=0.5,
                   help="minimum score of boxes drawn on the PNG (JSON keeps all)")
    i.add_argument("--render-scale", type=int, default=1,
                   help="integer upscaling of the annotated PNG")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"dad: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"dad: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

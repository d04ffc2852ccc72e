"""Command-line entry point: dataset-build, train, predict, evaluate, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as D
from .config import ConfigError, ModelSettings, RunConfig
from .metrics import EvalReport, VariantReport, evaluate_pair_set
from .pipeline import NumericError, predict_logits, train
from .quantify import OverlayStyle, area_fractions, classify, overlay
from .unet import WeightFileError, build, import_encoder, load_weights

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"}

log = logging.getLogger("fractoseg")


def _ratios(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ratios, got {text!r}")


def _threshold(text: str):
    return None if text.lower() in ("none", "off", "") else int(text)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", type=int, dest="iters_per_epoch")
    p.add_argument("--val-iters", type=int, dest="val_iters")
    p.add_argument("--lr", type=float)
    # suppressed default so an explicit "none" can override a config file value
    p.add_argument("--brightness-threshold", type=_threshold, dest="brightness_threshold",
                   default=argparse.SUPPRESS, help="integer, or 'none' to disable")
    p.add_argument("--exclude-void", action=argparse.BooleanOptionalAction, dest="exclude_void", default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--freeze-encoder", action=argparse.BooleanOptionalAction, dest="freeze_encoder", default=None)
    p.add_argument("--encoder-weights", dest="encoder_weights")
    p.add_argument("--void-policy", choices=("background", "ignore"), dest="void_policy")
    p.add_argument("--model", choices=("full", "desk"), help="architecture preset (default: full VGG16 widths)")
    p.add_argument("--stages", type=int)


RUN_KEYS = ("seed", "tile_size", "batch_size", "epochs", "iters_per_epoch", "val_iters", "lr",
            "brightness_threshold", "exclude_void", "deterministic", "freeze_encoder", "encoder_weights",
            "void_policy")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for key in RUN_KEYS:
        val = getattr(args, key, None)
        if val is not None or (key == "brightness_threshold" and key in vars(args)):
            setattr(cfg, key, val)
    if getattr(args, "model", None):
        cfg.model = ModelSettings.preset(args.model, getattr(args, "stages", None))
    elif getattr(args, "stages", None):
        cfg.model.stages = args.stages
    if getattr(args, "split_ratios", None) is not None:
        cfg.split_ratios = args.split_ratios
    return cfg.validate()


def _echo_config(cfg: RunConfig, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / f"{command}.config.json")


def _list_images(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.exists():
            out.append(p)
        else:
            raise D.DataError(f"image {p} not found")
    return out


def _load_model(weights):
    path = Path(weights)
    if not path.exists():
        raise D.DataError(f"weight file {path} not found")
    return load_weights(path)


# ---------------------------------------------------------------- commands


def cmd_dataset_build(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    manifest = D.build_dataset(args.via, args.images, out, cfg.tile_size, tuple(cfg.split_ratios),
                               cfg.seed, args.stride)
    _echo_config(cfg, out, "dataset-build")
    counts = {k: len(v) for k, v in manifest.splits.items()}
    print(json.dumps({"manifest": str(out / "manifest.json"), "tiles": counts}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out, "train")
    manifest = D.DatasetManifest.load(args.manifest)
    train_set = D.TileSet.from_manifest(manifest, "train")
    val_set = D.TileSet.from_manifest(manifest, "val") if manifest.splits.get("val") else None
    if val_set is None:
        log.warning("manifest has no validation split; best weights follow training loss")
    model = build(cfg.model.to_unet(), seed=cfg.seed)
    if cfg.encoder_weights:
        import_encoder(model, cfg.encoder_weights, freeze=cfg.freeze_encoder)
    elif cfg.freeze_encoder:
        model.freeze_encoder(True)
    (out / "train_log.jsonl").unlink(missing_ok=True)
    train(model, train_set, val_set, cfg, out, on_epoch=lambda e: print(e.to_json(), flush=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out, "predict")
    model = _load_model(args.weights)
    for path in _list_images(args.images):
        image = D.read_gray(path)
        mask = classify(predict_logits(model, image))
        D.write_png(out / f"{path.stem}_mask.png", mask)
        if args.overlay:
            D.write_png(out / f"{path.stem}_overlay.png", overlay(image, mask, OverlayStyle(blend=args.blend)))
        fractions = {"all": area_fractions(mask).to_dict()}
        if cfg.brightness_threshold is not None:
            fractions["brightness_masked"] = area_fractions(
                mask, D.brightness_mask(image, cfg.brightness_threshold)).to_dict()
        (out / f"{path.stem}_fractions.json").write_text(json.dumps(fractions, indent=2))
        print(json.dumps({"image": str(path), **fractions["all"]}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out, "evaluate")
    manifest = D.DatasetManifest.load(args.manifest)
    entries = manifest.split(args.split)
    model = _load_model(args.weights) if args.weights else None
    pairs = []
    for e in entries:
        img_path, gt_path = manifest.resolve(e.image), manifest.resolve(e.mask)
        image, gt = D.read_gray(img_path), D.read_mask(gt_path)
        if model is not None:
            pred = classify(predict_logits(model, image))
        else:
            pred_path = Path(args.pred_dir) / f"{Path(e.image).stem}_mask.png"
            pred = D.read_mask(pred_path)
        pairs.append((gt, pred, image))
    report = evaluate_pair_set(pairs, brightness_threshold=cfg.brightness_threshold)
    fractions = [area_fractions(p[1]) for p in pairs]
    inter = sum(f.intergranular_pixels for f in fractions)
    trans = sum(f.transgranular_pixels for f in fractions)
    total = inter + trans
    report.area_fractions = {
        "intergranular_pixels": inter, "transgranular_pixels": trans,
        "intergranular_fraction": inter / total if total else None,
        "transgranular_fraction": trans / total if total else None,
    }
    (out / "report.json").write_text(report.to_json())
    text = report.to_text()
    (out / "report.txt").write_text(text + "\n")
    print(text)
    headline = report.void_excluded if cfg.exclude_void else report.with_void
    print(json.dumps({"mean_iou": headline.mean_iou, "f_beta": headline.f_beta, "exclude_void": cfg.exclude_void}))
    return EXIT_OK


def cmd_report(args) -> int:
    lines = []
    if args.eval:
        doc = json.loads(Path(args.eval).read_text())
        report = EvalReport(VariantReport(**doc.pop("with_void")), VariantReport(**doc.pop("void_excluded")), **doc)
        lines.append(report.to_text())
    if args.pred_dir:
        files = sorted(Path(args.pred_dir).glob("*_fractions.json"))
        if not files:
            raise D.DataError(f"no *_fractions.json files in {args.pred_dir}")
        lines.append(f"{'image':<32}{'intergranular':>15}{'transgranular':>15}")
        inter = trans = 0
        for f in files:
            frac = json.loads(f.read_text())["all"]
            inter += frac["intergranular_pixels"]
            trans += frac["transgranular_pixels"]
            fi, ft = frac["intergranular_fraction"], frac["transgranular_fraction"]
            lines.append(f"{f.name.removesuffix('_fractions.json'):<32}"
                         f"{'undefined' if fi is None else f'{fi:.4f}':>15}"
                         f"{'undefined' if ft is None else f'{ft:.4f}':>15}")
        total = inter + trans
        if total:
            lines.append(f"{'pooled':<32}{inter / total:>15.4f}{trans / total:>15.4f}")
    if not lines:
        raise ConfigError("report needs --eval and/or --pred-dir")
    text = "\n\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fractoseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-build", help="rasterize VIA annotations and tile images")
    p.add_argument("--via", required=True, help="VIA JSON export")
    p.add_argument("--images", required=True, help="directory with the annotated images")
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=_ratios, dest="split_ratios", help="train,val,test ratios by source image")
    p.add_argument("--stride", type=int)
    _add_run_flags(p)
    p.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("train", help="train a U-net on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify images with trained weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--blend", type=float, default=0.5)
    p.add_argument("images", nargs="+")
    _add_run_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="IoU / F-measure report against ground-truth masks")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render an evaluation report and area fractions as text")
    p.add_argument("--eval", help="report.json from evaluate")
    p.add_argument("--pred-dir", dest="pred_dir", help="predict output directory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, WeightFileError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

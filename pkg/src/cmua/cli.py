"""Command-line interface.

    cmua attack   --config run.json --out-dir out/
    cmua search   --config run.json --out-dir out/
    cmua apply    --watermark out/watermark.cmua face.png protected.png
    cmua eval     --watermark out/watermark.cmua --config run.json --out-dir eval/
    cmua baseline --method MIM --config run.json --out-dir base/

Exit codes: 0 success, 1 user error (bad config, missing or corrupt file,
shape mismatch), 2 internal error.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import backend
from . import tensor as T
from .attack import baseline_attack
from .config import BASELINE_METHODS, ConfigError, RunConfig, load_config, synthetic_dataset
from .files import (
    ImageFormatError, WatermarkFormatError, encode_watermark, list_images, load_image, load_image_dir,
    load_watermark, read_json, save_image, save_watermark, watermark_preview, write_json,
)
from .generators import FamilySpec, make_family, synth_images
from .metrics import FeatureExtractor, evaluate
from .pipeline import SearchFailed, make_batches, run_cmua, search_step_sizes, two_phase_run
from .seeding import derive_seed

log = logging.getLogger("cmua")

WATERMARK_NAME = "watermark.cmua"
MANIFEST_NAME = "manifest.json"


class UserError(Exception):
    """Problem with the user's inputs; reported without a traceback, exit code 1."""


USER_ERRORS = (UserError, ConfigError, WatermarkFormatError, ImageFormatError, T.ShapeError,
               FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError)


# ------------------------------------------------------------------ helpers


def resolve_config(args):
    """Config from ``--config`` (file or manifest) with command-line overrides applied."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "method", None):
        cfg.method = args.method.upper()
    family = getattr(args, "family", None)
    if family:
        if family.isdigit():
            cfg.family = FamilySpec.default(int(family))
        else:
            try:
                cfg.family = FamilySpec.from_dict(read_json(family))
            except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
                raise UserError(f"cannot read family spec {family}: {exc}") from exc
    dataset = getattr(args, "dataset", None)
    if dataset:
        if dataset == "synthetic":
            cfg.dataset = replace(cfg.dataset, source="synthetic", directory=None)
        elif os.path.isdir(dataset):
            cfg.dataset = replace(cfg.dataset, source="directory", directory=dataset)
        else:
            raise UserError(f"--dataset must be 'synthetic' or an image directory, got {dataset!r}")
    if cfg.pipeline.step_sizes is not None and len(cfg.pipeline.step_sizes) != len(cfg.family.models):
        raise UserError(
            f"pipeline.step_sizes has {len(cfg.pipeline.step_sizes)} entries but the family has "
            f"{len(cfg.family.models)} models"
        )
    cfg.validate()
    backend.set_threads(cfg.threads)
    return cfg


def load_split(cfg, name):
    """Images for one role ("train", "score" or "eval") of the configured dataset."""
    d = cfg.dataset
    start, count = getattr(d, f"{name}_start"), getattr(d, f"{name}_count")
    if d.source == "synthetic":
        return synth_images(synthetic_dataset(cfg), start, count)
    try:
        images = load_image_dir(d.directory, start, count)
    except IndexError as exc:
        raise UserError(str(exc)) from exc
    if images.shape[1:] != tuple(cfg.family.image_shape):
        raise UserError(f"images in {d.directory} have shape {images.shape[1:]}, "
                        f"family expects {tuple(cfg.family.image_shape)}")
    return images


def make_extractor(cfg):
    if not cfg.metrics.frd:
        return None
    return FeatureExtractor(seed=derive_seed(cfg.seed, "frd"), dim=cfg.metrics.feature_dim,
                            channels=cfg.family.image_shape[2])


def trial_log(args):
    """Trial log path; a stale log is discarded unless ``--resume`` asks to continue it."""
    path = out_path(args, "trials.jsonl")
    if os.path.exists(path) and not getattr(args, "resume", False):
        os.remove(path)
    return path


def out_path(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def sha256_bytes(blob):
    return hashlib.sha256(blob).hexdigest()


def _evaluate(cfg, family, perturbation):
    images = load_split(cfg, "eval")
    report = evaluate(family, images, perturbation, extractor=make_extractor(cfg),
                      config={"dataset": cfg.dataset.__dict__.copy(), "metrics": cfg.metrics.__dict__.copy()})
    return report


# ----------------------------------------------------------------- commands


def cmd_attack(args):
    """Craft the cross-model watermark; writes the watermark, a manifest and loss traces."""
    cfg = resolve_config(args)
    family = make_family(cfg.family, seed=cfg.seed)
    train = load_split(cfg, "train")
    visits = []
    search_info = None
    if cfg.two_phase:
        result = two_phase_run(family, train, load_split(cfg, "score"), cfg.search,
                               replace(cfg.pipeline, seed=cfg.seed), seed=cfg.seed,
                               log_path=trial_log(args), visit_log=visits)
        wm = result.watermark
        search_info = {"step_sizes": list(result.step_sizes), "search_score": result.search_score,
                       "trials": len(result.history)}
    else:
        pcfg = replace(cfg.pipeline, seed=cfg.seed)
        wm = run_cmua(family, make_batches(train, pcfg.batch_size), pcfg, visit_log=visits)
    blob = encode_watermark(wm)
    with open(out_path(args, WATERMARK_NAME), "wb") as fh:
        fh.write(blob)
    save_image(out_path(args, "watermark_preview.png"), watermark_preview(wm))
    with open(out_path(args, "loss_trace.jsonl"), "w") as fh:
        for v in visits:
            fh.write(json.dumps(v) + "\n")
    report = _evaluate(cfg, family, wm.perturbation)
    manifest = {
        "command": "attack",
        "config": cfg.to_dict(),
        "watermark": {"file": WATERMARK_NAME, "sha256": sha256_bytes(blob), "epsilon": wm.epsilon,
                      "shape": list(wm.shape)},
        "provenance": wm.provenance,
        "search": search_info,
        "metrics": report.to_dict(per_image=False),
    }
    write_json(out_path(args, MANIFEST_NAME), manifest)
    print(report.table())
    log.info("watermark written to %s", out_path(args, WATERMARK_NAME))
    return manifest


def cmd_search(args):
    """Phase one only: tune per-model step sizes and emit the trial history."""
    cfg = resolve_config(args)
    family = make_family(cfg.family, seed=cfg.seed)
    trials = trial_log(args)
    train = load_split(cfg, "train")
    if cfg.search.train_count is not None:
        train = train[:cfg.search.train_count]
    best_x, best_y, history = search_step_sizes(
        family, train, load_split(cfg, "score"), cfg.search,
        replace(cfg.pipeline, seed=cfg.seed), seed=cfg.seed, log_path=trials,
    )
    steps = [float(v) * cfg.search.step_unit for v in best_x]
    doc = {"command": "search", "config": cfg.to_dict(), "best_x": [float(v) for v in best_x],
           "best_score": best_y, "step_sizes": steps, "trials": len(history), "trial_log": "trials.jsonl"}
    write_json(out_path(args, "search.json"), doc)
    print(f"best score {best_y:.4f} at step sizes (x 1/255) {np.round(best_x, 3).tolist()}")
    return doc


def _apply_one(wm, src, dst):
    image = load_image(src)
    if image.shape != wm.shape:
        raise UserError(f"{src}: image shape {image.shape} does not match watermark shape {wm.shape}; "
                        "images are never resampled")
    save_image(dst, wm.apply(image))


def cmd_apply(args):
    """Add the watermark to one image, or to every image of a directory."""
    wm = load_watermark(args.watermark)
    if os.path.isdir(args.input):
        os.makedirs(args.output, exist_ok=True)
        paths = list_images(args.input)
        for p in paths:
            _apply_one(wm, p, os.path.join(args.output, os.path.basename(p)))
        print(f"protected {len(paths)} images into {args.output}")
        return len(paths)
    _apply_one(wm, args.input, args.output)
    return 1


def cmd_eval(args):
    """Evaluate a watermark file on the configured family and evaluation images."""
    if not args.watermark:
        raise UserError("eval needs --watermark")
    wm = load_watermark(args.watermark)
    cfg = resolve_config(args)
    if wm.shape != tuple(cfg.family.image_shape):
        raise UserError(f"watermark shape {wm.shape} does not match family image shape "
                        f"{tuple(cfg.family.image_shape)}")
    family = make_family(cfg.family, seed=cfg.seed)
    report = _evaluate(cfg, family, wm.perturbation)
    with open(args.watermark, "rb") as fh:
        digest = sha256_bytes(fh.read())
    doc = report.to_dict()
    doc["watermark_sha256"] = digest
    # thread count cannot change results; keep it out so reports compare byte-for-byte
    doc["run_config"] = {k: v for k, v in cfg.to_dict().items() if k != "threads"}
    write_json(out_path(args, "report.json"), doc)
    table = report.table()
    with open(out_path(args, "report.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return doc


def run_baseline(cfg, method, family, train):
    if method == "CMUA":
        pcfg = replace(cfg.pipeline, seed=cfg.seed)
        return run_cmua(family, make_batches(train, pcfg.batch_size), pcfg)
    acfg = replace(cfg.pipeline.attack, method=method)
    return baseline_attack(method, list(family), acfg, make_batches(train, cfg.pipeline.batch_size), seed=cfg.seed)


def cmd_baseline(args):
    """Run one attack method in the universal setting and emit a comparison row."""
    cfg = resolve_config(args)
    method = cfg.method
    family = make_family(cfg.family, seed=cfg.seed)
    wm = run_baseline(cfg, method, family, load_split(cfg, "train"))
    report = _evaluate(cfg, family, wm.perturbation)
    row = {"method": method, "mean_sr_mask": report.mean_sr(), "min_sr_mask": report.min_sr()}
    for m in report.models:
        row[f"sr_mask:{m.model}"] = m.sr_mask
        row[f"log10_frd:{m.model}"] = m.to_dict(per_image=False)["log10_frd"]
    save_watermark(out_path(args, f"watermark_{method.lower()}.cmua"), wm)
    doc = {"command": "baseline", "config": cfg.to_dict(), "row": row, "report": report.to_dict(per_image=False)}
    write_json(out_path(args, f"baseline_{method.lower()}.json"), doc)
    print(f"{method}: mean SR_mask {row['mean_sr_mask']:.4f}, min SR_mask {row['min_sr_mask']:.4f}")
    print(report.table())
    return doc


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="cmua", description="Cross-model universal adversarial watermarks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--backend", choices=("cython", "python"), help="convolution kernel backend")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run config or a previous run's manifest")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--family", help="family spec JSON, or a number of default models")
        p.add_argument("--dataset", help="'synthetic' or a directory of PNG/PPM images")
        p.add_argument("--threads", type=int, help="worker threads for the convolution kernels")
        if out:
            p.add_argument("--out-dir", default=".", help="output directory (default: current)")

    p = sub.add_parser("attack", help="craft a cross-model universal watermark")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue an interrupted step-size search")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("search", help="step-size search only; writes the trial log")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from an existing trial log")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("apply", help="protect an image (or directory of images) with a watermark")
    p.add_argument("--watermark", required=True)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="evaluate a watermark: L2_mask, SR_mask and FRD per model")
    common(p)
    p.add_argument("--watermark", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run one attack method in the universal setting")
    common(p)
    p.add_argument("--method", required=True, type=str.upper, choices=BASELINE_METHODS)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (1) and --help (0)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.backend:
            try:
                backend.use(args.backend)
            except ValueError as exc:
                raise UserError(str(exc)) from exc
        args.func(args)
    except USER_ERRORS as exc:
        print(f"cmua {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except SearchFailed as exc:
        print(f"cmua {args.command}: search failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.debug("internal error", exc_info=True)
        print(f"cmua {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

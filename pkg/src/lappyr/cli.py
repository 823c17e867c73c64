"""``lappyr`` command line: train, eval, decompose, augment, pyramid, gradcheck, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Tabular results go to stdout (tab-separated); figures and files go to
``--out-dir``; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "LAPPYR_SEED"
HELP_WIDTH = 100

logger = logging.getLogger("lappyr")


class UsageError(Exception):
    pass


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=36)

    def _get_help_string(self, action):
        # unset optionals resolve from presets; say so instead of "(default: None)"
        if action.default is None and action.option_strings:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")


def _add_config(p):
    p.add_argument("--config", type=Path, default=None,
                   help="flat key=value file mirroring the long flags; explicit flags win")


def _add_net(p):
    g = p.add_argument_group("network")
    g.add_argument("--K", type=int, default=None, help="pyramid levels (desk 2, full 4)")
    g.add_argument("--width", type=int, default=None, help="hidden width (desk 16, full 32)")
    g.add_argument("--substructures", type=int, default=None, help="residual units per block (desk 2, full 6)")
    g.add_argument("--variant", default="pyramid_d",
                   choices=["sequential_a", "stacked_split_b", "parallel_c", "pyramid_d"], help="network wiring")
    g.add_argument("--paper-scale", action="store_true",
                   help="full-scale preset: K 4, width 32, 6 units, batch 8, 256 crops")


def _add_loss(p):
    g = p.add_argument_group("loss")
    g.add_argument("--lambda-d", type=float, default=1.0, help="data loss weight")
    g.add_argument("--lambda-p", type=float, default=0.5, help="perceptual loss weight")
    g.add_argument("--lambda-t", type=float, default=1e-4, help="total-variation weight")
    g.add_argument("--sigma-s", type=float, default=1.0, help="bilateral spatial width")
    g.add_argument("--sigma-r", default="adaptive", help="bilateral range width, or 'adaptive'")
    g.add_argument("--bilateral-window", type=int, default=5, help="odd bilateral window size")
    g.add_argument("--extractor", type=Path, default=None,
                   help="feature extractor weights (checkpoint format); default fixed-seed surrogate")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lappyr", formatter_class=_Formatter,
                     description="Laplacian-pyramid intrinsic image decomposition toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("train", help="train an albedo/shading network pair", formatter_class=_Formatter)
    p.add_argument("--manifest", type=Path, default=None, help="training manifest (TSV)")
    p.add_argument("--synth", type=int, default=0, help="train on N generated pairs instead of a manifest")
    p.add_argument("--split", default="none", choices=["none", "image_split", "scene_split"],
                   help="train on the train half of this split")
    p.add_argument("--scheme", default="joint", choices=["joint", "hierarchical"], help="training scheme")
    p.add_argument("--steps", type=int, default=1000, help="optimizer steps")
    p.add_argument("--batch", type=int, default=None, help="mini-batch size (desk 2, full 8)")
    p.add_argument("--crop", type=int, default=None, help="square crop size (desk 64, full 256)")
    p.add_argument("--scale-min", type=float, default=0.8, help="lower random rescale factor")
    p.add_argument("--scale-max", type=float, default=1.2, help="upper random rescale factor")
    p.add_argument("--flip-p", type=float, default=0.5, help="horizontal flip probability")
    p.add_argument("--lr-start", type=float, default=1e-4, help="initial learning rate")
    p.add_argument("--lr-end", type=float, default=1e-6, help="final learning rate (geometric decay)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="checkpoint cadence in steps (0 = final only)")
    p.add_argument("--freeze-lower", action="store_true",
                   help="hierarchical: train only the current stage's block")
    p.add_argument("--clip-grad", type=float, default=None, help="clip global gradient norm (off by default)")
    p.add_argument("--low-band-reg", action="store_true", help="parallel_c: add the low-band regularizer")
    p.add_argument("--init", type=Path, default=None, help="start from this checkpoint")
    p.add_argument("--out-dir", type=Path, default=Path("runs/train"), help="checkpoints, log and figures")
    _add_net(p)
    _add_loss(p)
    _add_seed(p)
    _add_config(p)

    p = sub.add_parser("eval", help="score predictions against ground truth", formatter_class=_Formatter)
    p.add_argument("--manifest", type=Path, required=True, help="ground-truth manifest (TSV)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path, help="predict with this checkpoint")
    src.add_argument("--pred-dir", type=Path, help="read <id>_albedo / <id>_shading images from here")
    p.add_argument("--split", default="none", choices=["none", "image_split", "scene_split"],
                   help="evaluate on the test half of this split")
    p.add_argument("--window", type=int, default=None, help="si-LMSE window (default 10%% of the larger extent)")
    p.add_argument("--baselines", action="store_true", help="also score constant-albedo / constant-shading")
    p.add_argument("--out-dir", type=Path, default=Path("runs/eval"), help="metrics.tsv, metrics.json, figure")
    _add_seed(p)
    _add_config(p)

    p = sub.add_parser("decompose", help="split images into albedo and shading", formatter_class=_Formatter)
    p.add_argument("images", nargs="+", type=Path, help="input PNG or PFM images")
    p.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("--emit-components", action="store_true", help="also write per-level component maps")
    p.add_argument("--figure", action="store_true", help="write a side-by-side PNG figure per image")
    _add_config(p)

    p = sub.add_parser("augment", help="synthesize exactly-labeled pairs from unlabeled images",
                       formatter_class=_Formatter)
    p.add_argument("--checkpoint", type=Path, required=True, help="preliminary model checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="labeled manifest (sets the 2x size)")
    p.add_argument("--unlabeled", type=Path, nargs="+", required=True, help="unlabeled images or directories")
    p.add_argument("--strength", type=float, default=1.0, help="edge-aware smoothing strength")
    p.add_argument("--factor", type=int, default=2, help="augmented size as a multiple of the labeled size")
    p.add_argument("--out-dir", type=Path, default=Path("runs/augment"), help="triples plus manifest.tsv")
    _add_seed(p)
    _add_config(p)

    p = sub.add_parser("pyramid", help="Laplacian expansion / collapse of an image", formatter_class=_Formatter)
    p.add_argument("image", type=Path, help="input PNG or PFM image")
    p.add_argument("--levels", type=int, default=4, help="number of reductions K")
    p.add_argument("--out-dir", type=Path, default=Path("runs/pyramid"), help="level images and montage")
    _add_config(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient", formatter_class=_Formatter)
    p.add_argument("--no-network", action="store_true", help="skip the full-network check")
    _add_seed(p)
    _add_config(p)

    p = sub.add_parser("synth", help="write generated mondrian triples and a manifest", formatter_class=_Formatter)
    p.add_argument("--n", type=int, default=8, help="number of pairs")
    p.add_argument("--size", type=int, default=64, help="square extent")
    p.add_argument("--scenes", type=int, default=0, help="scene labels cycle over this many (0 = none)")
    p.add_argument("--format", default="pfm", choices=["pfm", "png"], help="image format")
    p.add_argument("--out-dir", type=Path, default=Path("runs/synth"), help="output directory")
    _add_seed(p)
    _add_config(p)
    return parser


# ------------------------------------------------------------------ config


def read_config(path: Path) -> Dict[str, str]:
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip() + "\nlappyr: error: a command is required")
    if getattr(args, "config", None) is not None:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in cfg.items():
            act = actions.get(key)
            if act is None or key in ("config", "help"):
                raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
            if act.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                val = act.type(raw) if act.type else raw
                if act.choices and val not in act.choices:
                    raise UsageError(f"{args.config}: invalid value {raw!r} for {key}")
                defaults[key] = val
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if hasattr(args, "seed") and args.seed is None:
        args.seed = _env_seed()
    return args


# ------------------------------------------------------------------ helpers


def _net_config(args):
    from .network import DESK_PRESET, FULL_PRESET, NetConfig

    preset = FULL_PRESET if args.paper_scale else DESK_PRESET
    vals = {k: getattr(args, k) if getattr(args, k) is not None else preset[k] for k in preset}
    return NetConfig(variant=args.variant, seed=args.seed, **vals)


def _loss_parts(args):
    from .losses import BilateralParams, FeatureExtractor, LossWeights

    sig_r = None if str(args.sigma_r).lower() == "adaptive" else float(args.sigma_r)
    weights = LossWeights(args.lambda_d, args.lambda_p, args.lambda_t)
    bil = BilateralParams(sigma_s=args.sigma_s, sigma_r=sig_r, window=args.bilateral_window)
    fx = FeatureExtractor.from_file(args.extractor) if args.extractor else None
    return weights, bil, fx


def _emit(rows: List[List[str]]) -> None:
    for r in rows:
        print("\t".join(str(x) for x in r))


def _load_dataset(args):
    from .datapipe import load_manifest, split

    ds = load_manifest(args.manifest)
    if args.split == "none":
        return ds, ds
    return split(ds, args.split, args.seed)


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    from . import plotting
    from .checkpoint import load_nets
    from .datapipe import DataError, synth_dataset
    from .network import build_pair
    from .trainer import TrainConfig, train

    if args.scheme == "hierarchical" and args.variant != "pyramid_d":
        raise UsageError("--scheme hierarchical requires --variant pyramid_d")
    if args.manifest is None and args.synth <= 0:
        raise UsageError("train needs --manifest or --synth N")
    weights, bil, fx = _loss_parts(args)
    full = args.paper_scale
    cfg = TrainConfig(
        steps=args.steps, scheme=args.scheme, seed=args.seed, weights=weights, bilateral=bil,
        batch=args.batch or (8 if full else 2), crop=args.crop or (256 if full else 64),
        lr_start=args.lr_start, lr_end=args.lr_end, scale_range=(args.scale_min, args.scale_max),
        flip_p=args.flip_p, checkpoint_every=args.checkpoint_every, freeze_lower=args.freeze_lower,
        clip_grad=args.clip_grad, low_band_reg=args.low_band_reg,
    )
    if args.manifest is not None:
        ds, _ = _load_dataset(args)
    else:
        ds = synth_dataset(args.synth, args.seed, extents=(cfg.crop, cfg.crop))
    if len(ds) == 0:
        raise DataError("training dataset is empty")
    if args.init is not None:
        net_a, net_s, _ = load_nets(args.init)
    else:
        net_a, net_s = build_pair(_net_config(args))
    res = train(net_a, net_s, ds, cfg, out_dir=args.out_dir, extractor=fx)
    plotting.loss_curve(res.log, args.out_dir / "loss_curve.png")
    last = res.log[-1]
    _emit([["key", "value"], ["steps", len(res.log)], ["final_total", f"{last['total']:.9g}"],
           ["checkpoint", args.out_dir / "final.ckpt"], ["log", args.out_dir / "train_log.tsv"],
           ["figure", args.out_dir / "loss_curve.png"]])
    return EXIT_OK


def _find_pred(d: Path, pid: str, kind: str) -> Path:
    for ext in (".pfm", ".png"):
        p = d / f"{pid}_{kind}{ext}"
        if p.is_file():
            return p
    from .datapipe import MissingImageError

    raise MissingImageError(f"no {kind} prediction for {pid!r} in {d}")


def cmd_eval(args) -> int:
    from . import plotting
    from .checkpoint import load_nets
    from .imageio import read_image
    from .trainer import (constant_albedo_baseline, constant_shading_baseline, evaluate,
                          evaluate_predictions)

    _, test = _load_dataset(args)
    if args.checkpoint is not None:
        net_a, net_s, _ = load_nets(args.checkpoint)
        report = evaluate(net_a, net_s, test, args.window)
    else:
        ids = {p.input.tobytes(): p.id for p in test}

        def predict(img):
            pid = ids[img.tobytes()]
            return read_image(_find_pred(args.pred_dir, pid, "albedo")), read_image(_find_pred(args.pred_dir, pid, "shading"))

        report = evaluate_predictions(predict, test, args.window)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "metrics.tsv").write_text(report.to_table())
    (args.out_dir / "metrics.json").write_text(report.to_json())
    baselines = {}
    if args.baselines:
        baselines = {"const_albedo": evaluate_predictions(constant_albedo_baseline, test, args.window),
                     "const_shading": evaluate_predictions(constant_shading_baseline, test, args.window)}
        for name, rep in baselines.items():
            (args.out_dir / f"metrics_{name}.tsv").write_text(rep.to_table())
    plotting.metric_bars(report, args.out_dir / "metrics.png", baselines)
    sys.stdout.write(report.to_table())
    return EXIT_OK


def _check_extents(img: np.ndarray, multiple: int, path: Path) -> None:
    from .datapipe import DataError

    h, w = img.shape[-2:]
    if h % multiple or w % multiple:
        ph, pw = (-h) % multiple, (-w) % multiple
        raise DataError(f"{path}: extents {h}x{w} must be divisible by {multiple}; "
                        f"pad by {ph} rows and {pw} columns (to {h + ph}x{w + pw})")


def cmd_decompose(args) -> int:
    from . import plotting
    from .checkpoint import load_nets
    from .imageio import read_image, write_image

    net_a, net_s, _ = load_nets(args.checkpoint)
    multiple = 2 ** net_a.scale_depth
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows = [["image", "kind", "path"]]
    for path in args.images:
        img = read_image(path)
        _check_extents(img, multiple, path)
        x = img[None].astype(net_a.dtype)
        ra, rs = net_a(x), net_s(x)
        outs = {"albedo": ra.output.data[0], "shading": rs.output.data[0]}
        for kind, arr in outs.items():
            for ext in ("png", "pfm"):
                dst = args.out_dir / f"{path.stem}_{kind}.{ext}"
                write_image(dst, arr)
                rows.append([path, kind, dst])
        if args.emit_components:
            for kind, res in (("albedo", ra), ("shading", rs)):
                for k, comp in enumerate(res.components):
                    dst = args.out_dir / f"{path.stem}_{kind}_comp{k}.pfm"
                    write_image(dst, comp.data[0])
                    rows.append([path, f"{kind}_comp{k}", dst])
        if args.figure:
            dst = args.out_dir / f"{path.stem}_figure.png"
            plotting.decomposition_figure(img, outs["albedo"], outs["shading"], dst)
            rows.append([path, "figure", dst])
    _emit(rows)
    return EXIT_OK


def _collect_images(paths: Sequence[Path]) -> List[Path]:
    from .datapipe import MissingImageError

    out = []
    for p in paths:
        if p.is_dir():
            out += sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".pfm"))
        elif p.is_file():
            out.append(p)
        else:
            raise MissingImageError(f"unlabeled image not found: {p}")
    return out


def cmd_augment(args) -> int:
    from .checkpoint import load_nets
    from .datapipe import augmented_dataset, load_manifest, write_manifest
    from .imageio import read_image, write_pfm

    net_a, net_s, _ = load_nets(args.checkpoint)
    labeled = load_manifest(args.manifest)
    multiple = 2 ** net_a.scale_depth
    unlabeled = []
    for p in _collect_images(args.unlabeled):
        img = read_image(p)
        _check_extents(img, multiple, p)
        unlabeled.append(img)
    aug = augmented_dataset(net_a, net_s, labeled, unlabeled, args.strength, args.factor,
                            np.random.default_rng(args.seed))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for pair in aug:
        names = []
        for kind in ("input", "albedo", "shading"):
            name = f"{pair.id}_{kind}.pfm"
            write_pfm(args.out_dir / name, getattr(pair, kind))
            names.append(name)
        rows.append((pair.id, None, *names))
    write_manifest(args.out_dir / "manifest.tsv", rows)
    _emit([["key", "value"], ["labeled", len(labeled)], ["augmented", len(aug)],
           ["manifest", args.out_dir / "manifest.tsv"]])
    return EXIT_OK


def cmd_pyramid(args) -> int:
    from . import plotting
    from .imageio import read_image, write_image
    from .pyramid import collapse, laplacian_expand

    img = read_image(args.image).astype(np.float64)
    pyr = laplacian_expand(img, args.levels)
    rec = collapse(pyr)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows = [["level", "height", "width", "mean_abs", "path"]]
    for k, lv in enumerate(pyr.levels):
        dst = args.out_dir / f"{args.image.stem}_L{k}.pfm"
        write_image(dst, lv)
        rows.append([k, lv.shape[-2], lv.shape[-1], f"{np.mean(np.abs(lv)):.6g}", dst])
    plotting.pyramid_montage(pyr.levels, args.out_dir / f"{args.image.stem}_pyramid.png", args.image.name)
    rows.append(["roundtrip_max_abs", "", "", f"{np.max(np.abs(rec - img)):.3g}", ""])
    _emit(rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, network=not args.no_network)
    rows = [["check", "max_rel_error", "tol", "entries", "kinks", "status"]]
    for r in results:
        rows.append([r.name, f"{r.max_rel_error:.3e}", f"{r.tol:g}", r.n_checked, r.n_kinks,
                     "ok" if r.passed else "FAIL"])
    _emit(rows)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("gradient check failed: %s", ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    from .datapipe import synth_dataset, write_manifest
    from .imageio import write_image

    if args.n < 1 or args.size < 2:
        raise UsageError("--n must be >= 1 and --size >= 2")
    ds = synth_dataset(args.n, args.seed, extents=(args.size, args.size), scenes=args.scenes)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for pair in ds:
        names = []
        for kind in ("input", "albedo", "shading"):
            name = f"{pair.id}_{kind}.{args.format}"
            write_image(args.out_dir / name, getattr(pair, kind))
            names.append(name)
        rows.append((pair.id, pair.scene, *names))
    write_manifest(args.out_dir / "manifest.tsv", rows)
    _emit([["key", "value"], ["pairs", len(ds)], ["images", 3 * len(ds)],
           ["manifest", args.out_dir / "manifest.tsv"]])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "decompose": cmd_decompose, "augment": cmd_augment,
            "pyramid": cmd_pyramid, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .datapipe import DataError
    from .imageio import ImageFormatError
    from .losses import FeatureExtractor  # noqa: F401  (import errors surface early)
    from .network import ConfigError
    from .pyramid import PyramidError
    from .tensor import ShapeError
    from .trainer import NumericalError

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(f"lappyr: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lappyr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (DataError, CheckpointError, ImageFormatError, PyramidError, ShapeError)):
            print(f"lappyr {args.command}: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"lappyr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, FileNotFoundError, OSError) as exc:
        print(f"lappyr {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"lappyr {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``semmatch {synth,train,eval,match,warp,masks}``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
A ``--config`` file holds ``key=value`` lines whose keys are flag names
(dashes or underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import geometry as geo
from . import synthetic as syn
from . import tensorcore as tc
from .correlation import correlate, foreground_mask
from .features import DescriptorConfig, FormatError, extract, read_image, write_ppm
from .losses import LossWeights
from .pipeline import PairSample, TrainConfig, TrainingSet, train, write_log
from .regressor import init_weights, load_weights, predict, save_weights

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("semmatch")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, default=None, help="flat key=value file mirroring the flags")
    common.add_argument("--cell-size", type=int, default=16)

    p = argparse.ArgumentParser(prog="semmatch", description="weakly-supervised semantic matching")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--family", choices=syn.FAMILIES, default="affine")
    s.add_argument("--magnitude", type=float, default=0.2)
    s.add_argument("--keypoints", type=int, default=10)
    s.add_argument("--size", type=int, default=240)
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", parents=[common], help="train a regressor")
    t.add_argument("--data", type=Path, required=True, help="dataset TSV (gt transforms read from <dst>.gt.txt)")
    t.add_argument("--out", type=Path, required=True, help="DSMW checkpoint to write")
    t.add_argument("--log", type=Path, default=None, help="training log TSV")
    t.add_argument("--init", type=Path, default=None, help="start from this checkpoint")
    t.add_argument("--epochs", type=int, default=3)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--warm-up-steps", type=int, default=0)
    t.add_argument("--warm-up-lr", type=float, default=None)
    t.add_argument("--lambda-c", type=float, default=1.0)
    t.add_argument("--lambda-t", type=float, default=1.0)
    t.add_argument("--phi", type=float, default=1.0)
    t.add_argument("--cycle-sample", choices=("lattice", "random"), default="lattice")
    t.add_argument("--cycle-stage", choices=("cascade", "affine"), default="cascade")
    t.add_argument("--detach-masks", type=_bool, default=False)
    t.add_argument("--foreground", choices=("estimated", "ones"), default="estimated")
    t.add_argument("--swap-pairs", type=_bool, default=True)
    t.add_argument("--hidden", type=int, default=64)

    e = sub.add_parser("eval", parents=[common], help="PCK of a checkpoint on a dataset")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--weights", type=Path, default=None, help="checkpoint (identity model if omitted)")
    e.add_argument("--tau", type=float, action="append", default=None)
    e.add_argument("--box-side", choices=("target", "source"), default="target")
    e.add_argument("--features-dir", type=Path, default=None)
    e.add_argument("--out-tsv", type=Path, default=None)

    m = sub.add_parser("match", parents=[common], help="predict the transform for one pair")
    m.add_argument("image_a", type=Path)
    m.add_argument("image_b", type=Path)
    m.add_argument("--weights", type=Path, default=None)
    m.add_argument("--out", type=Path, required=True, help="output prefix")
    m.add_argument("--gt", type=Path, default=None, help="ground-truth transform text for the error sidecar")
    m.add_argument("--warped", type=_bool, default=False, help="also write the warped image A")

    w = sub.add_parser("warp", parents=[common], help="warp an image by a transform file")
    w.add_argument("image", type=Path)
    w.add_argument("--transform", type=Path, required=True)
    w.add_argument("--out", type=Path, required=True)

    k = sub.add_parser("masks", parents=[common], help="write foreground masks of a pair")
    k.add_argument("image_a", type=Path)
    k.add_argument("image_b", type=Path)
    k.add_argument("--out", type=Path, required=True, help="output prefix")
    return p


def _read_config(path: Path) -> dict[str, str]:
    out = {}
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; config entries are spliced in as flags ahead of the
    command-line ones so that explicit flags take precedence."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    cfg = _read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    flags = {a.dest: a.option_strings[-1] for a in sub._actions if a.option_strings}
    tokens = []
    for key, value in cfg.items():
        if key not in flags or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        tokens += [flags[key], value]
    i = argv.index(args.command)
    return parser.parse_args(argv[:i + 1] + tokens + argv[i + 1:])


def _print_config(args: argparse.Namespace) -> None:
    print("# resolved config")
    for key, val in sorted(vars(args).items()):
        print(f"{key}={val}")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _descriptor(args) -> DescriptorConfig:
    return DescriptorConfig(cell_size=args.cell_size)


def cmd_synth(args) -> None:
    out: Path = args.out
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2**31 - 1, args.count)
    records, files = [], []
    for i, s in enumerate(seeds):
        sp = syn.generate_pair(int(s), args.family, args.magnitude, size=args.size, n_keypoints=args.keypoints)
        stem = f"pair_{i:04d}"
        names = {"a": f"{stem}_a.ppm", "b": f"{stem}_b.ppm", "ma": f"{stem}_a_mask.ppm",
                 "mb": f"{stem}_b_mask.ppm", "gt": f"{stem}_b.gt.txt"}
        write_ppm(out / names["a"], sp.base)
        write_ppm(out / names["b"], sp.warped)
        write_ppm(out / names["ma"], sp.base_mask.astype(np.uint8) * 255)
        write_ppm(out / names["mb"], sp.warped_mask.astype(np.uint8) * 255)
        (out / names["gt"]).write_text(geo.to_text(sp.gt_transform), encoding="utf-8")
        records.append(ev.KeypointPairRecord(names["a"], names["b"], "synthetic",
                                             syn.bounding_box(sp.base_mask), syn.bounding_box(sp.warped_mask),
                                             sp.keypoints_src, sp.keypoints_dst))
        files.extend(names.values())
    if records:
        ev.write_dataset(records, out / "dataset.tsv")
        files.append("dataset.tsv")
    lines = []
    for name in files:
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        lines.append(f"{digest}  {name}\n")
    (out / "manifest.txt").write_text("".join(lines), encoding="utf-8")
    print(f"wrote {args.count} pairs to {out}")


def _training_set(data: Path, descriptor: DescriptorConfig) -> TrainingSet:
    records = ev.read_dataset(data)
    if not records:
        raise ValueError(f"{data}: no training pairs")
    root = data.parent
    index: dict[str, int] = {}
    feats = []

    def fid(name: str) -> int:
        if name not in index:
            path = root / name
            if not path.is_file():
                raise LookupError(f"no image found for id {name!r} (looked at {path})")
            feats.append(extract(read_image(path), descriptor))
            index[name] = len(feats) - 1
        return index[name]

    pairs = []
    cats: dict[str, int] = {}
    for r in records:
        gt_path = (root / r.dst).with_suffix(".gt.txt")
        gt = geo.from_text(gt_path.read_text(encoding="utf-8")) if gt_path.is_file() else None
        pairs.append(PairSample(fid(r.src), fid(r.dst), cats.setdefault(r.cls, len(cats)), gt))
    return TrainingSet(feats, pairs)


def cmd_train(args) -> None:
    ds = _training_set(args.data, _descriptor(args))
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                      weights=LossWeights(args.lambda_c, args.lambda_t), warm_up_steps=args.warm_up_steps,
                      lr=args.lr, warm_up_lr=args.warm_up_lr, phi=args.phi, cycle_sample=args.cycle_sample,
                      cycle_stage=args.cycle_stage, detach_masks=args.detach_masks,
                      foreground=args.foreground, swap_pairs=args.swap_pairs, hidden=args.hidden)
    init = load_weights(args.init) if args.init else None
    args.out.parent.mkdir(parents=True, exist_ok=True)
    weights, steps = train(ds, cfg, init)
    save_weights(weights, args.out)
    if args.log:
        write_log(steps, args.log)
    weak = [s for s in steps if s.phase == "weak"]
    if weak:
        print(f"final step {weak[-1].step}: total {weak[-1].total:.6f}")
    print(f"wrote {args.out}")


def _weights_or_identity(path, fm):
    if path is None:
        shape = fm.values.shape[:2]
        return init_weights(0, shape, shape)
    if not Path(path).is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    return load_weights(path)


def cmd_eval(args) -> None:
    records = ev.read_dataset(args.data)
    if not records:
        raise ValueError(f"{args.data}: dataset has no records")
    provider = ev.FeatureProvider(args.data.parent, _descriptor(args), args.features_dir)
    weights = _weights_or_identity(args.weights, provider(records[0].src)[0])
    reports = ev.evaluate_pairs(records, weights, args.tau or [0.05, 0.1, 0.15], provider, args.box_side)
    for rep in reports:
        print(rep.table())
    tsv = ev.reports_to_tsv(reports)
    if args.out_tsv:
        args.out_tsv.write_text(tsv, encoding="utf-8")
    print(tsv, end="")


def _read_checked(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    return read_image(path)


def overlay_svg(img_a: np.ndarray, img_b: np.ndarray, src_px: np.ndarray, dst_px: np.ndarray) -> str:
    """Side-by-side frame outlines with one coloured line per correspondence."""
    Ha, Wa = img_a.shape[:2]
    Hb, Wb = img_b.shape[:2]
    W, H = Wa + Wb, max(Ha, Hb)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect x="0" y="0" width="{Wa}" height="{Ha}" fill="none" stroke="black"/>',
             f'<rect x="{Wa}" y="0" width="{Wb}" height="{Hb}" fill="none" stroke="black"/>']
    n = max(len(src_px), 1)
    for i, ((x0, y0), (x1, y1)) in enumerate(zip(src_px, dst_px)):
        hue = int(360 * i / n)
        parts.append(f'<line class="match" x1="{x0:.3f}" y1="{y0:.3f}" x2="{x1 + Wa:.3f}" y2="{y1:.3f}" '
                     f'stroke="hsl({hue},80%,50%)" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_match(args) -> None:
    img_a, img_b = _read_checked(args.image_a), _read_checked(args.image_b)
    desc = _descriptor(args)
    fA, fB = extract(img_a, desc), extract(img_b, desc)
    weights = _weights_or_identity(args.weights, fA)
    T = geo.detached64(predict(correlate(fA, fB), fA, fB, weights))
    prefix: Path = args.out
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.txt").write_text(geo.to_text(T), encoding="utf-8")

    lattice = geo.grid_coordinates(10, 10)
    src_px = ev.norm_to_pixels(lattice, img_a.shape[:2])
    dst_px = ev.norm_to_pixels(geo.apply_np(T, lattice), img_b.shape[:2])
    Path(f"{prefix}.svg").write_text(overlay_svg(img_a, img_b, src_px, dst_px), encoding="utf-8")
    sidecar = {"lattice_points": len(lattice)}
    if args.gt is not None:
        gt = geo.from_text(args.gt.read_text(encoding="utf-8"))
        gt_px = ev.norm_to_pixels(geo.apply_np(gt, lattice), img_b.shape[:2])
        sidecar["mean_endpoint_error_px"] = float(np.linalg.norm(dst_px - gt_px, axis=1).mean())
    if args.warped:
        write_ppm(f"{prefix}_warped.ppm", syn.warp_image(img_a, T))
    Path(f"{prefix}.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    print(geo.to_text(T), end="")


def cmd_warp(args) -> None:
    img = _read_checked(args.image)
    T = geo.from_text(args.transform.read_text(encoding="utf-8"))
    write_ppm(args.out, syn.warp_image(img, T))


def cmd_masks(args) -> None:
    img_a, img_b = _read_checked(args.image_a), _read_checked(args.image_b)
    desc = _descriptor(args)
    fA, fB = extract(img_a, desc), extract(img_b, desc)
    for tag, S, fm in (("A", correlate(fA, fB), fA), ("B", correlate(fB, fA), fB)):
        m = foreground_mask(S).data.reshape(fm.h, fm.w).astype(np.float64)
        big = np.kron(np.clip(m, 0, 1), np.ones((desc.cell_size, desc.cell_size)))
        write_ppm(f"{args.out}_{tag}.ppm", np.rint(big * 255).astype(np.uint8))
    print(f"wrote {args.out}_A.ppm and {args.out}_B.ppm")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "match": cmd_match,
            "warp": cmd_warp, "masks": cmd_masks}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, argparse.ArgumentTypeError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _print_config(args)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except tc.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, LookupError, FormatError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""PCK evaluation, keypoint-pair datasets and warp-confusion rates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import geometry as geo
from .correlation import FeatureMap, correlate
from .features import DescriptorConfig, extract, load_features, read_image
from .regressor import RegressorWeights, predict

Box = tuple[float, float, float, float]


class DatasetFormatError(ValueError):
    """Malformed dataset TSV line."""


@dataclass
class KeypointPairRecord:
    """One annotated pair; keypoints and boxes ``(x, y, w, h)`` in pixel units."""

    src: str
    dst: str
    cls: str
    box_src: Box
    box_dst: Box
    kp_src: np.ndarray
    kp_dst: np.ndarray

    def __post_init__(self):
        self.kp_src = np.asarray(self.kp_src, dtype=np.float64).reshape(-1, 2)
        self.kp_dst = np.asarray(self.kp_dst, dtype=np.float64).reshape(-1, 2)
        if len(self.kp_src) < 1 or len(self.kp_src) != len(self.kp_dst):
            raise ValueError(f"{self.src} -> {self.dst}: need >= 1 matched keypoints, got "
                             f"{len(self.kp_src)} vs {len(self.kp_dst)}")
        for b in (self.box_src, self.box_dst):
            if len(b) != 4 or b[2] <= 0 or b[3] <= 0:
                raise ValueError(f"{self.src} -> {self.dst}: box {b} must be (x, y, w, h) with positive extent")


# ---------------------------------------------------------------------------
# dataset TSV
# ---------------------------------------------------------------------------


def _fmt_num(v: float) -> str:
    return repr(float(v))


def format_record(r: KeypointPairRecord) -> str:
    """``src TAB dst TAB class TAB x,y,w,h TAB x,y,w,h TAB k TAB x1 y1 x1* y1* ...``"""
    kps = " ".join(f"{_fmt_num(a)} {_fmt_num(b)} {_fmt_num(c)} {_fmt_num(d)}"
                   for (a, b), (c, d) in zip(r.kp_src, r.kp_dst))
    boxes = [",".join(_fmt_num(v) for v in b) for b in (r.box_src, r.box_dst)]
    return "\t".join([r.src, r.dst, r.cls, *boxes, str(len(r.kp_src)), kps])


def parse_record(line: str, lineno: int = 0) -> KeypointPairRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 7:
        raise DatasetFormatError(f"line {lineno}: expected 7 tab-separated fields, got {len(parts)}")
    src, dst, cls, bs, bd, k, kps = parts
    try:
        box_src = tuple(float(v) for v in bs.split(","))
        box_dst = tuple(float(v) for v in bd.split(","))
        n = int(k)
        nums = np.array([float(v) for v in kps.split()])
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from None
    if len(nums) != 4 * n:
        raise DatasetFormatError(f"line {lineno}: {n} keypoints need {4 * n} numbers, got {len(nums)}")
    quad = nums.reshape(n, 4)
    try:
        return KeypointPairRecord(src, dst, cls, box_src, box_dst, quad[:, :2], quad[:, 2:])
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from None


def write_dataset(records: Iterable[KeypointPairRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(format_record(r) + "\n")


def read_dataset(path) -> list[KeypointPairRecord]:
    with open(path, encoding="utf-8") as fh:
        return [parse_record(line, i + 1) for i, line in enumerate(fh) if line.strip()]


def convert_pf_pascal_csv(csv_path, out_path, class_names: Sequence[str] | None = None) -> int:
    """Convert a PF-PASCAL pair CSV (``source_image, target_image, class, XA, YA, XB, YB``
    with ``;``-separated coordinate lists) into the dataset TSV.

    The CSV carries no boxes, so each box is the extent of that image's
    keypoints (a documented stand-in for the annotation boxes).  Returns the
    number of records written.
    """
    records = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            xa, ya, xb, yb = ([float(v) for v in row[k].split(";") if v.strip()] for k in ("XA", "YA", "XB", "YB"))
            src = np.stack([xa, ya], axis=1)
            dst = np.stack([xb, yb], axis=1)
            cls = row["class"]
            if class_names is not None and cls.isdigit():
                cls = class_names[int(cls) - 1]
            records.append(KeypointPairRecord(row["source_image"], row["target_image"], cls,
                                              _extent(src), _extent(dst), src, dst))
    write_dataset(records, out_path)
    return len(records)


def _extent(kp: np.ndarray) -> Box:
    x0, y0 = kp.min(axis=0)
    x1, y1 = kp.max(axis=0)
    return (float(x0), float(y0), float(max(x1 - x0, 1.0)), float(max(y1 - y0, 1.0)))


# ---------------------------------------------------------------------------
# PCK
# ---------------------------------------------------------------------------


def pck_hits(warped, gt, box: Box, tau: float) -> np.ndarray:
    warped = np.asarray(warped, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(warped) != len(gt):
        raise ValueError(f"keypoint count mismatch: {len(warped)} warped vs {len(gt)} ground truth")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    thresh = tau * max(box[2], box[3])
    return np.linalg.norm(warped - gt, axis=1) <= thresh


def pck(warped, gt, box: Box, tau: float) -> float:
    """Fraction of keypoints within ``tau * max(box_w, box_h)`` (inclusive)."""
    hits = pck_hits(warped, gt, box, tau)
    return float(hits.mean()) if len(hits) else math.nan


@dataclass
class PckReport:
    tau: float
    per_class: dict[str, float]
    counts: dict[str, int]
    mean: float
    class_mean: float
    n_keypoints: int
    per_pair: list[float] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"PCK @ tau={self.tau:g}", f"{'class':<16}{'pck':>10}{'keypoints':>12}"]
        for cls in sorted(self.per_class):
            lines.append(f"{cls:<16}{self.per_class[cls]:>10.6f}{self.counts[cls]:>12d}")
        lines.append(f"{'mean (kp)':<16}{self.mean:>10.6f}{self.n_keypoints:>12d}")
        lines.append(f"{'mean (class)':<16}{self.class_mean:>10.6f}{len(self.per_class):>12d}")
        return "\n".join(lines)

    def tsv_rows(self) -> list[str]:
        rows = [f"{self.tau!r}\t{cls}\t{self.per_class[cls]!r}\t{self.counts[cls]}" for cls in sorted(self.per_class)]
        rows.append(f"{self.tau!r}\t__mean__\t{self.mean!r}\t{self.n_keypoints}")
        rows.append(f"{self.tau!r}\t__class_mean__\t{self.class_mean!r}\t{len(self.per_class)}")
        return rows


def reports_to_tsv(reports: Sequence[PckReport]) -> str:
    return "tau\tclass\tpck\tcount\n" + "".join(r + "\n" for rep in reports for r in rep.tsv_rows())


def reports_from_tsv(text: str) -> dict[float, dict[str, float]]:
    out: dict[float, dict[str, float]] = {}
    for line in text.splitlines()[1:]:
        if line.strip():
            tau, cls, value, _ = line.split("\t")
            out.setdefault(float(tau), {})[cls] = float(value)
    return out


def aggregate(hits: Sequence[np.ndarray], classes: Sequence[str], tau: float) -> PckReport:
    per_class_hits: dict[str, list[np.ndarray]] = {}
    for h, c in zip(hits, classes):
        per_class_hits.setdefault(c, []).append(h)
    per_class = {c: float(np.concatenate(hs).mean()) for c, hs in per_class_hits.items()}
    counts = {c: int(sum(len(h) for h in hs)) for c, hs in per_class_hits.items()}
    allh = np.concatenate(list(hits))
    return PckReport(tau, per_class, counts, float(allh.mean()),
                     float(np.mean(list(per_class.values()))), int(len(allh)),
                     [float(h.mean()) for h in hits])


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------


class FeatureProvider:
    """Look up ``(FeatureMap, (H, W))`` for an image id.

    Ids are paths relative to ``root``.  With ``feature_dir`` set, features
    come from ``feature_dir/<stem>.dsmf``; the image header still supplies the
    pixel size used for coordinate conversion.
    """

    def __init__(self, root=".", descriptor: DescriptorConfig = DescriptorConfig(), feature_dir=None):
        self.root = Path(root)
        self.descriptor = descriptor
        self.feature_dir = Path(feature_dir) if feature_dir is not None else None
        self._cache: dict[str, tuple[FeatureMap, tuple[int, int]]] = {}

    def __call__(self, image_id: str) -> tuple[FeatureMap, tuple[int, int]]:
        if image_id not in self._cache:
            path = self.root / image_id
            if not path.is_file():
                raise LookupError(f"no image found for id {image_id!r} (looked at {path})")
            img = read_image(path)
            if self.feature_dir is not None:
                fpath = self.feature_dir / (Path(image_id).stem + ".dsmf")
                if not fpath.is_file():
                    raise LookupError(f"no features for id {image_id!r} (looked at {fpath})")
                fm = load_features(fpath)
            else:
                fm = extract(img, self.descriptor)
            self._cache[image_id] = (fm, img.shape[:2])
        return self._cache[image_id]


def pixels_to_norm(xy, size) -> np.ndarray:
    H, W = size
    return geo.from_cells(xy, H, W)


def norm_to_pixels(xy, size) -> np.ndarray:
    H, W = size
    return geo.to_cells(xy, H, W)


def transfer_keypoints(T: geo.GeometricTransform, kp_src, src_size, dst_size) -> np.ndarray:
    """Source pixels -> normalized -> ``T`` -> target pixels."""
    return norm_to_pixels(geo.apply_np(geo.detached64(T), pixels_to_norm(kp_src, src_size)), dst_size)


def predict_pair(fA: FeatureMap, fB: FeatureMap, weights: RegressorWeights) -> geo.Cascade:
    return predict(correlate(fA, fB), fA, fB, weights)


def evaluate_pairs(records: Sequence[KeypointPairRecord], weights: RegressorWeights,
                   taus: Sequence[float] = (0.1,), features: Callable | None = None,
                   box_side: str = "target") -> list[PckReport]:
    """Warp source keypoints through the predicted A->B cascade; one report per tau."""
    if not records:
        raise ValueError("evaluate_pairs needs at least one record")
    if box_side not in ("target", "source"):
        raise ValueError(f"box_side must be target|source, got {box_side!r}")
    features = features or FeatureProvider()
    warped, boxes = [], []
    for r in records:
        fA, size_a = features(r.src)
        fB, size_b = features(r.dst)
        for kp, (H, W), name in ((r.kp_src, size_a, r.src), (r.kp_dst, size_b, r.dst)):
            if np.any(kp < 0) or np.any(kp[:, 0] > W - 1) or np.any(kp[:, 1] > H - 1):
                raise ValueError(f"{name}: keypoints fall outside the {W}x{H} image")
        T = predict_pair(fA, fB, weights)
        warped.append(transfer_keypoints(T, r.kp_src, size_a, size_b))
        boxes.append(r.box_dst if box_side == "target" else r.box_src)
    classes = [r.cls for r in records]
    return [aggregate([pck_hits(w, r.kp_dst, b, tau) for w, r, b in zip(warped, records, boxes)], classes, tau)
            for tau in taus]


# ---------------------------------------------------------------------------
# warp confusion
# ---------------------------------------------------------------------------


def warp_confusion(T: geo.GeometricTransform, source_mask: np.ndarray, target_mask: np.ndarray) -> dict[str, float]:
    """Rates at which source foreground lands on target background and vice versa.

    Each source cell is mapped through ``T`` and read at the nearest target
    cell; landing outside the target grid counts as background.  A rate is
    NaN when its source class is empty.
    """
    src = np.asarray(source_mask, dtype=bool)
    tgt = np.asarray(target_mask, dtype=bool)
    if src.ndim != 2 or src.shape != tgt.shape:
        raise ValueError(f"mask shapes differ: {src.shape} vs {tgt.shape}")
    h, w = src.shape
    cells = np.rint(geo.to_cells(geo.apply_np(geo.detached64(T), geo.grid_coordinates(h, w)), h, w)).astype(int)
    inside = (cells[:, 0] >= 0) & (cells[:, 0] < w) & (cells[:, 1] >= 0) & (cells[:, 1] < h)
    landed = np.zeros(h * w, dtype=bool)
    landed[inside] = tgt[cells[inside, 1], cells[inside, 0]]
    fg = src.ravel()
    fg_bg = float(np.mean(~landed[fg])) if fg.any() else math.nan
    bg_fg = float(np.mean(landed[~fg])) if (~fg).any() else math.nan
    return {"fg_to_bg": fg_bg, "bg_to_fg": bg_fg}

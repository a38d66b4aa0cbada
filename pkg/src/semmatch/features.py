"""Hand-crafted dense descriptors, the ``DSMF`` feature file format and PPM I/O.

Each grid cell gets an unsigned gradient-orientation histogram followed by
its mean RGB colour, L2-normalized.  External (e.g. CNN) features enter
through ``DSMF`` files instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correlation import FeatureMap
from .tensorcore import Tensor

FEATURE_MAGIC = b"DSMF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sBIIIB")
MAX_FEATURE_FLOATS = 1 << 28

MIN_IMAGE_SIDE = 16


class FormatError(ValueError):
    """Malformed binary or image file; ``offset`` is the byte where it went wrong."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DescriptorConfig:
    cell_size: int = 16
    orientation_bins: int = 8
    gradient_weight: float = 4.0
    resize: tuple[int, int] | None = (240, 240)

    @property
    def channels(self) -> int:
        return self.orientation_bins + 3


def check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if min(img.shape[:2]) < MIN_IMAGE_SIDE:
        raise ValueError(f"image sides must be >= {MIN_IMAGE_SIDE} pixels, got {img.shape[:2]}")
    return img


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize so that corner pixels map to corner pixels (matches the coordinate frame)."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    if (H, W) == (height, width):
        return np.asarray(image).copy()
    ys = np.linspace(0, H - 1, height)
    xs = np.linspace(0, W - 1, width)
    y0 = np.clip(np.floor(ys).astype(int), 0, H - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, W - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x0 + 1] * fx
    bot = img[y0 + 1][:, x0] * (1 - fx) + img[y0 + 1][:, x0 + 1] * fx
    out = top * (1 - fy) + bot * fy
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def image_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences in the interior, one-sided at the border."""
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) / 2
    gx[:, 0] = gray[:, 1] - gray[:, 0]
    gx[:, -1] = gray[:, -1] - gray[:, -2]
    gy[1:-1] = (gray[2:] - gray[:-2]) / 2
    gy[0] = gray[1] - gray[0]
    gy[-1] = gray[-1] - gray[-2]
    return gx, gy


def orientation_histograms(gray: np.ndarray, cell: int, bins: int) -> np.ndarray:
    """Per-cell unsigned orientation histograms, averaged over the cell's pixels.

    Bin ``k`` is centred on angle ``k*pi/bins``; each pixel splits its gradient
    magnitude linearly between the two nearest centres (wrapping at pi).
    """
    gx, gy = image_gradients(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    pos = ang / (np.pi / bins)
    lo = np.floor(pos).astype(int) % bins
    hi = (lo + 1) % bins
    frac = pos - np.floor(pos)
    hc, wc = gray.shape[0] // cell, gray.shape[1] // cell
    mag = mag[: hc * cell, : wc * cell]
    lo, hi, frac = (a[: hc * cell, : wc * cell] for a in (lo, hi, frac))
    cell_idx = (np.arange(hc * cell)[:, None] // cell) * wc + np.arange(wc * cell)[None, :] // cell
    hist = np.zeros((hc * wc, bins))
    np.add.at(hist, (cell_idx.ravel(), lo.ravel()), (mag * (1 - frac)).ravel())
    np.add.at(hist, (cell_idx.ravel(), hi.ravel()), (mag * frac).ravel())
    return hist.reshape(hc, wc, bins) / (cell * cell)


def extract_raw(image: np.ndarray, cfg: DescriptorConfig = DescriptorConfig()) -> np.ndarray:
    """Unnormalized ``(h, w, bins + 3)`` descriptor array (float64)."""
    img = check_image(image)
    if cfg.resize is not None:
        img = resize_bilinear(img, *cfg.resize)
    rgb = img.astype(np.float64) / 255.0
    H, W = rgb.shape[:2]
    hc, wc = H // cfg.cell_size, W // cfg.cell_size
    if hc < 2 or wc < 2:
        raise ValueError(f"image of {H}x{W} pixels gives fewer than 2x2 cells of {cfg.cell_size} px")
    hist = orientation_histograms(rgb.mean(axis=2), cfg.cell_size, cfg.orientation_bins)
    c = cfg.cell_size
    color = rgb[: hc * c, : wc * c].reshape(hc, c, wc, c, 3).mean(axis=(1, 3))
    return np.concatenate([cfg.gradient_weight * hist, color], axis=2)


def normalize_cells(raw: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    return np.where(n > 0, raw / np.where(n > 0, n, 1), 0)


def extract(image: np.ndarray, cfg: DescriptorConfig = DescriptorConfig(), dtype=np.float32) -> FeatureMap:
    """Dense descriptor map with unit-norm (or zero) cells."""
    return FeatureMap(Tensor(normalize_cells(extract_raw(image, cfg)), dtype=dtype))


# ---------------------------------------------------------------------------
# DSMF feature files
# ---------------------------------------------------------------------------


def save_features(fm: FeatureMap | np.ndarray, path, normalized: bool = True) -> None:
    """Write ``magic, version, u32 h, w, d, flag`` then little-endian float32 values."""
    arr = fm.values.data if isinstance(fm, FeatureMap) else np.asarray(fm)
    if arr.ndim != 3:
        raise ValueError(f"feature array must be (h, w, d), got {arr.shape}")
    h, w, d = arr.shape
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, h, w, d, 1 if normalized else 0)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def parse_features(buf: bytes) -> tuple[np.ndarray, bool]:
    """Decode a ``DSMF`` buffer into ``(array, normalized_flag)``."""
    if len(buf) < _FEATURE_HEADER.size:
        raise FormatError(f"header needs {_FEATURE_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, h, w, d, flag = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if flag not in (0, 1):
        raise FormatError(f"bad normalization flag {flag}", _FEATURE_HEADER.size - 1)
    count = h * w * d
    if count > MAX_FEATURE_FLOATS:
        raise FormatError(f"declared extents {h}x{w}x{d} overflow the {MAX_FEATURE_FLOATS}-float limit", 5)
    start = _FEATURE_HEADER.size
    need = count * 4
    have = len(buf) - start
    if have < need:
        raise FormatError(f"truncated payload: {h}x{w}x{d} needs {need} bytes from offset {start}, "
                          f"found {have}", start + have)
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", start + need)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(h, w, d)
    return arr.astype(np.float32), bool(flag)


def load_features(path) -> FeatureMap:
    """Load a ``DSMF`` file; raw (flag 0) maps are re-normalized per cell."""
    arr, normalized = parse_features(Path(path).read_bytes())
    if not normalized:
        arr = normalize_cells(arr.astype(np.float64)).astype(np.float32)
    return FeatureMap(Tensor(arr, dtype=np.float32))


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8) if img.dtype != np.uint8 else img
    H, W = img.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + img.tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    i = 2
    while len(tokens) < count:
        if i >= len(buf):
            raise FormatError("unexpected end of PPM header", i)
        ch = buf[i:i + 1]
        if ch == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and buf[j:j + 1].isdigit():
                j += 1
            if j == i:
                raise FormatError(f"bad PPM header token {buf[i:i + 8]!r}", i)
            tokens.append(int(buf[i:j]))
            i = j
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval 255) PPM into an ``(H, W, 3)`` uint8 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {buf[:2]!r})", 0)
    (W, H, maxval), start = _ppm_tokens(buf, 3)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}", start)
    need = W * H * 3
    if len(buf) - start < need:
        raise FormatError(f"{path}: truncated pixel data", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(H, W, 3).copy()


def read_image(path) -> np.ndarray:
    """PPM natively; other formats through Pillow when it is installed."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"P6":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise FormatError(f"{path}: unsupported image format (install Pillow for non-PPM input)", 0) from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)

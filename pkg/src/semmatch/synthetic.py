"""Synthetic image pairs with exactly known warps.

A base image is a smooth coloured background with a textured elliptical
foreground object.  The warped image is the base resampled under the inverse
of a ground-truth transform ``T`` (so ``T`` maps base pixels to warped
pixels); keypoints are drawn on the object and pushed through ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .features import resize_bilinear

FAMILIES = ("translation", "affine", "tps", "cascade")
#: Largest magnitude per family; larger values can push >30% of the frame out of view.
MAX_MAGNITUDE = {"translation": 0.3, "affine": 0.25, "tps": 0.25, "cascade": 0.25}
MIN_VISIBLE = 0.7


@dataclass
class SyntheticPair:
    base: np.ndarray
    warped: np.ndarray
    gt_transform: geo.GeometricTransform
    base_mask: np.ndarray
    warped_mask: np.ndarray
    keypoints_src: np.ndarray
    keypoints_dst: np.ndarray
    seed: int = 0
    family: str = "affine"

    @property
    def size(self) -> tuple[int, int]:
        return self.base.shape[:2]


def pixel_to_norm(xy, h: int, w: int) -> np.ndarray:
    return geo.from_cells(xy, h, w)


def norm_to_pixel(xy, h: int, w: int) -> np.ndarray:
    return geo.to_cells(xy, h, w)


def bounding_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """``(x, y, w, h)`` of the True region, pixel units (``w``/``h`` inclusive extents)."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return (0.0, 0.0, float(mask.shape[1]), float(mask.shape[0]))
    return (float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def _smooth_field(rng: np.random.Generator, size: int, coarse: int, channels: int = 3) -> np.ndarray:
    grid = rng.uniform(0, 1, (coarse, coarse, channels))
    return resize_bilinear(grid, size, size)


def render_base(rng: np.random.Generator, size: int = 240) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image uint8, foreground mask bool)``."""
    bg = 0.15 + 0.7 * _smooth_field(rng, size, int(rng.integers(3, 6)))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1

    cx, cy = rng.uniform(-0.15, 0.15, 2)
    rx, ry = rng.uniform(0.4, 0.6, 2)
    ang = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
    v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
    mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0

    fg = 0.1 + 0.8 * _smooth_field(rng, size, int(rng.integers(5, 9)))
    freq = rng.uniform(6, 14)
    theta = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(freq * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)))
    fg = fg * (0.55 + 0.45 * stripes[..., None])
    img = np.where(mask[..., None], fg, bg)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), mask


def sample_transform(rng: np.random.Generator, family: str, magnitude: float) -> geo.GeometricTransform:
    """Draw a transform uniformly from the family's magnitude box around identity."""
    m = magnitude
    if family == "translation":
        tx, ty = rng.uniform(-m, m, 2)
        return geo.AffineParams.translation(tx, ty)
    if family == "affine":
        return geo.AffineParams.from_values(np.asarray(geo.IDENTITY_AFFINE) + rng.uniform(-m, m, 6))
    if family == "tps":
        return geo.solve_tps_coefficients(rng.uniform(-m, m, (9, 2)))
    if family == "cascade":
        aff = geo.AffineParams.from_values(np.asarray(geo.IDENTITY_AFFINE) + rng.uniform(-m, m, 6))
        return geo.Cascade(aff, geo.solve_tps_coefficients(rng.uniform(-m / 2, m / 2, (9, 2))))
    raise ValueError(f"unknown warp family {family!r}; choose from {FAMILIES}")


def visible_fraction(T: geo.GeometricTransform, n: int = 24) -> float:
    """Share of the warped frame whose preimage lies inside the base frame."""
    q = geo.grid_coordinates(n, n)
    src = geo.invert_points(T, q)
    return float(np.mean(np.all(np.abs(src) <= 1.0 + 1e-9, axis=1)))


def warp_image(image: np.ndarray, T: geo.GeometricTransform, fill: float = 0.0) -> np.ndarray:
    """Resample ``image`` so that base pixel ``p`` lands at ``T(p)``."""
    H, W = image.shape[:2]
    q = geo.grid_coordinates(H, W)
    src = norm_to_pixel(geo.invert_points(T, q), H, W).reshape(H, W, 2)
    out = geo.sample_image(image if image.ndim == 3 else image[..., None], src, fill)
    if image.ndim == 2:
        out = out[..., 0]
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def _augment(rng: np.random.Generator, img, mask, hflip: bool, crop: bool):
    if hflip and rng.uniform() < 0.5:
        img, mask = img[:, ::-1].copy(), mask[:, ::-1].copy()
    if crop:
        H, W = mask.shape
        c = rng.uniform(0.0, 0.1, 4)
        y0, y1 = int(c[0] * H), H - int(c[1] * H)
        x0, x1 = int(c[2] * W), W - int(c[3] * W)
        img = resize_bilinear(img[y0:y1, x0:x1], H, W)
        mask = resize_bilinear(mask[y0:y1, x0:x1].astype(np.float64)[..., None], H, W)[..., 0] >= 0.5
    return img, mask


def _keypoints(rng, mask, T, n, H, W):
    ys, xs = np.nonzero(mask)
    order = rng.permutation(len(xs))
    src = np.stack([xs[order], ys[order]], axis=1).astype(np.float64)
    dst = norm_to_pixel(geo.apply_np(T, pixel_to_norm(src, H, W)), H, W)
    inside = (dst[:, 0] >= 0) & (dst[:, 0] <= W - 1) & (dst[:, 1] >= 0) & (dst[:, 1] <= H - 1)
    return src[inside][:n], dst[inside][:n]


def generate_pair(seed: int, family: str = "affine", magnitude: float = 0.2, size: int = 240,
                  n_keypoints: int = 10, hflip: bool = False, crop: bool = False,
                  base: tuple[np.ndarray, np.ndarray] | None = None) -> SyntheticPair:
    """Deterministic synthetic pair for ``seed``.

    ``base`` optionally supplies ``(image, mask)`` so several warps can share
    one base (a synthetic "category").
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown warp family {family!r}; choose from {FAMILIES}")
    if not 0 <= magnitude <= MAX_MAGNITUDE[family]:
        raise ValueError(f"magnitude {magnitude} outside [0, {MAX_MAGNITUDE[family]}] for {family}")
    rng = np.random.default_rng(seed)
    if base is None:
        img, mask = render_base(rng, size)
        img, mask = _augment(rng, img, mask, hflip, crop)
    else:
        img, mask = base
    H, W = mask.shape
    for _ in range(100):
        T = sample_transform(rng, family, magnitude)
        if magnitude == 0 or visible_fraction(T) >= MIN_VISIBLE:
            break
    else:  # pragma: no cover - the magnitude caps make this unreachable in practice
        raise RuntimeError("could not draw a transform keeping enough of the frame in view")
    if magnitude == 0:
        warped, wmask = img.copy(), mask.copy()
    else:
        warped = warp_image(img, T)
        wmask = warp_image(mask.astype(np.float64), T) >= 0.5
    src, dst = _keypoints(rng, mask, T, n_keypoints, H, W)
    return SyntheticPair(img, warped, T, mask, wmask, src, dst, seed, family)


def generate_triplet(seed: int, family: str = "affine", magnitude: float = 0.2, size: int = 240,
                     n_keypoints: int = 10) -> tuple[SyntheticPair, SyntheticPair]:
    """Two warps of one base: pairs ``(A, B)`` and ``(A, C)`` sharing image A."""
    rng = np.random.default_rng(seed)
    base = render_base(rng, size)
    s1, s2 = (int(s) for s in rng.integers(0, 2**31 - 1, 2))
    return (generate_pair(s1, family, magnitude, size, n_keypoints, base=base),
            generate_pair(s2, family, magnitude, size, n_keypoints, base=base))


def mask_to_grid(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sample a pixel mask at the normalized positions of an ``h x w`` grid."""
    H, W = mask.shape
    px = np.rint(norm_to_pixel(geo.grid_coordinates(h, w), H, W)).astype(int)
    return mask[px[:, 1], px[:, 0]].reshape(h, w)

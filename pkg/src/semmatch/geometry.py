"""Affine and thin-plate-spline transforms in the normalized frame [-1, 1]^2.

Coordinates are ``(x, y)`` pairs.  Cell ``(i, j)`` of an ``h x w`` grid sits at
``x = 2j/(w-1) - 1``, ``y = 2i/(h-1) - 1``; image pixels use the same rule with
pixel indices, so a transform estimated on a feature grid applies unchanged to
the image it came from.

Transform parameters are :class:`~semmatch.tensorcore.Tensor` objects, so
``apply`` is differentiable in them (and in the input points) whenever they
require gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


class SingularTransformError(ValueError):
    """Affine map is (numerically) not invertible."""


class TransformFormatError(ValueError):
    """Malformed transform text record."""


IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def _control_points() -> np.ndarray:
    ys, xs = np.meshgrid(np.linspace(-1, 1, 3), np.linspace(-1, 1, 3), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


#: Fixed 3x3 TPS control grid, row-major from the top-left corner.
CONTROL_POINTS = _control_points()


def _kernel_np(sq: np.ndarray) -> np.ndarray:
    out = np.zeros_like(sq)
    pos = sq > 0
    out[pos] = sq[pos] * np.log(sq[pos])
    return out


def _system_matrix() -> np.ndarray:
    c = CONTROL_POINTS
    sq = ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    P = np.hstack([np.ones((9, 1)), c])
    L = np.zeros((12, 12))
    L[:9, :9] = _kernel_np(sq)
    L[:9, 9:] = P
    L[9:, :9] = P.T
    return L


def _solver() -> np.ndarray:
    L = _system_matrix()
    cond = np.linalg.cond(L)
    assert np.isfinite(cond) and cond < 1e8, "TPS system matrix is singular"
    # coefficients = L^-1 [targets; 0]; only the first 9 columns ever act
    return np.linalg.inv(L)[:, :9]


#: (12, 9) map from control-point targets to [kernel weights (9); a0, ax, ay].
TPS_SOLVER = _solver()


# ---------------------------------------------------------------------------
# transform value objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    """Six parameters ``(a11, a12, tx, a21, a22, ty)`` as a length-6 tensor."""

    theta: Tensor

    def __post_init__(self):
        if self.theta.shape != (6,):
            raise tc.ShapeError(f"affine parameters must have shape (6,), got {self.theta.shape}")

    @classmethod
    def from_values(cls, values=IDENTITY_AFFINE, requires_grad=False, dtype=None) -> "AffineParams":
        return cls(Tensor(np.asarray(values, dtype=dtype or np.float64), requires_grad, dtype=dtype))

    @classmethod
    def identity(cls, dtype=None) -> "AffineParams":
        return cls.from_values(IDENTITY_AFFINE, dtype=dtype)

    @classmethod
    def translation(cls, tx: float, ty: float, dtype=None) -> "AffineParams":
        return cls.from_values((1.0, 0.0, tx, 0.0, 1.0, ty), dtype=dtype)

    @property
    def values(self) -> np.ndarray:
        return self.theta.data.astype(np.float64)

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix (float64)."""
        m = np.eye(3)
        m[:2, :] = self.values.reshape(2, 3)
        return m

    def determinant(self) -> float:
        a11, a12, _, a21, a22, _ = self.values
        return float(a11 * a22 - a12 * a21)


@dataclass(frozen=True)
class TpsParams:
    """Displacements of the nine control points plus the solved coefficients.

    ``coefficients`` is a (12, 2) tensor: rows 0..8 are kernel weights, rows
    9..11 are the affine part ``(a0, ax, ay)`` for each output axis.  Build
    instances with :func:`solve_tps_coefficients`.
    """

    displacements: Tensor
    coefficients: Tensor | None = None

    @property
    def kernel_weights(self) -> np.ndarray:
        self._require_solved()
        return self.coefficients.data[:9].astype(np.float64)

    @property
    def affine_part(self) -> np.ndarray:
        """Affine part in ``(a11, a12, tx, a21, a22, ty)`` order."""
        self._require_solved()
        a = self.coefficients.data[9:].astype(np.float64)
        return np.array([a[1, 0], a[2, 0], a[0, 0], a[1, 1], a[2, 1], a[0, 1]])

    def _require_solved(self):
        if self.coefficients is None:
            raise ValueError("TPS coefficients have not been solved")

    @classmethod
    def zero(cls, dtype=None) -> "TpsParams":
        return solve_tps_coefficients(Tensor(np.zeros((9, 2)), dtype=dtype or np.float64))


@dataclass(frozen=True)
class Cascade:
    """Affine stage followed by a TPS stage acting on the affinely-warped frame."""

    affine: AffineParams
    tps: TpsParams


GeometricTransform = Union[AffineParams, TpsParams, Cascade]


def solve_tps_coefficients(displacements) -> TpsParams:
    """Fit the TPS that moves each control point ``c_i`` to ``c_i + d_i``."""
    d = tc.as_tensor(displacements if not isinstance(displacements, np.ndarray)
                     else np.asarray(displacements, dtype=np.float64))
    if d.shape != (9, 2):
        raise tc.ShapeError(f"TPS displacements must have shape (9, 2), got {d.shape}")
    if not np.all(np.isfinite(d.data)):
        raise tc.NumericError("TPS displacements must be finite")
    targets = tc.add(d, CONTROL_POINTS.astype(d.dtype))
    coeffs = tc.matmul(TPS_SOLVER.astype(d.dtype), targets)
    return TpsParams(d, coeffs)


def identity(dtype=None) -> Cascade:
    return Cascade(AffineParams.identity(dtype), TpsParams.zero(dtype))


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def _points(p, like: Tensor) -> Tensor:
    if isinstance(p, Tensor):
        return p if p.ndim == 2 else tc.reshape(p, (1, 2))
    arr = np.asarray(p, dtype=like.dtype)
    return Tensor(arr.reshape(-1, 2), dtype=like.dtype)


def _apply_affine(T: AffineParams, pts: Tensor) -> Tensor:
    n = pts.shape[0]
    homo = tc.concat([pts, np.ones((n, 1), dtype=pts.dtype)], axis=1)
    return tc.matmul(homo, tc.transpose(tc.reshape(T.theta, (2, 3))))


def _apply_tps(T: TpsParams, pts: Tensor) -> Tensor:
    if T.coefficients is None:
        raise ValueError("TPS coefficients have not been solved")
    n = pts.shape[0]
    diff = tc.sub(tc.reshape(pts, (n, 1, 2)), CONTROL_POINTS.reshape(1, 9, 2).astype(pts.dtype))
    U = tc.tps_kernel(tc.sum_reduce(tc.square(diff), axis=2))
    basis = tc.concat([U, np.ones((n, 1), dtype=pts.dtype), pts], axis=1)
    return tc.matmul(basis, T.coefficients)


def apply(T: GeometricTransform, p) -> Tensor:
    """Map points (``(2,)`` or ``(N, 2)``) through ``T``; returns an ``(N, 2)`` tensor."""
    ref = T.theta if isinstance(T, AffineParams) else (
        T.coefficients if isinstance(T, TpsParams) else T.affine.theta)
    if ref is None:
        raise ValueError("TPS coefficients have not been solved")
    pts = _points(p, ref)
    if isinstance(T, AffineParams):
        return _apply_affine(T, pts)
    if isinstance(T, TpsParams):
        return _apply_tps(T, pts)
    if isinstance(T, Cascade):
        return _apply_tps(T.tps, _apply_affine(T.affine, pts))
    raise TypeError(f"not a geometric transform: {type(T).__name__}")


def compose_apply(T2: GeometricTransform, T1: GeometricTransform, p) -> Tensor:
    """``T2(T1(p))`` by chaining; no composed parameter object exists for TPS."""
    return apply(T2, apply(T1, p))


def apply_np(T: GeometricTransform, p) -> np.ndarray:
    """Convenience: apply to plain coordinates and return float64 values."""
    return apply(T, np.asarray(p, dtype=np.float64)).data.astype(np.float64)


def invert(T: AffineParams) -> AffineParams:
    """Analytic inverse of an affine map (differentiable in its parameters)."""
    det = T.determinant()
    if not np.isfinite(det) or abs(det) <= 1e-8:
        raise SingularTransformError(f"affine determinant {det:g} is too close to zero")
    th = T.theta
    a11, a12, tx, a21, a22, ty = (th[k] for k in range(6))
    det_t = tc.sub(tc.mul(a11, a22), tc.mul(a12, a21))
    b11 = tc.div(a22, det_t)
    b12 = tc.div(tc.neg(a12), det_t)
    b21 = tc.div(tc.neg(a21), det_t)
    b22 = tc.div(a11, det_t)
    btx = tc.neg(tc.add(tc.mul(b11, tx), tc.mul(b12, ty)))
    bty = tc.neg(tc.add(tc.mul(b21, tx), tc.mul(b22, ty)))
    return AffineParams(tc.stack([b11, b12, btx, b21, b22, bty]))


def affine_from_matrix(m: np.ndarray, dtype=None) -> AffineParams:
    return AffineParams.from_values(np.asarray(m, dtype=np.float64)[:2, :].ravel(), dtype=dtype)


# ---------------------------------------------------------------------------
# grids and sampling
# ---------------------------------------------------------------------------


def grid_coordinates(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Normalized ``(x, y)`` of every cell of an ``h x w`` grid, row-major, shape (h*w, 2)."""
    if h < 2 or w < 2:
        raise ValueError(f"grid needs at least 2x2 cells, got {h}x{w}")
    ys, xs = np.meshgrid(2 * np.arange(h) / (h - 1) - 1, 2 * np.arange(w) / (w - 1) - 1, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(dtype)


def to_cells(xy, h: int, w: int):
    """Normalized coordinates to fractional ``(col, row)`` cell (or pixel) units."""
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([(xy[..., 0] + 1) * (w - 1) / 2, (xy[..., 1] + 1) * (h - 1) / 2], axis=-1)


def from_cells(cr, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`to_cells`."""
    cr = np.asarray(cr, dtype=np.float64)
    return np.stack([2 * cr[..., 0] / (w - 1) - 1, 2 * cr[..., 1] / (h - 1) - 1], axis=-1)


def grid_apply(T: GeometricTransform, h: int, w: int, units: str = "cells") -> Tensor:
    """Map every cell of an ``h x w`` grid through ``T``.

    Returns an ``(h, w, 2)`` field of ``(x, y)``; ``units="cells"`` converts the
    result back to column/row units of the same grid, ``"normalized"`` keeps it
    in [-1, 1] coordinates.
    """
    ref = T.theta if isinstance(T, AffineParams) else (
        T.coefficients if isinstance(T, TpsParams) else T.affine.theta)
    out = apply(T, grid_coordinates(h, w, dtype=ref.dtype))
    if units == "cells":
        scale = np.array([(w - 1) / 2, (h - 1) / 2], dtype=out.dtype)
        out = tc.mul(tc.add(out, 1.0), scale)
    elif units != "normalized":
        raise ValueError(f"unknown units {units!r}")
    return tc.reshape(out, (h, w, 2))


def bilinear_sample(values: Tensor, h: int, w: int, xy: Tensor) -> Tensor:
    """Differentiable bilinear lookup with zero padding.

    ``values`` is an ``(h*w, d)`` row-major table of grid cells; ``xy`` holds
    ``(N, 2)`` normalized sample locations.  Returns ``(N, d)``.  Gradients
    reach both the table and the sample locations.
    """
    xy = tc.as_tensor(xy, like=values)
    sx = (w - 1) / 2
    sy = (h - 1) / 2
    cx = tc.mul(tc.add(xy[:, 0], 1.0), sx)
    cy = tc.mul(tc.add(xy[:, 1], 1.0), sy)
    x0 = np.floor(cx.data)
    y0 = np.floor(cy.data)
    fx = tc.sub(cx, x0)
    fy = tc.sub(cy, y0)
    out = None
    for dy, wy in ((0, tc.sub(1.0, fy)), (1, fy)):
        for dx, wx in ((0, tc.sub(1.0, fx)), (1, fx)):
            xi = x0.astype(np.int64) + dx
            yi = y0.astype(np.int64) + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            flat = np.where(valid, yi * w + xi, 0)
            wgt = tc.mul(tc.mul(wx, wy), valid.astype(values.dtype))
            term = tc.mul(tc.gather(values, flat), tc.reshape(wgt, (-1, 1)))
            out = term if out is None else tc.add(out, term)
    return out


def sample_image(image: np.ndarray, xy_pixels: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Bilinear sampling of an ``(H, W, C)`` array at fractional pixel ``(x, y)``.

    ``xy_pixels`` has shape ``(..., 2)``; samples outside the image use ``fill``.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    x = xy_pixels[..., 0]
    y = xy_pixels[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    out = np.zeros(x.shape + img.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            v = img[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
            v = np.where(valid[..., None], v, fill)
            out += wx * wy * v
    return out


def invert_points(T: GeometricTransform, q: np.ndarray, iters: int = 30, tol: float = 1e-10) -> np.ndarray:
    """Numerically solve ``T(p) = q`` for each row of ``q`` (Newton, float64).

    Used to resample images under transforms that have no closed-form
    inverse.  The starting guess is ``q`` itself, which suits the mild warps
    this package generates.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, 2)
    if isinstance(T, AffineParams):
        return apply_np(invert(_as64(T)), q)
    T = _as64(T)
    p = q.copy()
    h = 1e-6
    for _ in range(iters):
        r = apply_np(T, p) - q
        if np.max(np.abs(r)) < tol:
            break
        jx = (apply_np(T, p + [h, 0]) - apply_np(T, p - [h, 0])) / (2 * h)
        jy = (apply_np(T, p + [0, h]) - apply_np(T, p - [0, h])) / (2 * h)
        a, b, c, d = jx[:, 0], jy[:, 0], jx[:, 1], jy[:, 1]
        det = a * d - b * c
        p = p - np.stack([(d * r[:, 0] - b * r[:, 1]) / det, (-c * r[:, 0] + a * r[:, 1]) / det], axis=1)
    return p


def _as64(T: GeometricTransform) -> GeometricTransform:
    """Detached float64 copy."""
    if isinstance(T, AffineParams):
        return AffineParams.from_values(T.values)
    if isinstance(T, TpsParams):
        return solve_tps_coefficients(T.displacements.data.astype(np.float64))
    return Cascade(_as64(T.affine), _as64(T.tps))


detached64 = _as64


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64).ravel())


def to_text(T: GeometricTransform) -> str:
    """``affine ...`` / ``tps ...`` / ``cascade`` + both lines, newline terminated."""
    if isinstance(T, AffineParams):
        return f"affine {_fmt(T.values)}\n"
    if isinstance(T, TpsParams):
        return f"tps {_fmt(T.displacements.data)}\n"
    if isinstance(T, Cascade):
        return "cascade\n" + to_text(T.affine) + to_text(T.tps)
    raise TypeError(f"not a geometric transform: {type(T).__name__}")


def _parse_line(line: str, lineno: int):
    parts = line.split()
    kind, nums = parts[0], parts[1:]
    want = {"affine": 6, "tps": 18}.get(kind)
    if want is None:
        raise TransformFormatError(f"line {lineno}: unknown transform kind {kind!r}")
    if len(nums) != want:
        raise TransformFormatError(f"line {lineno}: {kind} needs {want} numbers, got {len(nums)}")
    try:
        vals = np.array([float(v) for v in nums])
    except ValueError as exc:
        raise TransformFormatError(f"line {lineno}: {exc}") from None
    if kind == "affine":
        return AffineParams.from_values(vals)
    return solve_tps_coefficients(vals.reshape(9, 2))


def from_text(text: str) -> GeometricTransform:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TransformFormatError("empty transform record")
    if lines[0].split()[0] == "cascade":
        if len(lines) != 3 or lines[0].strip() != "cascade":
            raise TransformFormatError("cascade record needs exactly an affine and a tps line")
        aff = _parse_line(lines[1], 2)
        tps = _parse_line(lines[2], 3)
        if not isinstance(aff, AffineParams) or not isinstance(tps, TpsParams):
            raise TransformFormatError("cascade record must list affine then tps")
        return Cascade(aff, tps)
    if len(lines) != 1:
        raise TransformFormatError(f"expected a single transform line, got {len(lines)}")
    return _parse_line(lines[0], 1)

"""Dense feature correlation and foreground-mask estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


@dataclass(frozen=True)
class FeatureMap:
    """``h x w`` grid of ``d``-dimensional descriptors.

    ``values`` is an ``(h, w, d)`` tensor.  Maps built by :meth:`from_array`
    (or by the feature extractor) carry unit-norm or all-zero cells.
    """

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise tc.ShapeError(f"feature map must be (h, w, d), got {self.values.shape}")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_array(cls, arr, normalize: bool = True, requires_grad: bool = False, dtype=None) -> "FeatureMap":
        t = Tensor(np.asarray(arr), requires_grad=requires_grad, dtype=dtype)
        return cls(tc.l2_normalize(t, axis=-1) if normalize else t)

    def table(self) -> Tensor:
        """Row-major ``(h*w, d)`` view."""
        return tc.reshape(self.values, (self.h * self.w, self.d))


@dataclass(frozen=True)
class CorrelationMap:
    """Similarity of every source cell with every target cell.

    ``values`` has shape ``(h_a*w_a, h_b*w_b)``; entry ``(i*w_a + j, s*w_b + t)``
    is ``S(i, j, s, t)``.  :meth:`as_4d` gives the ``(h_a, w_a, h_b, w_b)`` layout.
    """

    values: Tensor
    source_shape: tuple[int, int]
    target_shape: tuple[int, int]

    def as_4d(self) -> np.ndarray:
        return self.values.data.reshape(*self.source_shape, *self.target_shape)


def correlate(fA: FeatureMap, fB: FeatureMap, normalization: str = "cosine") -> CorrelationMap:
    """``S(p, q) = max(0, <fA(p), fB(q)>)`` on per-cell unit vectors.

    ``normalization="volume"`` instead takes raw inner products and divides
    each source cell's row by its L2 norm over all target cells before the
    ReLU (the normalization used by some reference code); values then no
    longer lie in [0, 1] in general.
    """
    if fA.d != fB.d:
        raise tc.ShapeError(f"channel mismatch: {fA.values.shape} vs {fB.values.shape}")
    a, b = fA.table(), fB.table()
    if normalization == "cosine":
        sim = tc.matmul(tc.l2_normalize(a, axis=1), tc.transpose(tc.l2_normalize(b, axis=1)))
    elif normalization == "volume":
        sim = tc.l2_normalize(tc.matmul(a, tc.transpose(b)), axis=1)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return CorrelationMap(tc.relu(sim), (fA.h, fA.w), (fB.h, fB.w))


def reshape_for_regressor(S: CorrelationMap) -> Tensor:
    """``(h_a, w_a, h_b*w_b)`` relabeling; entry ``(i, j, k) = S(i, j, k // w_b, k % w_b)``."""
    ha, wa = S.source_shape
    hb, wb = S.target_shape
    return tc.reshape(S.values, (ha, wa, hb * wb))


def from_regressor_layout(t: Tensor, target_shape: tuple[int, int]) -> CorrelationMap:
    ha, wa, _ = t.shape
    hb, wb = target_shape
    return CorrelationMap(tc.reshape(t, (ha * wa, hb * wb)), (ha, wa), (hb, wb))


def foreground_mask(S: CorrelationMap, detach: bool = False) -> Tensor:
    """``M(p) = max_q S(p, q)`` as an ``(h_a*w_a,)`` tensor (row-major cells).

    ``detach=True`` returns a constant, so no gradient passes through the max.
    """
    m = tc.max_reduce(S.values, axis=1)
    return m.detach() if detach else m

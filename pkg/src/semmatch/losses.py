"""Weak-supervision objective: foreground-guided matching plus cycle terms.

Correspondence masks threshold distances in target-grid cell units; the cycle
and transitivity terms measure Euclidean error in normalized coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import tensorcore as tc
from .correlation import CorrelationMap
from .geometry import Cascade, GeometricTransform
from .tensorcore import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_t: float = 1.0

    def __post_init__(self):
        for name in ("lambda_c", "lambda_t"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class CoordinateSample:
    """Normalized coordinates at which the cycle terms are evaluated.

    ``points_a`` lives in image A's frame, ``points_b`` in image B's.
    """

    points_a: np.ndarray
    points_b: np.ndarray

    def __post_init__(self):
        if len(self.points_a) == 0 or len(self.points_b) == 0:
            raise ValueError("coordinate sample must be nonempty")

    @classmethod
    def lattice(cls, n: int = 10) -> "CoordinateSample":
        """Uniform ``n x n`` lattice over [-1, 1]^2 shared by both frames."""
        pts = geo.grid_coordinates(n, n)
        return cls(pts, pts)

    @classmethod
    def random(cls, rng: np.random.Generator, shape_a, shape_b, n: int = 100) -> "CoordinateSample":
        """``n`` distinct cells drawn from each feature grid."""
        def pick(shape):
            grid = geo.grid_coordinates(*shape)
            idx = rng.choice(len(grid), size=min(n, len(grid)), replace=False)
            return grid[np.sort(idx)]
        return cls(pick(shape_a), pick(shape_b))


def _ref_dtype(T: GeometricTransform):
    if isinstance(T, geo.AffineParams):
        return T.theta.dtype
    if isinstance(T, geo.TpsParams):
        return T.coefficients.dtype
    return T.affine.theta.dtype


def stage_of(T: GeometricTransform, stage: str) -> GeometricTransform:
    """Pick the transform a cycle term constrains: the full cascade or its affine stage."""
    if stage == "cascade":
        return T
    if stage == "affine":
        return T.affine if isinstance(T, Cascade) else T
    raise ValueError(f"unknown cycle stage {stage!r}")


# ---------------------------------------------------------------------------
# foreground-guided matching
# ---------------------------------------------------------------------------


def correspondence_mask(T: GeometricTransform, shape_a, shape_b, phi: float = 1.0) -> np.ndarray:
    """Binary ``(h_a*w_a, h_b*w_b)`` mask: 1 iff ``||T(p) - q|| <= phi`` cells."""
    if phi <= 0:
        raise ValueError(f"phi must be positive, got {phi}")
    ha, wa = shape_a
    hb, wb = shape_b
    proj = geo.to_cells(geo.apply_np(geo.detached64(T), geo.grid_coordinates(ha, wa)), hb, wb)
    rows, cols = np.meshgrid(np.arange(hb), np.arange(wb), indexing="ij")
    q = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    dist = np.sqrt(((proj[:, None, :] - q[None, :, :]) ** 2).sum(-1))
    return dist <= phi


def matching_score(S: CorrelationMap, m: np.ndarray) -> Tensor:
    """``s(p) = sum_q m(p, q) S(p, q)`` for every source cell."""
    if m.shape != S.values.shape:
        raise tc.ShapeError(f"mask shape {m.shape} does not match correlation {S.values.shape}")
    return tc.sum_reduce(tc.mul(S.values, m.astype(S.values.dtype)), axis=1)


def matching_loss(S_AB: CorrelationMap, S_BA: CorrelationMap, T_AB, T_BA, M_A, M_B,
                  phi: float = 1.0) -> Tensor:
    """Negated foreground-weighted matching scores in both directions."""
    m_a = correspondence_mask(T_AB, S_AB.source_shape, S_AB.target_shape, phi)
    m_b = correspondence_mask(T_BA, S_BA.source_shape, S_BA.target_shape, phi)
    s_a = matching_score(S_AB, m_a)
    s_b = matching_score(S_BA, m_b)
    fwd = tc.sum_reduce(tc.mul(s_a, M_A))
    bwd = tc.sum_reduce(tc.mul(s_b, M_B))
    return tc.neg(tc.add(fwd, bwd))


# ---------------------------------------------------------------------------
# cycle consistency
# ---------------------------------------------------------------------------


def _pts(points: np.ndarray, T) -> Tensor:
    return Tensor(np.asarray(points), dtype=_ref_dtype(T))


def _error_sum(a: Tensor, b: Tensor) -> Tensor:
    return tc.sum_reduce(tc.norm(tc.sub(a, b), axis=1))


def cycle_loss(T_AB, T_BA, sample: CoordinateSample, stage: str = "cascade") -> Tensor:
    """Forward-backward reprojection error summed over both sample sets."""
    T_AB, T_BA = stage_of(T_AB, stage), stage_of(T_BA, stage)
    pa = _pts(sample.points_a, T_AB)
    pb = _pts(sample.points_b, T_BA)
    fwd = _error_sum(geo.compose_apply(T_BA, T_AB, pa), pa)
    bwd = _error_sum(geo.compose_apply(T_AB, T_BA, pb), pb)
    return tc.add(fwd, bwd)


def transitivity_loss(T_AB, T_BC, T_AC, T_BA, sample: CoordinateSample, stage: str = "cascade") -> Tensor:
    """``sum_p |T_BC(T_AB(p)) - T_AC(p)| + sum_q |T_AC(T_BA(q)) - T_BC(q)|``."""
    T_AB, T_BC, T_AC, T_BA = (stage_of(T, stage) for T in (T_AB, T_BC, T_AC, T_BA))
    pa = _pts(sample.points_a, T_AB)
    pb = _pts(sample.points_b, T_BA)
    first = _error_sum(geo.compose_apply(T_BC, T_AB, pa), geo.apply(T_AC, pa))
    second = _error_sum(geo.compose_apply(T_AC, T_BA, pb), geo.apply(T_BC, pb))
    return tc.add(first, second)


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------


@dataclass
class PairTerms:
    """Everything the objective needs from one (A, B) forward pass."""

    S_AB: CorrelationMap
    S_BA: CorrelationMap
    T_AB: GeometricTransform
    T_BA: GeometricTransform
    M_A: Tensor
    M_B: Tensor


@dataclass
class TripletTerms:
    """Independently regressed transforms for a triplet (A, B, C)."""

    T_AB: GeometricTransform
    T_BA: GeometricTransform
    T_BC: GeometricTransform
    T_AC: GeometricTransform


@dataclass
class LossBreakdown:
    total: Tensor
    matching: Tensor
    cycle: Tensor
    trans: Tensor | None

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "match": self.matching.item(),
            "cycle": self.cycle.item(),
            "trans": 0.0 if self.trans is None else self.trans.item(),
        }


def total_loss(pair: PairTerms, weights: LossWeights, sample: CoordinateSample | None = None,
               triplet: TripletTerms | None = None, phi: float = 1.0,
               stage: str = "cascade") -> LossBreakdown:
    """``L_match + lambda_c * L_cycle [+ lambda_t * L_trans when a triplet is given]``."""
    sample = sample or CoordinateSample.lattice()
    match = matching_loss(pair.S_AB, pair.S_BA, pair.T_AB, pair.T_BA, pair.M_A, pair.M_B, phi)
    cyc = cycle_loss(pair.T_AB, pair.T_BA, sample, stage)
    total = tc.add(match, tc.mul(cyc, weights.lambda_c))
    trans = None
    if triplet is not None:
        trans = transitivity_loss(triplet.T_AB, triplet.T_BC, triplet.T_AC, triplet.T_BA, sample, stage)
        total = tc.add(total, tc.mul(trans, weights.lambda_t))
    return LossBreakdown(total, match, cyc, trans)

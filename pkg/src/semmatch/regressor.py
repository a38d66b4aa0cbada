"""Transformation predictor: correlation map -> affine -> TPS cascade.

Each head is ``pool -> fc1 -> tanh -> fc2``.  Pooling averages the source
grid of the reshaped correlation map down to ``pool x pool`` blocks, so the
head input width is ``pool^2 * h_b * w_b``.  Parameter count::

    n_params = 2 * hidden * (pool^2 * h_b * w_b + 1) + (6 + 18) * (hidden + 1)

The affine head predicts a residual on top of the identity and the TPS head
predicts control-point displacements; both ``fc2`` layers start at zero so a
freshly initialized regressor returns the identity cascade.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import tensorcore as tc
from .correlation import CorrelationMap, FeatureMap, correlate, reshape_for_regressor
from .features import FormatError
from .tensorcore import Tensor

WEIGHTS_MAGIC = b"DSMW"
WEIGHTS_VERSION = 1
HEADS = (("affine", 6), ("tps", 18))
_IDENTITY = np.asarray(geo.IDENTITY_AFFINE)


@dataclass
class RegressorWeights:
    """Named parameter tensors plus the grid geometry they were built for."""

    params: dict[str, Tensor]
    source_shape: tuple[int, int]
    target_shape: tuple[int, int]
    pool: int = 1
    _pool_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def hidden(self) -> int:
        return self.params["affine.fc1.weight"].shape[1]

    @property
    def input_width(self) -> int:
        return self.params["affine.fc1.weight"].shape[0]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True) -> "RegressorWeights":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self, dtype=None) -> "RegressorWeights":
        return RegressorWeights(
            {k: Tensor(v.data, v.requires_grad, dtype=dtype or v.dtype) for k, v in self.params.items()},
            self.source_shape, self.target_shape, self.pool)

    def pool_matrix(self, h: int, w: int, dtype) -> np.ndarray:
        key = (h, w, np.dtype(dtype).str)
        if key not in self._pool_cache:
            self._pool_cache[key] = block_pool_matrix(h, w, self.pool).astype(dtype)
        return self._pool_cache[key]


def param_count(source_shape, target_shape, hidden: int = 64, pool: int = 1) -> int:
    d_in = pool * pool * target_shape[0] * target_shape[1]
    return 2 * hidden * (d_in + 1) + sum(out for _, out in HEADS) * (hidden + 1)


def block_pool_matrix(h: int, w: int, pool: int) -> np.ndarray:
    """``(pool^2, h*w)`` averaging matrix over contiguous row/column blocks."""
    if pool < 1 or pool > min(h, w):
        raise tc.ShapeError(f"pool size {pool} does not fit a {h}x{w} grid")
    rows = np.array_split(np.arange(h), pool)
    cols = np.array_split(np.arange(w), pool)
    P = np.zeros((pool * pool, h * w))
    for bi, r in enumerate(rows):
        for bj, c in enumerate(cols):
            idx = (r[:, None] * w + c[None, :]).ravel()
            P[bi * pool + bj, idx] = 1.0 / len(idx)
    return P


def init_weights(seed: int, source_shape, target_shape, hidden: int = 64, pool: int = 1,
                 dtype=np.float32) -> RegressorWeights:
    """Deterministic Glorot-uniform hidden layers, zero output layers."""
    rng = np.random.default_rng(seed)
    d_in = pool * pool * target_shape[0] * target_shape[1]
    params: dict[str, Tensor] = {}
    for head, out in HEADS:
        limit = np.sqrt(6.0 / (d_in + hidden))
        params[f"{head}.fc1.weight"] = Tensor(rng.uniform(-limit, limit, (d_in, hidden)), dtype=dtype)
        params[f"{head}.fc1.bias"] = Tensor(np.zeros(hidden), dtype=dtype)
        params[f"{head}.fc2.weight"] = Tensor(np.zeros((hidden, out)), dtype=dtype)
        params[f"{head}.fc2.bias"] = Tensor(np.zeros(out), dtype=dtype)
    return RegressorWeights(params, tuple(source_shape), tuple(target_shape), pool)


def _head(w: RegressorWeights, name: str, S: CorrelationMap) -> Tensor:
    ha, wa = S.source_shape
    hb, wb = S.target_shape
    if (hb, wb) != tuple(w.target_shape) or w.pool * w.pool * hb * wb != w.input_width:
        raise tc.ShapeError(f"correlation target grid {hb}x{wb} does not match weights built for "
                            f"{w.target_shape[0]}x{w.target_shape[1]} (pool {w.pool})")
    x = tc.reshape(reshape_for_regressor(S), (ha * wa, hb * wb))
    pooled = tc.reshape(tc.matmul(w.pool_matrix(ha, wa, x.dtype), x), (1, w.input_width))
    p = w.params
    hidden = tc.tanh(tc.add(tc.matmul(pooled, p[f"{name}.fc1.weight"]), p[f"{name}.fc1.bias"]))
    out = tc.add(tc.matmul(hidden, p[f"{name}.fc2.weight"]), p[f"{name}.fc2.bias"])
    return tc.reshape(out, (-1,))


def warp_features(fA: FeatureMap, T: geo.AffineParams, target_shape) -> FeatureMap:
    """Resample ``fA`` onto a target grid so that it lines up under ``T``.

    Target cell ``q`` reads ``fA`` at ``T^{-1}(q)``; locations outside the
    source grid read zeros.
    """
    hb, wb = target_shape
    q = geo.grid_coordinates(hb, wb, dtype=T.theta.dtype)
    src = geo.apply(geo.invert(T), q)
    table = geo.bilinear_sample(fA.table(), fA.h, fA.w, src)
    return FeatureMap(tc.reshape(table, (hb, wb, fA.d)))


def predict(S_AB: CorrelationMap, fA: FeatureMap, fB: FeatureMap, w: RegressorWeights,
            normalization: str = "cosine") -> geo.Cascade:
    """Regress the A->B cascade from the correlation map ``S_AB``.

    Stage one regresses the affine part from ``S_AB``.  Stage two warps
    ``fA`` by that estimate, re-correlates with ``fB`` and regresses TPS
    displacements in the roughly aligned frame.
    """
    dtype = w.params["affine.fc1.weight"].dtype
    theta = tc.add(_head(w, "affine", S_AB), _IDENTITY.astype(dtype))
    affine = geo.AffineParams(theta)
    warped = warp_features(fA, affine, fB.values.shape[:2])
    S2 = correlate(warped, fB, normalization)
    disp = tc.reshape(_head(w, "tps", S2), (9, 2))
    return geo.Cascade(affine, geo.solve_tps_coefficients(disp))


# ---------------------------------------------------------------------------
# DSMW checkpoints
# ---------------------------------------------------------------------------

_META = "meta.geometry"


def _block(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def weights_to_bytes(w: RegressorWeights) -> bytes:
    """``DSMW`` + version byte + named blocks (u32 name length, name, u32 rank,
    u32 extents, little-endian float32 payload).  A ``meta.geometry`` block
    records ``(h_a, w_a, h_b, w_b, pool)``.
    """
    out = [WEIGHTS_MAGIC, bytes([WEIGHTS_VERSION])]
    meta = np.array([*w.source_shape, *w.target_shape, w.pool], dtype=np.float32)
    out.append(_block(_META, meta))
    for name, t in w.params.items():
        out.append(_block(name, t.data))
    return b"".join(out)


def weights_from_bytes(buf: bytes) -> RegressorWeights:
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {WEIGHTS_MAGIC!r}", 0)
    if len(buf) < 5:
        raise FormatError("missing version byte", 4)
    if buf[4] != WEIGHTS_VERSION:
        raise FormatError(f"unsupported version {buf[4]}", 4)
    pos = 5
    blocks: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: needs {n} bytes", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise FormatError(f"block {name!r}: implausible rank {rank}", pos - 4)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64))
        data = take(4 * count, f"payload of {name!r}")
        blocks[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if _META not in blocks:
        raise FormatError("checkpoint lacks the meta.geometry block", len(buf))
    ha, wa, hb, wb, pool = (int(v) for v in blocks.pop(_META))
    expected = {f"{h}.{layer}.{kind}" for h, _ in HEADS for layer in ("fc1", "fc2") for kind in ("weight", "bias")}
    if set(blocks) != expected:
        raise FormatError(f"checkpoint blocks {sorted(blocks)} do not match the regressor layout", len(buf))
    params = {k: Tensor(blocks[k], dtype=np.float32) for k in sorted(expected, key=list(blocks).index)}
    return RegressorWeights(params, (ha, wa), (hb, wb), pool)


def save_weights(w: RegressorWeights, path) -> None:
    Path(path).write_bytes(weights_to_bytes(w))


def load_weights(path) -> RegressorWeights:
    return weights_from_bytes(Path(path).read_bytes())

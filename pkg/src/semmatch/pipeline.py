"""Training: ADAM, supervised warm-up on synthetic ground truth, weak objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry as geo
from . import tensorcore as tc
from .correlation import CorrelationMap, FeatureMap, correlate, foreground_mask
from .features import DescriptorConfig, extract
from .losses import (CoordinateSample, LossWeights, PairTerms, TripletTerms, cycle_loss,
                     matching_loss, transitivity_loss)
from .regressor import RegressorWeights, init_weights, predict
from .synthetic import SyntheticPair, generate_pair, generate_triplet

logger = logging.getLogger(__name__)

# rate suited to a large pretrained backbone; far too small for the desk-scale regressor
PRETRAINED_BACKBONE_LR = 5e-8


class TrainingError(tc.NumericError):
    """Non-finite loss during training."""


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, tc.Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected ADAM update; parameters receive fresh data buffers."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise tc.ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class PairSample:
    """Indices into :attr:`TrainingSet.features` plus optional ground truth (A->B)."""

    a: int
    b: int
    category: int
    gt: geo.GeometricTransform | None = None


@dataclass
class TrainingSet:
    features: list[FeatureMap]
    pairs: list[PairSample]
    _corr: dict = field(default_factory=dict, repr=False)

    def correlation(self, a: int, b: int, normalization: str = "cosine") -> CorrelationMap:
        key = (a, b, normalization)
        if key not in self._corr:
            self._corr[key] = correlate(self.features[a], self.features[b], normalization)
        return self._corr[key]


def synthetic_training_set(n_pairs: int, family: str = "affine", magnitude: float = 0.2, seed: int = 0,
                           triplets: bool = False, descriptor: DescriptorConfig = DescriptorConfig(),
                           hflip: bool = False, crop: bool = False) -> tuple[TrainingSet, list[SyntheticPair]]:
    """Build features and pairs; with ``triplets`` every base yields pairs (A,B) and (A,C)."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, n_pairs)
    feats: list[FeatureMap] = []
    pairs: list[PairSample] = []
    raw: list[SyntheticPair] = []
    k = 0
    while len(pairs) < n_pairs:
        s = int(seeds[len(pairs)])
        if triplets and n_pairs - len(pairs) >= 2:
            group = generate_triplet(s, family, magnitude)
            feats.append(extract(group[0].base, descriptor))
            a = len(feats) - 1
            for sp in group:
                feats.append(extract(sp.warped, descriptor))
                pairs.append(PairSample(a, len(feats) - 1, k, sp.gt_transform))
                raw.append(sp)
        else:
            sp = generate_pair(s, family, magnitude, hflip=hflip, crop=crop)
            feats.append(extract(sp.base, descriptor))
            feats.append(extract(sp.warped, descriptor))
            pairs.append(PairSample(len(feats) - 2, len(feats) - 1, k, sp.gt_transform))
            raw.append(sp)
        k += 1
    return TrainingSet(feats, pairs), raw


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    weights: LossWeights = LossWeights()
    warm_up_steps: int = 0
    lr: float = 1e-3
    warm_up_lr: float | None = None
    phi: float = 1.0
    cycle_sample: str = "lattice"
    cycle_stage: str = "cascade"
    detach_masks: bool = False
    foreground: str = "estimated"
    normalization: str = "cosine"
    swap_pairs: bool = True
    hflip: bool = False
    crop: bool = False
    hidden: int = 64
    pool: int = 1

    def __post_init__(self):
        for name in ("batch_size", "epochs", "warm_up_steps", "hidden", "pool"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.cycle_sample not in ("lattice", "random"):
            raise ValueError(f"cycle_sample must be lattice|random, got {self.cycle_sample!r}")
        if self.foreground not in ("estimated", "ones"):
            raise ValueError(f"foreground must be estimated|ones, got {self.foreground!r}")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def masks_for(S: CorrelationMap, cfg: TrainConfig) -> tc.Tensor:
    if cfg.foreground == "ones":
        return tc.Tensor(np.ones(S.values.shape[0]), dtype=S.values.dtype)
    return foreground_mask(S, detach=cfg.detach_masks)


def forward_pair(ds: TrainingSet, a: int, b: int, w: RegressorWeights, cfg: TrainConfig) -> PairTerms:
    S_AB = ds.correlation(a, b, cfg.normalization)
    S_BA = ds.correlation(b, a, cfg.normalization)
    fA, fB = ds.features[a], ds.features[b]
    return PairTerms(S_AB, S_BA,
                     predict(S_AB, fA, fB, w, cfg.normalization),
                     predict(S_BA, fB, fA, w, cfg.normalization),
                     masks_for(S_AB, cfg), masks_for(S_BA, cfg))


def forward_triplet(ds: TrainingSet, a: int, b: int, c: int, w: RegressorWeights,
                    cfg: TrainConfig) -> TripletTerms:
    def T(x, y):
        return predict(ds.correlation(x, y, cfg.normalization), ds.features[x], ds.features[y], w,
                       cfg.normalization)
    return TripletTerms(T(a, b), T(b, a), T(b, c), T(a, c))


def _gt_vectors(gt: geo.GeometricTransform) -> tuple[np.ndarray, np.ndarray]:
    """Ground truth as (affine 6-vector, TPS displacements 9x2) in cascade form."""
    if isinstance(gt, geo.AffineParams):
        return gt.values, np.zeros((9, 2))
    if isinstance(gt, geo.TpsParams):
        return np.asarray(geo.IDENTITY_AFFINE), gt.displacements.data.astype(np.float64)
    return gt.affine.values, gt.tps.displacements.data.astype(np.float64)


def supervised_loss(T: geo.Cascade, gt: geo.GeometricTransform) -> tc.Tensor:
    """Squared parameter-space distance between a predicted cascade and ground truth."""
    aff, disp = _gt_vectors(gt)
    dt = T.affine.theta.dtype
    e1 = tc.sum_reduce(tc.square(tc.sub(T.affine.theta, aff.astype(dt))))
    e2 = tc.sum_reduce(tc.square(tc.sub(T.tps.displacements, disp.astype(dt))))
    return tc.add(e1, e2)


def _inverse_gt(gt):
    if isinstance(gt, geo.AffineParams):
        return geo.detached64(geo.invert(gt))
    return None


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class StepLog:
    step: int
    phase: str
    total: float
    match: float
    cycle: float
    trans: float


def write_log(log: Sequence[StepLog], path) -> None:
    """``step<TAB>L_total<TAB>L_match<TAB>L_cycle<TAB>L_trans`` per weak-objective step."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in log:
            if r.phase == "weak":
                fh.write(f"{r.step}\t{r.total!r}\t{r.match!r}\t{r.cycle!r}\t{r.trans!r}\n")


def _check(value: float, term: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {term} loss at step {step}")


def _grads(w: RegressorWeights) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in w.params.items()}


def _batches(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    size = max(1, size)
    return [order[i:i + size] for i in range(0, n, size)]


def _oriented(rng, sample: PairSample, swap: bool) -> tuple[int, int, geo.GeometricTransform | None]:
    if swap and rng.uniform() < 0.5:
        return sample.b, sample.a, _inverse_gt(sample.gt) if sample.gt is not None else None
    return sample.a, sample.b, sample.gt


def _pick_triplet(rng, ds: TrainingSet, batch: Sequence[int]) -> tuple[int, int, int] | None:
    by_cat: dict[int, list[int]] = {}
    for i in batch:
        p = ds.pairs[i]
        imgs = by_cat.setdefault(p.category, [])
        for img in (p.a, p.b):
            if img not in imgs:
                imgs.append(img)
    cats = sorted(c for c, imgs in by_cat.items() if len(imgs) >= 3)
    if not cats:
        return None
    imgs = by_cat[cats[int(rng.integers(len(cats)))]]
    chosen = rng.choice(len(imgs), size=3, replace=False)
    return tuple(imgs[int(k)] for k in chosen)


def warm_up(ds: TrainingSet, w: RegressorWeights, cfg: TrainConfig, state: AdamState | None = None,
            log: list[StepLog] | None = None) -> list[StepLog]:
    """Supervised steps on pairs with ground-truth transforms (both directions when invertible)."""
    log = [] if log is None else log
    rng = np.random.default_rng([cfg.seed, 1])
    state = state or AdamState(lr=cfg.warm_up_lr or cfg.lr)
    usable = [i for i, p in enumerate(ds.pairs) if p.gt is not None]
    if not usable or cfg.warm_up_steps == 0:
        return log
    w.requires_grad_(True)
    step = 0
    while step < cfg.warm_up_steps:
        for batch in _batches(rng, len(usable), cfg.batch_size):
            if step >= cfg.warm_up_steps:
                break
            w.zero_grad()
            loss = None
            count = 0
            for j in batch:
                p = ds.pairs[usable[j]]
                for a, b, gt in ((p.a, p.b, p.gt), (p.b, p.a, _inverse_gt(p.gt))):
                    if gt is None:
                        continue
                    S = ds.correlation(a, b, cfg.normalization)
                    T = predict(S, ds.features[a], ds.features[b], w, cfg.normalization)
                    term = supervised_loss(T, gt)
                    loss = term if loss is None else tc.add(loss, term)
                    count += 1
            loss = tc.mul(loss, 1.0 / count)
            _check(loss.item(), "warm-up", step)
            tc.backward(loss)
            adam_step(w.params, _grads(w), state)
            log.append(StepLog(step, "warmup", loss.item(), 0.0, 0.0, 0.0))
            step += 1
    w.requires_grad_(False)
    return log


def weak_step(ds: TrainingSet, batch: Sequence[int], w: RegressorWeights, cfg: TrainConfig,
              rng: np.random.Generator, sample: CoordinateSample, step: int):
    """Forward + backward of the weak objective on one batch; returns (components, total tensor)."""
    lw = cfg.weights
    match_t = cyc_t = None
    for i in batch:
        a, b, _ = _oriented(rng, ds.pairs[i], cfg.swap_pairs)
        if cfg.cycle_sample == "random":
            sample = CoordinateSample.random(rng, ds.features[a].values.shape[:2], ds.features[b].values.shape[:2])
        terms = forward_pair(ds, a, b, w, cfg)
        m = matching_loss(terms.S_AB, terms.S_BA, terms.T_AB, terms.T_BA, terms.M_A, terms.M_B, cfg.phi)
        c = cycle_loss(terms.T_AB, terms.T_BA, sample, cfg.cycle_stage)
        _check(m.item(), "matching", step)
        _check(c.item(), "cycle", step)
        match_t = m if match_t is None else tc.add(match_t, m)
        cyc_t = c if cyc_t is None else tc.add(cyc_t, c)
    n = len(batch)
    match_t = tc.mul(match_t, 1.0 / n)
    cyc_t = tc.mul(cyc_t, 1.0 / n)
    total = tc.add(match_t, tc.mul(cyc_t, lw.lambda_c))
    trans_v = 0.0
    if lw.lambda_t > 0:
        trip = _pick_triplet(rng, ds, batch)
        if trip is not None:
            tt = forward_triplet(ds, *trip, w, cfg)
            tr = transitivity_loss(tt.T_AB, tt.T_BC, tt.T_AC, tt.T_BA, sample, cfg.cycle_stage)
            trans_v = tr.item()
            _check(trans_v, "transitivity", step)
            total = tc.add(total, tc.mul(tr, lw.lambda_t))
    vals = {"match": match_t.item(), "cycle": cyc_t.item(), "trans": trans_v}
    _check(vals["match"], "matching", step)
    _check(vals["cycle"], "cycle", step)
    vals["total"] = vals["match"] + lw.lambda_c * vals["cycle"] + lw.lambda_t * vals["trans"]
    _check(vals["total"], "total", step)
    return vals, total


def train(ds: TrainingSet, cfg: TrainConfig, weights: RegressorWeights | None = None
          ) -> tuple[RegressorWeights, list[StepLog]]:
    """Optional supervised warm-up, then ``cfg.epochs`` epochs of the weak objective."""
    if not ds.pairs:
        raise ValueError("training needs at least one pair")
    f0 = ds.features[ds.pairs[0].a]
    if weights is None:
        weights = init_weights(cfg.seed, f0.values.shape[:2], f0.values.shape[:2], cfg.hidden, cfg.pool)
    w = weights.copy()
    log: list[StepLog] = []
    try:
        warm_up(ds, w, cfg, log=log)
    except tc.NumericError as exc:
        raise TrainingError(f"warm-up: {exc}") from exc

    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    sample = CoordinateSample.lattice()
    step = 0
    for epoch in range(cfg.epochs):
        w.requires_grad_(True)
        sums = np.zeros(4)
        batches = _batches(rng, len(ds.pairs), cfg.batch_size)
        for batch in batches:
            w.zero_grad()
            try:
                vals, total = weak_step(ds, batch, w, cfg, rng, sample, step)
            except TrainingError:
                raise
            except tc.NumericError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            tc.backward(total)
            adam_step(w.params, _grads(w), state)
            log.append(StepLog(step, "weak", vals["total"], vals["match"], vals["cycle"], vals["trans"]))
            sums += [vals["total"], vals["match"], vals["cycle"], vals["trans"]]
            step += 1
        sums /= len(batches)
        logger.info("epoch %d: total %.4f match %.4f cycle %.4f trans %.4f", epoch, *sums)
    w.requires_grad_(False)
    return w, log

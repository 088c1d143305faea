"""Similarities, distillation losses and the teacher's triplet objective.

Teacher embeddings entering any distillation loss are constants: the graph
never reaches teacher parameters, so their gradient is exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import EmbeddingBatch
from .errors import ConfigError, DimensionError, DomainError, MiningError, NumericError

ABS, REL_TS, REL_SS = "abs", "rel_ts", "rel_ss"
LOSS_TERMS = (ABS, REL_TS, REL_SS)


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    left_encoder: str
    right_encoder: str
    left_resolution: int
    right_resolution: int


def sim_matrix(left: EmbeddingBatch, right: EmbeddingBatch) -> SimilarityMatrix:
    if left.vectors.shape[1] != right.vectors.shape[1]:
        raise DimensionError(f"embedding dims differ: {left.vectors.shape} vs {right.vectors.shape}")
    return SimilarityMatrix(left.vectors @ right.vectors.T, left.encoder, right.encoder,
                            left.resolution, right.resolution)


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 0.7
    lambda_s: float = 0.7

    def __post_init__(self):
        for v in (self.lambda_t, self.lambda_s):
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weights must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    abs: float
    rel_ts: float
    rel_ss: float
    total: float


def _const(x, like: Tensor) -> Tensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(data.astype(like.data.dtype, copy=False))


def _as_graph(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def loss_abs_terms(teacher, student: Tensor) -> Tensor:
    """Per-row (1 - t.s)^2 for aligned N×d teacher/student embeddings."""
    student = _as_graph(student)
    t = _const(teacher, student)
    if t.shape != student.shape:
        raise DimensionError(f"teacher {t.shape} and student {student.shape} embeddings misaligned")
    dots = ad.reduce_sum(ad.mul(t, student), axes=1)
    return ad.pow(ad.sub(1.0, dots), 2.0)


def loss_abs(teacher, student) -> Tensor:
    """(1 - t.s)^2 for one pair of unit vectors; lies in [0, 4]."""
    student = _as_graph(student)
    t = _const(teacher, student)
    if student.ndim == 1:
        student = ad.reshape(student, (1, student.shape[0]))
        t = Tensor(t.data.reshape(1, -1))
    return ad.reshape(loss_abs_terms(t, student), ())


def loss_abs_avg(teacher_views, student_views) -> Tensor:
    """Mean absolute loss over the augmented views of one source image."""
    student_views = _as_graph(student_views)
    if student_views.shape[0] < 1:
        raise DomainError("need at least one view")
    return ad.reduce_mean(loss_abs_terms(teacher_views, student_views))


def _pair_mask(num_sources: int, views: int, dtype) -> np.ndarray:
    """Ordered same-source pairs y != z in a (sources*views)^2 grid."""
    block = np.ones((views, views), dtype) - np.eye(views, dtype=dtype)
    return np.kron(np.eye(num_sources, dtype=dtype), block)


def _relational(teacher, student: Tensor, views: int, cross: bool) -> Tensor:
    student = _as_graph(student)
    t = _const(teacher, student)
    if t.shape != student.shape:
        raise DimensionError(f"teacher {t.shape} and student {student.shape} embeddings misaligned")
    if views < 2:
        raise DomainError(f"relational loss needs >= 2 views per image, got {views}")
    if student.shape[0] % views:
        raise DimensionError(f"{student.shape[0]} rows is not a multiple of {views} views")
    if cross:
        # T(y).S(z): teacher row y against student row z
        pred = ad.matmul(t, ad.transpose(student))
    else:
        pred = ad.matmul(student, ad.transpose(student))
    return relational_gap(t.data @ t.data.T, pred, views)


def relational_gap(teacher_sims, other_sims, views: int) -> Tensor:
    """Mean squared gap between two similarity grids over same-source ordered pairs y != z.

    Both grids are (sources*views)^2; the teacher grid is a constant.
    """
    other_sims = _as_graph(other_sims)
    n_rows = other_sims.shape[0]
    if views < 2 or n_rows % views:
        raise DimensionError(f"{n_rows} rows cannot be grouped into sources of {views} >= 2 views")
    sources = n_rows // views
    diff = ad.sub(_const(teacher_sims, other_sims), other_sims)
    mask = Tensor(_pair_mask(sources, views, other_sims.data.dtype))
    n_pairs = views * views - views
    per_batch = ad.reduce_sum(ad.mul(mask, ad.mul(diff, diff)))
    return ad.scalar_mul(per_batch, 1.0 / (n_pairs * sources))


def loss_rel_ts(teacher_views, student_views, views: int | None = None) -> Tensor:
    """Mean over ordered view pairs of (T(y).T(z) - T(y).S(z))^2, batch-averaged over sources.

    Rows are grouped source-major: rows [i*views, (i+1)*views) belong to source i.
    With ``views=None`` all rows are views of a single source.
    """
    student_views = _as_graph(student_views)
    return _relational(teacher_views, student_views, views or student_views.shape[0], cross=True)


def loss_rel_ss(teacher_views, student_views, views: int | None = None) -> Tensor:
    """Mean over ordered view pairs of (T(y).T(z) - S(y).S(z))^2."""
    student_views = _as_graph(student_views)
    return _relational(teacher_views, student_views, views or student_views.shape[0], cross=False)


def loss_total(teacher, student: Tensor, views: int, weights: LossWeights = LossWeights(),
               terms=LOSS_TERMS) -> tuple[Tensor, LossBreakdown]:
    """abs + lambda_t*rel_ts + lambda_s*rel_ss, each averaged over the batch's source images.

    Terms outside ``terms`` are neither computed nor added and report 0.
    """
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise ConfigError(f"unknown loss terms {sorted(unknown)}")
    if not terms:
        raise ConfigError("at least one loss term is required")
    parts = {}
    total = None
    if ABS in terms:
        parts[ABS] = ad.reduce_mean(loss_abs_terms(teacher, student))
        total = parts[ABS]
    relational = [(REL_TS, weights.lambda_t, loss_rel_ts), (REL_SS, weights.lambda_s, loss_rel_ss)]
    for name, lam, fn in relational:
        if name not in terms:
            continue
        parts[name] = fn(teacher, student, views)
        term = ad.scalar_mul(parts[name], lam)
        total = term if total is None else ad.add(total, term)
    breakdown = LossBreakdown(*(float(parts[k].data) if k in parts else 0.0 for k in LOSS_TERMS),
                              total=float(total.data))
    return total, breakdown


# -- teacher objective --------------------------------------------------------

@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.1
    mining_clip: float = 8.0
    distance_floor: float = 0.5
    negatives_per_pair: int = 1

    def __post_init__(self):
        if not 0 < self.margin < 2:
            raise ConfigError(f"triplet margin must lie in (0, 2), got {self.margin}")
        if self.mining_clip <= 0:
            raise ConfigError("mining_clip must be positive")


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Mean over rows of max(0, s(a,n) - s(a,p) + margin)."""
    anchor, positive, negative = (_as_graph(x) for x in (anchor, positive, negative))
    if anchor.ndim == 1:
        anchor, positive, negative = (ad.reshape(x, (1, x.shape[0])) for x in (anchor, positive, negative))
    s_ap = ad.reduce_sum(ad.mul(anchor, positive), axes=1)
    s_an = ad.reduce_sum(ad.mul(anchor, negative), axes=1)
    return ad.reduce_mean(ad.relu(ad.add(ad.sub(s_an, s_ap), margin)))


def importance_weights(anchor: np.ndarray, candidates: np.ndarray, labels: np.ndarray, anchor_label,
                       config: TripletConfig = TripletConfig()) -> np.ndarray:
    """Clipped importance per candidate (zero on same-class), before normalisation.

    Importance is the inverse of the pairwise-distance density of uniform points
    on the unit sphere, q(δ) ∝ δ^(d-2)(1 - δ²/4)^((d-3)/2), taken relative to
    its mean over valid candidates and capped at ``mining_clip``.
    """
    d = candidates.shape[1]
    if not (np.all(np.isfinite(anchor)) and np.all(np.isfinite(candidates))):
        raise NumericError("non-finite embedding passed to negative mining")
    valid = np.asarray(labels) != anchor_label
    if not valid.any():
        raise MiningError("no candidate of a different class")
    sq = np.clip(2.0 - 2.0 * (candidates.astype(np.float64) @ anchor.astype(np.float64)), 0.0, 4.0)
    dist = np.maximum(np.sqrt(sq), config.distance_floor)
    dist = np.minimum(dist, 2.0 - 1e-6)
    log_inv_q = -((d - 2.0) * np.log(dist) + ((d - 3.0) / 2.0) * np.log(1.0 - 0.25 * dist ** 2))
    lv = log_inv_q[valid]
    rel = np.exp(lv - lv.max())
    rel = rel / rel.mean()
    w = np.zeros(len(candidates))
    w[valid] = np.minimum(config.mining_clip, rel)
    return w


def negative_weights(anchor: np.ndarray, candidates: np.ndarray, labels: np.ndarray, anchor_label,
                     config: TripletConfig = TripletConfig()) -> np.ndarray:
    """Sampling probabilities over candidates for one anchor."""
    w = importance_weights(anchor, candidates, labels, anchor_label, config)
    return w / w.sum()


def mine_negatives(anchor_emb: np.ndarray, candidate_embs: np.ndarray, labels, anchor_label,
                   config: TripletConfig, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Distance-weighted draw of negative indices for one anchor."""
    w = negative_weights(anchor_emb, candidate_embs, labels, anchor_label, config)
    return rng.choice(len(w), size=size or config.negatives_per_pair, p=w)


def mine_triplets(embs: np.ndarray, labels: np.ndarray, config: TripletConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """All same-class ordered (anchor, positive) pairs, each with mined negatives: K×3 indices."""
    labels = np.asarray(labels)
    out = []
    for a in range(len(labels)):
        positives = np.flatnonzero((labels == labels[a]) & (np.arange(len(labels)) != a))
        if not len(positives) or np.all(labels == labels[a]):
            continue
        negs = mine_negatives(embs[a], embs, labels, labels[a], config, rng,
                              size=len(positives) * config.negatives_per_pair)
        for k, p in enumerate(np.repeat(positives, config.negatives_per_pair)):
            out.append((a, p, negs[k]))
    return np.asarray(out, dtype=np.intp).reshape(-1, 3)

"""Ranking, AP/mAP/R@1, the four evaluation setups, and a loop-based oracle."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dataio
from .backbone import STUDENT, TEACHER, ModelParams, count_flops, forward_embed
from .errors import ConfigError, DimensionError, DomainError

TEACHER_SYMMETRIC = "teacher_symmetric"
TEACHER_ASYMMETRIC = "teacher_asymmetric"
TEACHER_STUDENT_ASYMMETRIC = "teacher_student_asymmetric"
STUDENT_SYMMETRIC = "student_symmetric"
SETUP_KINDS = (TEACHER_SYMMETRIC, TEACHER_ASYMMETRIC, TEACHER_STUDENT_ASYMMETRIC, STUDENT_SYMMETRIC)

REPORT_COLUMNS = ("setup", "query_res", "db_res", "map", "r_at_1", "query_gflops", "num_queries", "seed")


@dataclass(frozen=True)
class RetrievalSetup:
    kind: str
    query_resolution: int
    database_resolution: int

    def __post_init__(self):
        if self.kind not in SETUP_KINDS:
            raise ConfigError(f"unknown setup kind {self.kind!r}")
        q, d = self.query_resolution, self.database_resolution
        if self.kind in (TEACHER_SYMMETRIC, STUDENT_SYMMETRIC) and q != d:
            raise ConfigError(f"{self.kind} needs equal resolutions, got {q} and {d}")
        if self.kind == TEACHER_ASYMMETRIC and not q < d:
            raise ConfigError(f"teacher_asymmetric needs query resolution < database resolution ({q} vs {d})")
        if self.kind == TEACHER_STUDENT_ASYMMETRIC and q > d:
            raise ConfigError(f"teacher_student_asymmetric needs query resolution <= database ({q} vs {d})")

    @property
    def query_encoder(self) -> str:
        return TEACHER if self.kind in (TEACHER_SYMMETRIC, TEACHER_ASYMMETRIC) else STUDENT

    @property
    def database_encoder(self) -> str:
        return STUDENT if self.kind == STUDENT_SYMMETRIC else TEACHER


@dataclass
class RankedList:
    query_index: int
    order: np.ndarray


@dataclass
class EvalReport:
    setup: RetrievalSetup
    map: float
    r_at_1: float
    query_flops: int
    num_queries: int
    seed: int | str = 0

    @property
    def query_gflops(self) -> float:
        return self.query_flops / 1e9

    def csv_row(self) -> list[str]:
        return [self.setup.kind, str(self.setup.query_resolution), str(self.setup.database_resolution),
                repr(self.map), repr(self.r_at_1), repr(self.query_gflops), str(self.num_queries), str(self.seed)]


def write_reports(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())


# -- fast path ----------------------------------------------------------------

def rank_scores(scores: np.ndarray, exclude: int | None = None, ids=None) -> np.ndarray:
    """Positions by descending score, ties by ascending id, position ``exclude`` removed.

    ``ids`` defaults to the storage position.
    """
    scores = np.asarray(scores)
    if ids is None:
        order = np.argsort(-scores, kind="stable")
    else:
        order = np.lexsort((np.asarray(ids), -scores))
    if exclude is not None:
        order = order[order != exclude]
    return order


def rank_database(query_emb: np.ndarray, database_embs: np.ndarray, exclude: int | None = None,
                  query_index: int = 0) -> RankedList:
    database_embs = np.asarray(database_embs)
    if database_embs.shape[0] == 0:
        raise DomainError("empty database")
    if np.shape(query_emb)[-1] != database_embs.shape[1]:
        raise DimensionError(f"query dim {np.shape(query_emb)} vs database {database_embs.shape}")
    return RankedList(query_index, rank_scores(database_embs @ query_emb, exclude))


def average_precision(ranked, relevance) -> float:
    """Mean over relevant ranks k of precision@k (no interpolation).

    ``relevance`` is a boolean per ranked position.
    """
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise DomainError("average precision undefined without relevant items")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return math.fsum(hits[ranks - 1] / ranks) / total


def _per_query(sim: np.ndarray, q_labels, db_labels, self_index, db_ids=None):
    sim = np.asarray(sim)
    q_labels, db_labels = np.asarray(q_labels), np.asarray(db_labels)
    if sim.shape != (len(q_labels), len(db_labels)):
        raise DimensionError(f"similarity {sim.shape} vs {len(q_labels)} queries / {len(db_labels)} items")
    aps, tops = [], []
    for q in range(sim.shape[0]):
        exclude = None if self_index is None else self_index[q]
        order = rank_scores(sim[q], exclude, db_ids)
        rel = db_labels[order] == q_labels[q]
        if not rel.any():
            continue
        aps.append(average_precision(order, rel))
        tops.append(bool(rel[0]))
    if not aps:
        raise DomainError("no query has a relevant database item")
    return aps, tops


def retrieval_metrics(sim: np.ndarray, q_labels, db_labels=None, self_index="diagonal",
                      db_ids=None) -> tuple[float, float]:
    """(mAP, R@1) over queries with at least one relevant item.

    By default query i and database item i are the same example and excluded;
    otherwise ``self_index[q]`` is the database position to drop (or None).
    """
    if db_labels is None:
        db_labels = q_labels
    if isinstance(self_index, str):
        self_index = np.arange(len(q_labels))
    aps, tops = _per_query(sim, q_labels, db_labels, self_index, db_ids)
    return math.fsum(aps) / len(aps), sum(tops) / len(tops)


def mean_average_precision(query_embs, database_embs, labels, db_labels=None, self_index="diagonal") -> float:
    return retrieval_metrics(np.asarray(query_embs) @ np.asarray(database_embs).T, labels, db_labels, self_index)[0]


def recall_at_1(query_embs, database_embs, labels, db_labels=None, self_index="diagonal") -> float:
    return retrieval_metrics(np.asarray(query_embs) @ np.asarray(database_embs).T, labels, db_labels, self_index)[1]


# -- oracle -------------------------------------------------------------------

def brute_force_oracle(similarities, labels, db_labels=None, exclude_self=True) -> tuple[float, float]:
    """Both metrics from explicit loops: each item's rank is counted, never sorted."""
    sims = [[float(v) for v in row] for row in np.asarray(similarities)]
    q_labels = [int(x) for x in labels]
    d_labels = q_labels if db_labels is None else [int(x) for x in db_labels]
    if len(sims) > 1000:
        raise DomainError("oracle limited to 1000 queries")
    aps = []
    hits_at_1 = 0
    for q, row in enumerate(sims):
        items = [j for j in range(len(row)) if not (exclude_self and j == q)]

        def rank_of(j):
            ahead = 0
            for k in items:
                if k != j and (row[k] > row[j] or (row[k] == row[j] and k < j)):
                    ahead += 1
            return ahead + 1

        relevant_ranks = sorted(rank_of(j) for j in items if d_labels[j] == q_labels[q])
        if not relevant_ranks:
            continue
        precisions = [(n + 1) / r for n, r in enumerate(relevant_ranks)]
        aps.append(math.fsum(precisions) / len(relevant_ranks))
        if relevant_ranks[0] == 1:
            hits_at_1 += 1
    if not aps:
        raise DomainError("no query has a relevant database item")
    return math.fsum(aps) / len(aps), hits_at_1 / len(aps)


# -- setups -------------------------------------------------------------------

def prepare_images(images: np.ndarray, resolution: int) -> np.ndarray:
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images
    return np.stack([dataio.eval_resample(img, resolution) for img in images])


def make_setup(kind: str, base: int, scale: float) -> RetrievalSetup:
    small = dataio.scaled_resolution(base, scale)
    if kind == TEACHER_SYMMETRIC:
        return RetrievalSetup(kind, small, small)
    if kind == STUDENT_SYMMETRIC:
        return RetrievalSetup(kind, small, small)
    return RetrievalSetup(kind, small, base)


def setup_embeddings(teacher: ModelParams, student: ModelParams | None, images: np.ndarray,
                     setup: RetrievalSetup, cache: dict | None = None):
    """(query EmbeddingBatch, database EmbeddingBatch) for ``setup``."""
    def get(role, res):
        params = teacher if role == TEACHER else student
        if params is None:
            raise ConfigError(f"setup {setup.kind} needs a {role} network")
        key = (role, res, params.digest())
        if cache is not None and key in cache:
            return cache[key]
        emb = forward_embed(params, prepare_images(images, res))
        emb.encoder = role
        if cache is not None:
            cache[key] = emb
        return emb

    return get(setup.query_encoder, setup.query_resolution), get(setup.database_encoder, setup.database_resolution)


def evaluate_embeddings(query, database, labels, setup: RetrievalSetup, config, seed=0) -> EvalReport:
    m, r1 = retrieval_metrics(query.vectors @ database.vectors.T, labels)
    return EvalReport(setup, m, r1, count_flops(config, setup.query_resolution), len(labels), seed)


def evaluate_setup(teacher: ModelParams, student: ModelParams | None, test_images: np.ndarray, labels,
                   setup: RetrievalSetup, seed=0, cache: dict | None = None) -> EvalReport:
    query, database = setup_embeddings(teacher, student, test_images, setup, cache)
    return evaluate_embeddings(query, database, labels, setup, teacher.config, seed)

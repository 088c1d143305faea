"""Embedding store files and the results table."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .backbone import EmbeddingBatch
from .errors import ConfigError, DomainError

EMB_MAGIC = b"RAMLEMB1"
UNIT_NORM_TOL = 1e-5


def save_embeddings(batch: EmbeddingBatch, labels, path) -> None:
    """Header, row-major f32 vectors, and a companion ``.labels`` file of u32 ids."""
    vectors = np.asarray(batch.vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise DomainError(f"embedding store needs a 2-D array, got shape {vectors.shape}")
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
        raise DomainError(f"embeddings are not unit norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")
    labels = np.asarray(labels)
    if len(labels) != len(vectors):
        raise DomainError(f"{len(labels)} labels for {len(vectors)} embeddings")
    tag = batch.encoder.encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IIII", vectors.shape[0], vectors.shape[1], int(batch.resolution), len(tag)))
        fh.write(tag)
        fh.write(vectors.tobytes())
    labels.astype("<u4").tofile(labels_path(path))


def labels_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".labels")


def load_embeddings(path) -> tuple[EmbeddingBatch, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding store not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != EMB_MAGIC:
        raise ConfigError("bad magic in embedding store", path=path)
    count, dim, res, tag_len = struct.unpack_from("<IIII", blob, 8)
    start = 24 + tag_len
    tag = blob[24:start].decode()
    expected = start + 4 * count * dim
    if len(blob) != expected:
        raise ConfigError(f"embedding store holds {len(blob)} bytes, header implies {expected}", path=path)
    vectors = np.frombuffer(blob, dtype="<f4", offset=start).reshape(count, dim).astype(np.float32)
    lp = labels_path(path)
    if not lp.is_file():
        raise FileNotFoundError(f"label file not found: {lp}")
    labels = np.fromfile(lp, dtype="<u4").astype(np.int64)
    return EmbeddingBatch(vectors, tag, res), labels


# -- results table ------------------------------------------------------------

RESULT_COLUMNS = ("experiment", "setup", "query_scale", "query_res", "db_res", "map", "r_at_1",
                  "query_gflops", "num_queries", "seed")
MEAN_SEED = "mean"


@dataclass
class ResultRow:
    experiment: str
    setup: str
    query_scale: float
    query_res: int
    db_res: int
    map: float
    r_at_1: float
    query_gflops: float
    num_queries: int
    seed: str

    @property
    def is_mean(self) -> bool:
        return self.seed == MEAN_SEED

    def as_list(self) -> list[str]:
        return [self.experiment, self.setup, f"{self.query_scale:g}", str(self.query_res), str(self.db_res),
                repr(self.map), repr(self.r_at_1), repr(self.query_gflops), str(self.num_queries), self.seed]


def with_means(rows: Iterable[ResultRow]) -> list[ResultRow]:
    """Seed rows sorted deterministically, each group followed by its mean row."""
    seed_rows = [r for r in rows if not r.is_mean]
    groups: dict[tuple, list[ResultRow]] = {}
    for r in seed_rows:
        groups.setdefault((r.experiment, r.setup, r.query_scale), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], -k[2])):
        members = sorted(groups[key], key=lambda r: r.seed)
        out.extend(members)
        first = members[0]
        out.append(ResultRow(first.experiment, first.setup, first.query_scale, first.query_res, first.db_res,
                             math.fsum(r.map for r in members) / len(members),
                             math.fsum(r.r_at_1 for r in members) / len(members),
                             first.query_gflops, first.num_queries, MEAN_SEED))
    return out


def write_results(rows: Iterable[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


def read_results(path) -> list[ResultRow]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"results table not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ConfigError(f"unexpected results header {reader.fieldnames}", path=path)
        return [ResultRow(r["experiment"], r["setup"], float(r["query_scale"]), int(r["query_res"]),
                          int(r["db_res"]), float(r["map"]), float(r["r_at_1"]), float(r["query_gflops"]),
                          int(r["num_queries"]), r["seed"]) for r in reader]

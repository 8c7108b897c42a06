"""Cosine classification over class prototypes.

Logits are true cosines computed in float64 (explicit division by both
norms), so they are insensitive to whether the prototype matrix was
renormalized after interpolation. Ranking ties break toward the lowest
class index. With enrichment disabled the pipeline reduces exactly to
argmax(query . prototype) over the zero-shot prototypes.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import errors
from .enrich import EnrichmentConfig, PrototypeSet, enrich_query, gather_captions
from .index import QueryEmbedding, Retriever


def logits(query_vector, prototypes) -> np.ndarray:
    """Cosine of the query against every prototype row, as float64."""
    matrix = prototypes.matrix if isinstance(prototypes, PrototypeSet) else \
        np.asarray(prototypes, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise errors.ValidationError("prototype matrix must be (n_classes, dim)")
    q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    if q.shape[0] != matrix.shape[1]:
        raise errors.DimensionMismatch(
            f"query dim {q.shape[0]} != prototype dim {matrix.shape[1]}")
    qnorm = np.linalg.norm(q)
    if qnorm <= 1e-12:
        raise errors.ZeroVector("query vector has near-zero norm")
    p64 = matrix.astype(np.float64)
    pnorms = np.linalg.norm(p64, axis=1)
    if np.any(pnorms <= 1e-12):
        bad = int(np.flatnonzero(pnorms <= 1e-12)[0])
        raise errors.DegeneratePrototype(f"prototype row {bad} has near-zero norm")
    cos = (p64 @ q) / (pnorms * qnorm)
    return np.clip(cos, -1.0, 1.0)


def predict_topk(logit_vector, m: int) -> list[tuple[int, float]]:
    """Top-m (class index, logit) pairs, score-desc, ties to lowest index."""
    arr = np.asarray(logit_vector, dtype=np.float64).reshape(-1)
    n = arr.shape[0]
    if m < 1 or m > n:
        raise errors.InvalidM(f"m must be in [1, {n}], got {m}")
    order = np.lexsort((np.arange(n), -arr))[:m]
    return [(int(i), float(arr[i])) for i in order]


@dataclass(frozen=True)
class Prediction:
    """Full ranking of all classes for one query."""

    query_id: int
    topk: tuple[tuple[int, float], ...]
    enriched: bool

    def to_json_dict(self) -> dict:
        return {"query_id": self.query_id,
                "topk": [[i, s] for i, s in self.topk],
                "enriched": self.enriched}


def classify_query(query: QueryEmbedding,
                   zeroshot: PrototypeSet,
                   enriched: PrototypeSet | None = None,
                   retriever: Retriever | None = None,
                   config: EnrichmentConfig | None = None,
                   query_id: int = 0) -> Prediction:
    """Rank every class for one query.

    With no config, or a config whose alpha and beta are both 0, this is the
    plain zero-shot pipeline. Otherwise the enriched prototype set must be
    supplied when alpha > 0, and a retriever over the caption bank must be
    supplied when beta > 0 (the query is interpolated with its own retrieved
    caption centroid before scoring).
    """
    active = config is not None and (config.alpha > 0 or config.beta > 0)
    proto = zeroshot
    qv = query.vector
    if config is not None:
        if config.alpha > 0:
            if enriched is None:
                raise errors.ValidationError(
                    "enriched prototypes are required when alpha > 0")
            proto = enriched
        elif enriched is not None:
            proto = enriched
        if config.beta > 0:
            if retriever is None:
                raise errors.ValidationError(
                    "a caption retriever is required when beta > 0")
            if query.space_tag != retriever.bank.space_tag:
                raise errors.SpaceMismatch(
                    f"query space {query.space_tag!r} != caption bank space "
                    f"{retriever.bank.space_tag!r}")
            hits = retriever.topk(qv, config.k, space_tag=query.space_tag)
            retrieved = gather_captions(hits, retriever.bank)
            qv = enrich_query(qv, retrieved, config).vector
    scores = logits(qv, proto)
    ranked = predict_topk(scores, scores.shape[0])
    return Prediction(query_id=query_id, topk=tuple(ranked), enriched=active)


def classify_batch(queries: list[QueryEmbedding],
                   zeroshot: PrototypeSet,
                   enriched: PrototypeSet | None = None,
                   retriever: Retriever | None = None,
                   config: EnrichmentConfig | None = None,
                   threads: int = 0,
                   first_query_id: int = 0) -> list[Prediction]:
    """Classify queries independently; output order matches input order."""
    if threads < 0:
        raise errors.ValidationError(f"threads must be >= 0, got {threads}")

    def one(i: int) -> Prediction:
        try:
            return classify_query(queries[i], zeroshot, enriched, retriever,
                                  config, query_id=first_query_id + i)
        except errors.RetroclassError as exc:
            raise type(exc)(f"query {i}: {exc}") from exc

    n = len(queries)
    workers = threads if threads > 0 else min(8, (n or 1))
    if workers == 1 or n <= 1:
        return [one(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n)))


def write_predictions(predictions: list[Prediction], path) -> None:
    """One JSON object per line: {"query_id", "topk", "enriched"}."""
    try:
        with open(Path(path), "w", encoding="utf-8") as fh:
            for pred in predictions:
                fh.write(json.dumps(pred.to_json_dict()) + "\n")
    except OSError as exc:
        raise errors.IoError(f"cannot write predictions to {path}: {exc}") from exc


def read_predictions(path) -> list[Prediction]:
    try:
        with open(Path(path), encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise errors.IoError(f"cannot read predictions at {path}: {exc}") from exc
    out = []
    for i, line in enumerate(lines):
        try:
            obj = json.loads(line)
            out.append(Prediction(
                query_id=int(obj["query_id"]),
                topk=tuple((int(c), float(s)) for c, s in obj["topk"]),
                enriched=bool(obj["enriched"]),
            ))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise errors.CorruptData(f"predictions line {i} is invalid: {exc}") from exc
    return out

"""Retrieval enrichment of prototypes and queries.

The enrichment step retrieves the top-k captions for a class prompt (or for
an image query), softmax-weights them by retrieval score at a configurable
temperature, collapses them to a weighted centroid, and interpolates that
centroid with the original vector. Interpolation endpoints are exact: a
mixing weight of 0 returns the input unchanged (bitwise, when output
renormalization is off).

Numerics: weights and centroid accumulation run in float64; centroids and
interpolated outputs round to float32. A temperature near 0 concentrates
weight on the best-scoring caption; a large temperature approaches a plain
average.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import errors
from .bank import EmbeddingBank
from .index import RetrievalHit, Retriever
from .prompts import merge_alias_prototypes

log = logging.getLogger("retroclass.enrich")

_CONFIG_FIELDS = ("k", "tau_tt", "tau_it", "alpha", "beta",
                  "use_temperature_tt", "use_temperature_it",
                  "renormalize_output")


@dataclass(frozen=True)
class EnrichmentConfig:
    """Operating point for both enrichment branches.

    Defaults follow the reference operating point: k=10 neighbors, a sharp
    temperature (1.0) for text-to-text weighting, a near-uniform temperature
    (100.0) for image-to-text weighting, and interpolation weights
    alpha=0.2 (prototype branch) / beta=0.5 (query branch).
    """

    k: int = 10
    tau_tt: float = 1.0
    tau_it: float = 100.0
    alpha: float = 0.2
    beta: float = 0.5
    use_temperature_tt: bool = True
    use_temperature_it: bool = True
    renormalize_output: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise errors.ValidationError(f"k must be >= 1, got {self.k}")
        for name in ("tau_tt", "tau_it"):
            tau = getattr(self, name)
            if not np.isfinite(tau) or tau <= 0:
                raise errors.InvalidTemperature(
                    f"{name} must be positive and finite, got {tau}")
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if not np.isfinite(val) or not 0.0 <= val <= 1.0:
                raise errors.ValidationError(
                    f"{name} must lie in [0, 1], got {val}")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _CONFIG_FIELDS}

    @classmethod
    def from_dict(cls, obj: dict) -> "EnrichmentConfig":
        if not isinstance(obj, dict):
            raise errors.ValidationError("enrichment config must be a JSON object")
        unknown = set(obj) - set(_CONFIG_FIELDS)
        if unknown:
            raise errors.ValidationError(
                f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "EnrichmentConfig":
        try:
            with open(Path(path), encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise errors.IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise errors.ValidationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)


def softmax_weights(scores, tau: float) -> np.ndarray:
    """Temperature-scaled softmax with max subtraction.

    Stable for |score / tau| up to at least 1e4: the shifted exponents are
    all <= 0, so nothing overflows and the sum is always >= 1.
    """
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise errors.EmptyScores("no scores to weight")
    if not np.isfinite(tau) or tau <= 0:
        raise errors.InvalidTemperature(f"tau must be positive and finite, got {tau}")
    if not np.all(np.isfinite(arr)):
        raise errors.ValidationError("scores contain non-finite values")
    scaled = arr / tau
    scaled -= scaled.max()
    weights = np.exp(scaled)
    return weights / weights.sum()


def uniform_weights(n: int) -> np.ndarray:
    if n < 1:
        raise errors.EmptyScores("no scores to weight")
    return np.full(n, 1.0 / n, dtype=np.float64)


def weighted_centroid(embeddings, weights) -> np.ndarray:
    """Sum of weight * embedding, accumulated in float64, rounded to float32.

    The result is deliberately not renormalized here; interpolation decides
    what happens to the norm.
    """
    matrix = np.asarray(embeddings, dtype=np.float32)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if matrix.ndim != 2:
        raise errors.ValidationError("embeddings must be a 2-D matrix")
    if matrix.shape[0] != w.shape[0]:
        raise errors.LengthMismatch(
            f"{matrix.shape[0]} embeddings but {w.shape[0]} weights")
    if matrix.shape[0] == 0:
        raise errors.EmptyScores("no embeddings to combine")
    acc = (matrix.astype(np.float64) * w[:, None]).sum(axis=0)
    return acc.astype(np.float32)


@dataclass(frozen=True)
class WeightedCaptions:
    """Retrieved captions plus their fusion weights and embeddings."""

    hits: tuple[RetrievalHit, ...]
    weights: np.ndarray      # float64 probability vector
    embeddings: np.ndarray   # (len(hits), dim) float32

    def __post_init__(self):
        hits = tuple(self.hits)
        object.__setattr__(self, "hits", hits)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise errors.ValidationError("embeddings must be a 2-D matrix")
        if not (len(hits) == w.shape[0] == emb.shape[0]):
            raise errors.LengthMismatch(
                f"hits={len(hits)} weights={w.shape[0]} embeddings={emb.shape[0]}")
        if len(hits):
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
                raise errors.ValidationError(
                    "weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return len(self.hits)


def gather_captions(hits: list[RetrievalHit], bank: EmbeddingBank) -> WeightedCaptions:
    """Pull caption embeddings for the hit ids, with uniform initial weights.

    The embedding bank may differ from the bank that produced the hits (the
    two caption banks are aligned id-for-id), which is exactly how retrieval
    in one space feeds fusion in another.
    """
    if not hits:
        return WeightedCaptions((), np.empty(0), np.empty((0, bank.dim), np.float32))
    ids = [h.id for h in hits]
    for row_id in ids:
        if not 0 <= row_id < bank.count:
            raise errors.IdOutOfRange(
                f"hit id {row_id} outside [0, {bank.count})")
    emb = np.array(bank.vectors[np.asarray(ids, dtype=np.int64)])
    return WeightedCaptions(tuple(hits), uniform_weights(len(hits)), emb)


@dataclass(frozen=True)
class EnrichedVector:
    """Result of one enrichment: the vector plus a fallback marker."""

    vector: np.ndarray
    partial: bool = False


def _identity_or_renorm(vec: np.ndarray, renormalize: bool) -> np.ndarray:
    out = np.array(vec, dtype=np.float32)
    if renormalize:
        out64 = out.astype(np.float64)
        norm = np.linalg.norm(out64)
        if norm <= 1e-12:
            raise errors.DegeneratePrototype("vector has near-zero norm")
        out = (out64 / norm).astype(np.float32)
    return out


def _interpolate(base: np.ndarray, retrieved: WeightedCaptions | None,
                 frac: float, tau: float, use_temperature: bool,
                 renormalize: bool, what: str) -> EnrichedVector:
    base = np.asarray(base, dtype=np.float32).reshape(-1)
    if retrieved is None or len(retrieved) == 0:
        # graceful degradation: no neighbors means the input passes through
        log.warning("partial enrichment: empty retrieval set for %s", what)
        return EnrichedVector(np.array(base), partial=True)
    if retrieved.embeddings.shape[1] != base.shape[0]:
        raise errors.DimensionMismatch(
            f"caption dim {retrieved.embeddings.shape[1]} != vector dim {base.shape[0]}")
    if frac == 0.0:
        return EnrichedVector(_identity_or_renorm(base, renormalize))
    scores = [h.score for h in retrieved.hits]
    if use_temperature:
        weights = softmax_weights(scores, tau)
    else:
        weights = uniform_weights(len(scores))
    centroid = weighted_centroid(retrieved.embeddings, weights)
    out64 = frac * centroid.astype(np.float64) + (1.0 - frac) * base.astype(np.float64)
    if renormalize:
        norm = np.linalg.norm(out64)
        if norm <= 1e-12:
            raise errors.DegeneratePrototype(
                f"interpolated {what} vector has near-zero norm")
        out64 = out64 / norm
    return EnrichedVector(out64.astype(np.float32))


def enrich_prototype(prototype, retrieved: WeightedCaptions | None,
                     config: EnrichmentConfig) -> EnrichedVector:
    """Interpolate a class prototype with its retrieved caption centroid.

    Weighting uses the text-to-text temperature (or a plain average when
    that branch's temperature toggle is off). alpha = 0 returns the
    prototype itself, exactly, when renormalization is off.
    """
    return _interpolate(prototype, retrieved, config.alpha, config.tau_tt,
                        config.use_temperature_tt, config.renormalize_output,
                        "prototype")


def enrich_query(query, retrieved: WeightedCaptions | None,
                 config: EnrichmentConfig) -> EnrichedVector:
    """Interpolate an image query with its retrieved caption centroid."""
    return _interpolate(query, retrieved, config.beta, config.tau_it,
                        config.use_temperature_it, config.renormalize_output,
                        "query")


@dataclass(frozen=True)
class PrototypeSet:
    """A stack of class vectors: one row per class, in class-index order."""

    matrix: np.ndarray
    kind: str  # "zeroshot" | "retrieved" | "final"
    partial: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("zeroshot", "retrieved", "final"):
            raise errors.ValidationError(f"unknown prototype kind {self.kind!r}")
        matrix = np.asarray(self.matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] < 1:
            raise errors.ValidationError("prototype matrix must be (n_classes, dim)")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def n_classes(self) -> int:
        return int(self.matrix.shape[0])


def zeroshot_prototypes(specs) -> PrototypeSet:
    """Merged (renormalized-mean) prototype per class, no retrieval."""
    if not specs:
        raise errors.ValidationError("spec list is empty")
    rows = [spec.merged_prototype() for spec in specs]
    return PrototypeSet(np.vstack(rows), kind="zeroshot")


def enrich_all_prototypes(specs, llm_bank: EmbeddingBank,
                          vlm_text_bank: EmbeddingBank,
                          retriever: Retriever,
                          config: EnrichmentConfig,
                          merge_aliases: str = "before") -> PrototypeSet:
    """Enrich every class prototype through caption retrieval.

    Retrieval runs against ``llm_bank`` with each class's retrieval query;
    fusion embeddings come from ``vlm_text_bank`` at the same ids, so the two
    banks must be aligned row-for-row. ``merge_aliases`` picks whether alias
    prototypes merge before enrichment (one retrieval per class) or after
    (one retrieval per alias, merging the enriched outputs).
    """
    if not specs:
        raise errors.ValidationError("spec list is empty")
    if merge_aliases not in ("before", "after"):
        raise errors.ValidationError(
            f'merge_aliases must be "before" or "after", got {merge_aliases!r}')
    if llm_bank.count != vlm_text_bank.count:
        raise errors.BankMisalignment(
            f"caption banks misaligned: {llm_bank.count} vs {vlm_text_bank.count} rows")
    if retriever.bank is not llm_bank:
        raise errors.ValidationError(
            "retriever must be bound to the retrieval-space caption bank")
    for spec in specs:
        if spec.retrieval_space != llm_bank.space_tag:
            raise errors.SpaceMismatch(
                f"class {spec.name!r} retrieval space {spec.retrieval_space!r} "
                f"!= bank space {llm_bank.space_tag!r}")
        if spec.prototype_space != vlm_text_bank.space_tag:
            raise errors.SpaceMismatch(
                f"class {spec.name!r} prototype space {spec.prototype_space!r} "
                f"!= bank space {vlm_text_bank.space_tag!r}")
        if spec.retrieval_queries.shape[1] != llm_bank.dim:
            raise errors.DimensionMismatch(
                f"class {spec.name!r} retrieval query dim "
                f"{spec.retrieval_queries.shape[1]} != bank dim {llm_bank.dim}")
        if spec.prototypes.shape[1] != vlm_text_bank.dim:
            raise errors.DimensionMismatch(
                f"class {spec.name!r} prototype dim {spec.prototypes.shape[1]} "
                f"!= bank dim {vlm_text_bank.dim}")

    def enrich_one(proto_vec: np.ndarray, query_vec: np.ndarray) -> EnrichedVector:
        if config.alpha == 0.0:
            # endpoint short-circuit, skips retrieval entirely
            return EnrichedVector(
                _identity_or_renorm(proto_vec, config.renormalize_output))
        hits = retriever.topk(query_vec, config.k,
                              space_tag=llm_bank.space_tag)
        retrieved = gather_captions(hits, vlm_text_bank)
        return enrich_prototype(proto_vec, retrieved, config)

    rows = []
    partial_ids = []
    for spec in specs:
        if merge_aliases == "before":
            result = enrich_one(spec.merged_prototype(),
                                spec.merged_retrieval_query())
        else:
            per_alias = [enrich_one(spec.prototypes[j], spec.retrieval_queries[j])
                         for j in range(len(spec.all_names))]
            merged = merge_alias_prototypes(
                np.vstack([ev.vector for ev in per_alias]))
            result = EnrichedVector(merged,
                                    partial=any(ev.partial for ev in per_alias))
        rows.append(result.vector)
        if result.partial:
            partial_ids.append(spec.index)
    return PrototypeSet(np.vstack(rows), kind="final",
                        partial=tuple(partial_ids))

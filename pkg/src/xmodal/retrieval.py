"""Cosine ranking and AP/mAP scoring for Img2Txt and Txt2Img retrieval.

Relevance is class-label match; the whole gallery is ranked per query with
ties broken by ascending gallery index, and AP sums precision at every
relevant rank divided by the total relevant count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, XShotSplit
from .errors import ConfigError

logger = logging.getLogger(__name__)


def cosine_sim(q: np.ndarray, g: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    nq = np.linalg.norm(q)
    ng = np.linalg.norm(g)
    if nq == 0.0 or ng == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(q @ g / (nq * ng))


@dataclass(frozen=True)
class RankedList:
    """Gallery ordering for one query, highest similarity first."""

    query_index: int
    order: tuple[int, ...]
    relevance: tuple[int, ...]  # aligned with `order`


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    map_score: float
    per_query_ap: tuple[float, ...]
    n_queries: int
    n_gallery: int
    skipped_queries: int = 0
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "map": self.map_score,
            "per_query_ap": list(self.per_query_ap),
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            "skipped_queries": self.skipped_queries,
            "fingerprint": self.fingerprint,
            **self.extra,
        }


def _unit_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return X / norms


def rank_gallery(similarities: np.ndarray, relevance_bits: np.ndarray, query_index: int) -> RankedList:
    """Order gallery indices by descending similarity, ties by ascending index."""
    m = similarities.shape[0]
    order = np.lexsort((np.arange(m), -similarities))
    return RankedList(
        query_index=query_index,
        order=tuple(int(i) for i in order),
        relevance=tuple(int(b) for b in relevance_bits[order]),
    )


def average_precision(ranked: RankedList) -> float:
    """Precision accumulated at relevant ranks over the full gallery, divided by the relevant count."""
    rel = np.asarray(ranked.relevance, dtype=np.float64)
    total_relevant = rel.sum()
    if total_relevant == 0:
        raise ValueError(f"query {ranked.query_index} has no relevant gallery item")
    precision_at = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((precision_at * rel).sum() / total_relevant)


def mean_ap(
    queries: np.ndarray,
    gallery: np.ndarray,
    relevance,
    direction: str = "",
    fingerprint: str = "",
) -> RetrievalReport:
    """Rank the full gallery per query by cosine similarity and average the APs.

    `relevance` is either a boolean (n_queries, n_gallery) matrix or a
    callable (query_index, gallery_index) -> bool. Queries with no relevant
    gallery item are excluded from the mean with a logged warning.
    """
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.size == 0 or gallery.size == 0:
        raise ConfigError("mean_ap needs non-empty queries and gallery")

    if callable(relevance):
        rel_matrix = np.array(
            [
                [bool(relevance(i, j)) for j in range(gallery.shape[0])]
                for i in range(queries.shape[0])
            ]
        )
    else:
        rel_matrix = np.asarray(relevance, dtype=bool)
        if rel_matrix.shape != (queries.shape[0], gallery.shape[0]):
            raise ConfigError(
                f"relevance matrix shape {rel_matrix.shape} does not match "
                f"({queries.shape[0]}, {gallery.shape[0]})"
            )

    sims = _unit_rows(queries) @ _unit_rows(gallery).T
    aps = []
    skipped = 0
    for i in range(queries.shape[0]):
        bits = rel_matrix[i].astype(np.int64)
        if bits.sum() == 0:
            skipped += 1
            logger.warning("query %d has no relevant gallery item; excluded from mAP", i)
            continue
        aps.append(average_precision(rank_gallery(sims[i], bits, i)))
    if not aps:
        raise ConfigError("every query was skipped; mAP undefined")
    return RetrievalReport(
        direction=direction,
        map_score=float(np.mean(aps)),
        per_query_ap=tuple(aps),
        n_queries=queries.shape[0],
        n_gallery=gallery.shape[0],
        skipped_queries=skipped,
        fingerprint=fingerprint,
    )


def evaluate(
    model,
    split: XShotSplit,
    corpus: Corpus,
    domain: str = "target",
    fingerprint: str = "",
) -> dict:
    """Img2Txt and Txt2Img mAP over a domain's query/gallery partition.

    `model` must expose embed_images / embed_texts; Img2Txt ranks the text
    gallery for image queries, Txt2Img the reverse, relevance is same-class.
    """
    if domain == "target":
        q_idx, g_idx = split.target_query, split.target_gallery
    elif domain == "source":
        q_idx, g_idx = split.source_query, split.source_gallery
    else:
        raise ConfigError(f"domain must be 'target' or 'source', got {domain!r}")
    if not q_idx or not g_idx:
        raise ConfigError(f"{domain} query/gallery is empty")

    q_labels = corpus.labels(q_idx)
    g_labels = corpus.labels(g_idx)
    rel = q_labels[:, None] == g_labels[None, :]

    u_img_q = model.embed_images(corpus.image_matrix(q_idx))
    u_txt_q = model.embed_texts(corpus.text_matrix(q_idx))
    u_img_g = model.embed_images(corpus.image_matrix(g_idx))
    u_txt_g = model.embed_texts(corpus.text_matrix(g_idx))

    img2txt = mean_ap(u_img_q, u_txt_g, rel, direction="Img2Txt", fingerprint=fingerprint)
    txt2img = mean_ap(u_txt_q, u_img_g, rel, direction="Txt2Img", fingerprint=fingerprint)
    return {
        "img2txt": img2txt,
        "txt2img": txt2img,
        "avg": (img2txt.map_score + txt2img.map_score) / 2.0,
    }

"""Composed retrieval: query composition, gallery scoring, recall metrics.

Gallery videos are embedded as a weighted mean of their frame embeddings,
with weights softmaxed from frame/modification-text similarity (query
scoring); at high temperature this degrades to a uniform mean, which is also
the convention for the visual-only baseline. Retrieval is exact argmax of
cosine over the gallery with deterministic ascending-id tie-breaks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .embeddings import EmbeddingStore, frame_id

DEFAULT_KS = (1, 5, 10, 50)
SUBSET_KS = (1, 2, 3)


class RetrievalError(Exception):
    pass


def frame_weights(frame_embs: Sequence[np.ndarray], text_emb: np.ndarray, temp: float = 1.0) -> np.ndarray:
    """Softmax of frame-to-text cosines at the given temperature.

    Identical frames get uniform weights; as temp -> 0 the mass concentrates
    on the best-matching frame.
    """
    if len(frame_embs) < 1:
        raise RetrievalError("need at least one frame")
    if temp <= 0:
        raise RetrievalError("temperature must be > 0")
    logits = np.array([np.dot(f.astype(np.float64), text_emb.astype(np.float64)) for f in frame_embs])
    logits = logits / temp
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def video_embedding(frame_embs: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Normalized weighted mean of frame embeddings."""
    if len(frame_embs) != len(weights):
        raise RetrievalError(f"{len(frame_embs)} frames but {len(weights)} weights")
    acc = np.zeros(len(frame_embs[0]), dtype=np.float64)
    for w, f in zip(weights, frame_embs):
        acc += float(w) * f.astype(np.float64)
    norm = np.linalg.norm(acc)
    if norm < 1e-12:
        raise RetrievalError("weighted frame sum is the zero vector")
    return acc / norm


def compose_query(
    query_visual: np.ndarray | Sequence[np.ndarray],
    text_emb: Optional[np.ndarray],
    fusion: str = "avg",
    head=None,
) -> np.ndarray:
    """Fuse the visual query (image, or video as a list of frames) with the
    modification text into a unit query vector.

    Video queries first average their frame embeddings. Fusion 'avg' is the
    normalized mean of visual and text; 'mlp' runs a trained fusion head.
    """
    visual = _collapse_visual(query_visual)
    if text_emb is None:
        return visual
    if visual.shape != text_emb.shape:
        raise RetrievalError(f"dimension mismatch: {visual.shape} vs {text_emb.shape}")
    if fusion == "avg":
        acc = (visual.astype(np.float64) + text_emb.astype(np.float64)) / 2.0
        norm = np.linalg.norm(acc)
        if norm < 1e-12:
            raise RetrievalError("average fusion produced the zero vector")
        return acc / norm
    if fusion == "mlp":
        if head is None:
            raise RetrievalError("mlp fusion requires a trained head")
        return head.forward(visual, text_emb)
    raise RetrievalError(f"unknown fusion mode: {fusion!r}")


def _collapse_visual(query_visual) -> np.ndarray:
    if isinstance(query_visual, np.ndarray) and query_visual.ndim == 1:
        return query_visual.astype(np.float64)
    frames = list(query_visual)
    acc = np.zeros(len(frames[0]), dtype=np.float64)
    for f in frames:
        acc += f.astype(np.float64)
    acc /= len(frames)
    norm = np.linalg.norm(acc)
    if norm < 1e-12:
        raise RetrievalError("mean of query frames is the zero vector")
    return acc / norm


def equally_spaced_indices(count: int, n: int) -> list[int]:
    """n frame indices spread evenly over [0, count); all frames if n >= count."""
    if count < 1 or n < 1:
        raise RetrievalError("count and n must be >= 1")
    if n >= count:
        return list(range(count))
    if n == 1:
        return [count // 2]
    pos = np.linspace(0, count - 1, n)
    return sorted({int(round(p)) for p in pos})


@dataclass(frozen=True)
class ComposedQuery:
    query_id: str
    f: np.ndarray
    target_id: str
    subset_ids: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class GalleryEntry:
    video_id: str
    h: np.ndarray


class Gallery:
    """Immutable id-indexed matrix of gallery embeddings."""

    def __init__(self, entries: Iterable[GalleryEntry]):
        entries = list(entries)
        if not entries:
            raise RetrievalError("gallery must be nonempty")
        self.ids = [e.video_id for e in entries]
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError("duplicate gallery ids")
        self.matrix = np.stack([e.h.astype(np.float64) for e in entries])
        self._row = {vid: i for i, vid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._row

    def similarities(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f.astype(np.float64)


def retrieve(query: ComposedQuery, gallery: Gallery) -> list[str]:
    """Gallery ids by descending cosine to the query, ties by ascending id.

    With subset_ids present the ranking is restricted to that subset.
    """
    sims = gallery.similarities(query.f)
    if query.subset_ids is not None:
        idxs = [gallery._row[v] for v in query.subset_ids]
    else:
        idxs = range(len(gallery))
    order = sorted(idxs, key=lambda i: (-sims[i], gallery.ids[i]))
    return [gallery.ids[i] for i in order]


def rank_of_target(query: ComposedQuery, gallery: Gallery, subset: bool = False) -> int:
    """1-based rank of the ground-truth target under the tie-break rule:
    1 + (strictly more similar) + (equally similar with smaller id)."""
    sims = gallery.similarities(query.f)
    if subset:
        if query.subset_ids is None:
            raise RetrievalError(f"query {query.query_id} has no subset")
        idxs = [gallery._row[v] for v in query.subset_ids]
    else:
        idxs = range(len(gallery))
    if query.target_id not in gallery._row:
        raise RetrievalError(f"target {query.target_id!r} not in gallery")
    t_row = gallery._row[query.target_id]
    t_sim = sims[t_row]
    t_id = query.target_id
    rank = 1
    found = False
    for i in idxs:
        if i == t_row:
            found = True
            continue
        if sims[i] > t_sim or (sims[i] == t_sim and gallery.ids[i] < t_id):
            rank += 1
    if not found:
        raise RetrievalError(f"target {t_id!r} not in ranking set for query {query.query_id}")
    return rank


@dataclass
class RecallReport:
    r_at: dict[int, float]
    mean_r: float
    subset_r_at: Optional[dict[int, float]] = None
    n_queries: int = 0
    gallery_size: int = 0

    def to_json_obj(self) -> dict:
        obj = {
            "r_at": {str(k): v for k, v in sorted(self.r_at.items())},
            "mean_r": self.mean_r,
            "n_queries": self.n_queries,
            "gallery_size": self.gallery_size,
        }
        if self.subset_r_at is not None:
            obj["subset_r_at"] = {str(k): v for k, v in sorted(self.subset_r_at.items())}
        return obj


def report_from_ranks(
    ranks: Sequence[int],
    ks: Sequence[int] = DEFAULT_KS,
    subset_ranks: Optional[Sequence[int]] = None,
    gallery_size: int = 0,
) -> RecallReport:
    if not ranks:
        raise RetrievalError("no queries to report on")
    r_at = {k: sum(1 for r in ranks if r <= k) / len(ranks) for k in ks}
    subset_r_at = None
    if subset_ranks:
        subset_r_at = {k: sum(1 for r in subset_ranks if r <= k) / len(subset_ranks) for k in SUBSET_KS}
    return RecallReport(
        r_at=r_at,
        mean_r=sum(r_at.values()) / len(r_at),
        subset_r_at=subset_r_at,
        n_queries=len(ranks),
        gallery_size=gallery_size,
    )


def recall_report(
    queries: Sequence[ComposedQuery],
    gallery: Gallery,
    ks: Sequence[int] = DEFAULT_KS,
) -> RecallReport:
    """R@K over a fixed gallery, plus subset recall when subsets are present."""
    ranks = [rank_of_target(q, gallery) for q in queries]
    subset_ranks = [rank_of_target(q, gallery, subset=True) for q in queries if q.subset_ids is not None]
    return report_from_ranks(ranks, ks, subset_ranks or None, gallery_size=len(gallery))


def video_frames(video_id: str, frame_embs: EmbeddingStore, frame_count: int, n: Optional[int] = None) -> list[np.ndarray]:
    """Fetch a video's frame embeddings, optionally subsampled to n
    equally-spaced frames."""
    if n is None:
        indices = list(range(frame_count))
    else:
        indices = equally_spaced_indices(frame_count, n)
    return [frame_embs.get(frame_id(video_id, i)) for i in indices]


def gallery_for_text(
    video_ids: Sequence[str],
    frame_embs: EmbeddingStore,
    frame_counts: dict[str, int],
    text_emb: Optional[np.ndarray],
    n_frames: Optional[int] = None,
    temp: float = 1.0,
) -> Gallery:
    """Build gallery embeddings for one query's modification text.

    With text_emb None every video gets a uniform-weight mean (the
    visual-only convention).
    """
    entries = []
    for vid in video_ids:
        frames = video_frames(vid, frame_embs, frame_counts[vid], n_frames)
        if text_emb is None:
            w = uniform_weights(len(frames))
        else:
            w = frame_weights(frames, text_emb, temp)
        entries.append(GalleryEntry(video_id=vid, h=video_embedding(frames, w)))
    return Gallery(entries)


def frame_count_sweep(
    build_report,
    frame_counts: Sequence[int] = (1, 3, 5, 9, 15),
) -> dict[int, RecallReport]:
    """Run an evaluation at several gallery frame counts.

    build_report is a callable n_frames -> RecallReport; the sweep simply
    collects one report per N so corpus-dependent behavior stays observable.
    """
    return {n: build_report(n) for n in frame_counts}


def write_report_json(report_obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

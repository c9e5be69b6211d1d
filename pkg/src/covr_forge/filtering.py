"""Caption-pair and video-pair filters applied to mined pairs.

Caption pairs are screened by a fixed rule order (template blocklist, digit
diffs, out-of-vocabulary diffs, rare-word diffs, then the similarity band);
the first failing rule names the rejection reason, so a pair violating
several rules always reports the same one. The keep band on normalized text
similarity is strict at both ends: kept requires sim_min < s < sim_max.

Video pairs for a kept caption pair are the cross product of the two caption
sides' videos, scored by middle-frame visual similarity and truncated to the
configured cap (descending similarity, ties by ascending id pair).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .corpus import Corpus, Lexicon
from .embeddings import EmbeddingStore, frame_id, normalized_similarity
from .pairs import CaptionPair

REASON_KEPT = "kept"
REASON_TOO_SIMILAR = "too_similar"
REASON_TOO_DISSIMILAR = "too_dissimilar"
REASON_DIGIT = "digit_diff"
REASON_OOV = "oov_diff"
REASON_RARE = "rare_diff"
REASON_TEMPLATE = "template_caption"

# Seeded with the over-represented caption families observed in web corpora.
DEFAULT_TEMPLATE_BLOCKLIST = ("abstract of", "concept of", "flag of", "background", "hologram")


class FilterError(Exception):
    pass


@dataclass
class FilterConfig:
    sim_max: float = 0.96
    sim_min: float = 0.6
    zipf_min: float = 3.0
    template_blocklist: tuple[str, ...] = DEFAULT_TEMPLATE_BLOCKLIST
    max_video_pairs_per_caption_pair: int = 10
    visual_sim_min: Optional[float] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.sim_min < self.sim_max <= 1.0):
            raise FilterError(f"need 0 <= sim_min < sim_max <= 1, got ({self.sim_min}, {self.sim_max})")
        if self.max_video_pairs_per_caption_pair < 1:
            raise FilterError("max_video_pairs_per_caption_pair must be >= 1")
        self.template_blocklist = tuple(s.lower() for s in self.template_blocklist)


@dataclass(frozen=True)
class FilterDecision:
    kept: bool
    reason: str
    text_sim: Optional[float] = None

    def __post_init__(self) -> None:
        assert self.kept == (self.reason == REASON_KEPT)


def filter_caption_pair(
    pair: CaptionPair,
    text_embs: EmbeddingStore,
    lexicon: Lexicon,
    cfg: FilterConfig,
) -> FilterDecision:
    """Apply the caption-pair rules in fixed order; first failure wins."""
    for caption in (pair.caption_a, pair.caption_b):
        if any(bad in caption for bad in cfg.template_blocklist):
            return FilterDecision(False, REASON_TEMPLATE)

    diffs = pair.diff_tokens()
    if any(any(ch.isdigit() for ch in tok) for tok in diffs):
        return FilterDecision(False, REASON_DIGIT)
    if any(not lexicon.in_dictionary(tok) for tok in diffs):
        return FilterDecision(False, REASON_OOV)
    for tok in diffs:
        score = lexicon.zipf_score(tok)
        if score is None or score < cfg.zipf_min:
            return FilterDecision(False, REASON_RARE)

    sim = normalized_similarity(text_embs.get(pair.caption_a), text_embs.get(pair.caption_b))
    if sim >= cfg.sim_max:
        return FilterDecision(False, REASON_TOO_SIMILAR, text_sim=sim)
    if sim <= cfg.sim_min:
        return FilterDecision(False, REASON_TOO_DISSIMILAR, text_sim=sim)
    return FilterDecision(True, REASON_KEPT, text_sim=sim)


@dataclass
class FramesManifest:
    """video_id -> frame count, from the `video_id,frame_count` CSV."""

    counts: dict[str, int] = field(default_factory=dict)

    def frame_count(self, video_id: str) -> int:
        try:
            return self.counts[video_id]
        except KeyError:
            raise FilterError(f"video {video_id!r} missing from frames manifest") from None

    def middle_index(self, video_id: str) -> int:
        return self.frame_count(video_id) // 2


def load_frames_manifest(path: str | Path) -> FramesManifest:
    manifest = FramesManifest()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "video_id" not in reader.fieldnames or "frame_count" not in reader.fieldnames:
            raise FilterError(f"{path}: header must contain video_id and frame_count")
        for row in reader:
            try:
                count = int(row["frame_count"])
            except (TypeError, ValueError):
                raise FilterError(f"line {reader.line_num}: bad frame_count {row.get('frame_count')!r}") from None
            if count < 1:
                raise FilterError(f"line {reader.line_num}: frame_count must be >= 1")
            manifest.counts[row["video_id"]] = count
    return manifest


def save_frames_manifest(manifest: FramesManifest, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "frame_count"])
        for video_id, count in manifest.counts.items():
            writer.writerow([video_id, count])


def middle_frame_embedding(video_id: str, frame_embs: EmbeddingStore, manifest: FramesManifest):
    return frame_embs.get(frame_id(video_id, manifest.middle_index(video_id)))


def select_video_pairs(
    pair: CaptionPair,
    corpus: Corpus,
    frame_embs: EmbeddingStore,
    manifest: FramesManifest,
    cfg: FilterConfig,
) -> list[tuple[str, str, float]]:
    """Top video pairs for a caption pair by middle-frame visual similarity.

    Returns (query_video, target_video, visual_sim) triples where the query
    side carries caption_a and the target side caption_b, sorted by descending
    similarity with ties broken by ascending id pair, truncated to the cap.
    Setting visual_sim_min drops pairs below that normalized similarity.
    """
    by_caption = corpus.videos_by_caption()
    videos_a = by_caption.get(pair.caption_a, [])
    videos_b = by_caption.get(pair.caption_b, [])
    if not videos_a or not videos_b:
        raise FilterError(f"caption pair has no videos in corpus: {pair.caption_a!r} / {pair.caption_b!r}")

    mids_a = {v: middle_frame_embedding(v, frame_embs, manifest) for v in videos_a}
    mids_b = {v: middle_frame_embedding(v, frame_embs, manifest) for v in videos_b}

    scored = []
    for va in videos_a:
        for vb in videos_b:
            if va == vb:
                continue
            sim = normalized_similarity(mids_a[va], mids_b[vb])
            if cfg.visual_sim_min is not None and sim < cfg.visual_sim_min:
                continue
            scored.append((va, vb, sim))
    scored.sort(key=lambda t: (-t[2], t[0], t[1]))
    return scored[: cfg.max_video_pairs_per_caption_pair]

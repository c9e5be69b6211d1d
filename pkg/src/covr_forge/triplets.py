"""Assembling (query video, modification text, target video) triplets.

Covers final triplet construction from filtered video pairs and generated
texts, dataset statistics, the static/dynamic flow-magnitude split, and
candidate construction for the human-verified evaluation set (one video pair
per caption pair, three candidate texts, contamination check against the
training corpus).
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .corpus import Corpus
from .embeddings import EmbeddingStore
from .filtering import FilterConfig, FramesManifest, filter_caption_pair, select_video_pairs
from .pairs import CaptionPair, mine_corpus_pairs
from .textgen import ModificationText

DEFAULT_FLOW_THRESHOLD = 1.0


class TripletError(Exception):
    pass


@dataclass(frozen=True)
class DirectedVideoPair:
    """One directed (query -> target) video pair with its caption provenance."""

    query_video: str
    target_video: str
    caption_query: str
    caption_target: str
    text_sim: float
    visual_sim: float


@dataclass(frozen=True)
class CoVRTriplet:
    query_video: str
    target_video: str
    modification: ModificationText
    caption_a: str
    caption_b: str
    text_sim: float
    visual_sim: float
    flow_magnitude_target: Optional[float] = None

    def __post_init__(self) -> None:
        assert self.query_video != self.target_video
        assert 0.0 <= self.text_sim <= 1.0 and 0.0 <= self.visual_sim <= 1.0

    def to_json_obj(self) -> dict:
        obj = {
            "query_video": self.query_video,
            "target_video": self.target_video,
            "text": self.modification.text,
            "source": self.modification.source,
            "caption_a": self.caption_a,
            "caption_b": self.caption_b,
            "text_sim": self.text_sim,
            "visual_sim": self.visual_sim,
            "flow_magnitude_target": self.flow_magnitude_target,
        }
        if self.modification.template_id is not None:
            obj["template_id"] = self.modification.template_id
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CoVRTriplet":
        return cls(
            query_video=obj["query_video"],
            target_video=obj["target_video"],
            modification=ModificationText(
                text=obj["text"], source=obj["source"], template_id=obj.get("template_id")
            ),
            caption_a=obj["caption_a"],
            caption_b=obj["caption_b"],
            text_sim=obj["text_sim"],
            visual_sim=obj["visual_sim"],
            flow_magnitude_target=obj.get("flow_magnitude_target"),
        )


def build_triplets(
    video_pairs: list[DirectedVideoPair],
    texts: list[ModificationText],
    corpus: Optional[Corpus] = None,
) -> list[CoVRTriplet]:
    """Zip directed video pairs with their modification texts.

    Target flow magnitudes are pulled from the corpus when available. Output
    order is deterministic: sorted by (target_video, query_video, text).
    """
    if len(video_pairs) != len(texts):
        raise TripletError(f"{len(video_pairs)} video pairs but {len(texts)} texts")
    out = []
    for pair, text in zip(video_pairs, texts):
        flow = None
        if corpus is not None:
            flow = corpus.get(pair.target_video).flow_magnitude
        out.append(
            CoVRTriplet(
                query_video=pair.query_video,
                target_video=pair.target_video,
                modification=text,
                caption_a=pair.caption_query,
                caption_b=pair.caption_target,
                text_sim=pair.text_sim,
                visual_sim=pair.visual_sim,
                flow_magnitude_target=flow,
            )
        )
    out.sort(key=lambda t: (t.target_video, t.query_video, t.modification.text))
    return out


@dataclass
class DatasetStats:
    n_triplets: int
    n_distinct_videos: int
    n_distinct_texts: int
    avg_text_words: Optional[float]
    triplets_per_target: dict[int, int]
    text_word_length: dict[int, int]
    static_fraction: Optional[float]
    flow_threshold: float = DEFAULT_FLOW_THRESHOLD

    def to_json_obj(self) -> dict:
        return {
            "n_triplets": self.n_triplets,
            "n_distinct_videos": self.n_distinct_videos,
            "n_distinct_texts": self.n_distinct_texts,
            "avg_text_words": self.avg_text_words,
            "triplets_per_target": {str(k): v for k, v in sorted(self.triplets_per_target.items())},
            "text_word_length": {str(k): v for k, v in sorted(self.text_word_length.items())},
            "static_fraction": self.static_fraction,
            "flow_threshold": self.flow_threshold,
        }


def compute_stats(triplets: list[CoVRTriplet], flow_threshold: float = DEFAULT_FLOW_THRESHOLD) -> DatasetStats:
    videos = set()
    texts = set()
    per_target: dict[str, int] = {}
    word_hist: dict[int, int] = {}
    total_words = 0
    n_flow = 0
    n_static = 0
    for t in triplets:
        videos.add(t.query_video)
        videos.add(t.target_video)
        texts.add(t.modification.text)
        per_target[t.target_video] = per_target.get(t.target_video, 0) + 1
        words = len(t.modification.text.split())
        word_hist[words] = word_hist.get(words, 0) + 1
        total_words += words
        if t.flow_magnitude_target is not None:
            n_flow += 1
            if t.flow_magnitude_target < flow_threshold:
                n_static += 1
    target_hist: dict[int, int] = {}
    for count in per_target.values():
        target_hist[count] = target_hist.get(count, 0) + 1
    return DatasetStats(
        n_triplets=len(triplets),
        n_distinct_videos=len(videos),
        n_distinct_texts=len(texts),
        avg_text_words=(total_words / len(triplets)) if triplets else None,
        triplets_per_target=target_hist,
        text_word_length=word_hist,
        static_fraction=(n_static / n_flow) if n_flow else None,
        flow_threshold=flow_threshold,
    )


def split_static_dynamic(
    triplets: list[CoVRTriplet], threshold: float = DEFAULT_FLOW_THRESHOLD
) -> tuple[list[CoVRTriplet], list[CoVRTriplet]]:
    """Partition by target flow magnitude: static < threshold <= dynamic."""
    static, dynamic = [], []
    for t in triplets:
        if t.flow_magnitude_target is None:
            raise TripletError(f"triplet {t.query_video} -> {t.target_video} has no flow magnitude")
        (static if t.flow_magnitude_target < threshold else dynamic).append(t)
    return static, dynamic


def write_triplets_jsonl(triplets: Iterable[CoVRTriplet], path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_json_obj(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_triplets_jsonl(path) -> list[CoVRTriplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(CoVRTriplet.from_json_obj(json.loads(line)))
    return out


@dataclass(frozen=True)
class AnnotationCandidate:
    """One evaluation candidate shown to annotators: a directed video pair
    with exactly three candidate modification texts and three reference
    frames (first/middle/last) per video."""

    candidate_id: str
    query_video: str
    target_video: str
    texts: tuple[str, str, str]
    query_frames: tuple[str, str, str]
    target_frames: tuple[str, str, str]
    caption_query: str = ""
    caption_target: str = ""

    def __post_init__(self) -> None:
        assert len(self.texts) == 3 and len(self.query_frames) == 3 and len(self.target_frames) == 3

    def to_json_obj(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "query_video": self.query_video,
            "target_video": self.target_video,
            "texts": list(self.texts),
            "query_frames": list(self.query_frames),
            "target_frames": list(self.target_frames),
            "caption_query": self.caption_query,
            "caption_target": self.caption_target,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AnnotationCandidate":
        return cls(
            candidate_id=obj["candidate_id"],
            query_video=obj["query_video"],
            target_video=obj["target_video"],
            texts=tuple(obj["texts"]),
            query_frames=tuple(obj["query_frames"]),
            target_frames=tuple(obj["target_frames"]),
            caption_query=obj.get("caption_query", ""),
            caption_target=obj.get("caption_target", ""),
        )


def reference_frames(video_id: str, manifest: FramesManifest) -> tuple[str, str, str]:
    """First/middle/last frame identifiers for a video."""
    count = manifest.frame_count(video_id)
    return (
        f"{video_id}#0",
        f"{video_id}#{count // 2}",
        f"{video_id}#{count - 1}",
    )


@dataclass
class EvalCandidatePools:
    validation: list[AnnotationCandidate] = field(default_factory=list)
    annotation: list[AnnotationCandidate] = field(default_factory=list)


def make_eval_candidates(
    heldout: Corpus,
    training_video_ids: set[str],
    text_embs: EmbeddingStore,
    lexicon,
    frame_embs: EmbeddingStore,
    manifest: FramesManifest,
    filter_cfg: FilterConfig,
    gen_texts: Callable[[CaptionPair], list[str]],
    n_val: int,
    n_annotate: int,
    seed: int,
) -> EvalCandidatePools:
    """Run the pipeline on a held-out corpus to produce evaluation candidates.

    Uses a video-pair cap of 1 (one best pair per caption pair) and three
    candidate texts per directed pair, then draws disjoint validation and
    annotation pools with a seeded shuffle. Raises if the held-out corpus
    shares any video id with the training corpus.

    gen_texts must return exactly three candidate texts for a directed pair.
    """
    overlap = sorted(set(heldout.records) & training_video_ids)
    if overlap:
        raise TripletError(f"held-out corpus overlaps training corpus: {overlap}")

    eval_cfg = FilterConfig(
        sim_max=filter_cfg.sim_max,
        sim_min=filter_cfg.sim_min,
        zipf_min=filter_cfg.zipf_min,
        template_blocklist=filter_cfg.template_blocklist,
        max_video_pairs_per_caption_pair=1,
        visual_sim_min=filter_cfg.visual_sim_min,
    )

    mined = mine_corpus_pairs(heldout.distinct_captions())
    candidates: list[AnnotationCandidate] = []
    for pair in mined:
        decision = filter_caption_pair(pair, text_embs, lexicon, eval_cfg)
        if not decision.kept:
            continue
        top = select_video_pairs(pair, heldout, frame_embs, manifest, eval_cfg)
        if not top:
            continue
        va, vb, _ = top[0]
        for directed, qv, tv in ((pair, va, vb), (pair.reversed(), vb, va)):
            texts = gen_texts(directed)
            if len(texts) != 3:
                raise TripletError(f"expected 3 candidate texts, got {len(texts)}")
            cand_id = hashlib.blake2b(
                f"{qv}|{tv}|{directed.caption_a}|{directed.caption_b}".encode("utf-8"), digest_size=8
            ).hexdigest()
            candidates.append(
                AnnotationCandidate(
                    candidate_id=f"cand-{cand_id}",
                    query_video=qv,
                    target_video=tv,
                    texts=tuple(texts),
                    query_frames=reference_frames(qv, manifest),
                    target_frames=reference_frames(tv, manifest),
                    caption_query=directed.caption_a,
                    caption_target=directed.caption_b,
                )
            )

    candidates.sort(key=lambda c: c.candidate_id)
    if n_val + n_annotate > len(candidates):
        raise TripletError(
            f"requested {n_val} validation + {n_annotate} annotation candidates "
            f"but only {len(candidates)} available"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(candidates))
    picked = [candidates[i] for i in order]
    return EvalCandidatePools(
        validation=picked[:n_val],
        annotation=picked[n_val : n_val + n_annotate],
    )

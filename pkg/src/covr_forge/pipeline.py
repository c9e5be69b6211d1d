"""Stage orchestration: resumable, hash-manifested pipeline runs.

Each stage reads upstream artifacts, writes its outputs under
<out_dir>/artifacts/, and records a manifest (input hashes, config hash,
seed, counts, wall time) under <out_dir>/manifests/. A stage whose inputs,
outputs, and config are unchanged is skipped unless forced; with strict mode
a hash mismatch aborts instead of re-running. Artifacts never embed
timestamps, so two runs with the same inputs, config, and a deterministic
generation service produce byte-identical artifact trees.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import annotate
from .corpus import Corpus, Lexicon, load_corpus, load_lexicon
from .embeddings import EmbeddingStore, TextEmbedder, load_embeddings, store_from_texts
from .filtering import (
    DEFAULT_TEMPLATE_BLOCKLIST,
    FilterConfig,
    FramesManifest,
    filter_caption_pair,
    load_frames_manifest,
    middle_frame_embedding,
    select_video_pairs,
)
from .pairs import CaptionPair, mine_corpus_pairs, read_pairs_jsonl
from .retrieval import (
    Gallery,
    GalleryEntry,
    ComposedQuery,
    compose_query,
    frame_weights,
    gallery_for_text,
    rank_of_target,
    report_from_ranks,
    uniform_weights,
    video_embedding,
    video_frames,
    write_report_json,
)
from .textgen import (
    ModificationText,
    MtgClient,
    MtgError,
    MtgRequest,
    MtgTransportError,
    llm_generate,
    paraphrase,
    rule_based_text,
)
from .training import HnNceConfig, TrainingRow, load_head, save_head, train
from .triplets import (
    CoVRTriplet,
    DirectedVideoPair,
    compute_stats,
    build_triplets,
    make_eval_candidates,
    read_triplets_jsonl,
    write_triplets_jsonl,
)

logger = logging.getLogger(__name__)

MTG_URL_ENV = "COVR_FORGE_MTG_URL"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_SERVICE = 4


class ConfigError(Exception):
    pass


class MissingArtifactError(Exception):
    pass


class StrictHashError(Exception):
    pass


@dataclass
class MtgConfig:
    mode: str = "rule"  # rule | rule-paraphrase | llm
    url: str = "http://127.0.0.1:8099"
    top_k: int = 200
    temperature: float = 0.8
    n_candidates: int = 1
    select: str = "first"
    concurrency: int = 8

    def __post_init__(self) -> None:
        if self.mode not in ("rule", "rule-paraphrase", "llm"):
            raise ConfigError(f"unknown mtg mode: {self.mode!r}")
        if self.select not in ("first", "longest"):
            raise ConfigError(f"unknown select strategy: {self.select!r}")


@dataclass
class EvalConfig:
    n_val: int = 40
    n_annotate: int = 25
    ks: tuple[int, ...] = (1, 5, 10, 50)
    n_frames: Optional[int] = None
    subset_size: int = 6
    frame_sweep: tuple[int, ...] = ()


@dataclass
class PipelineConfig:
    seed: int
    out_dir: Path
    corpus_train: Path
    corpus_heldout: Optional[Path]
    dictionary: Path
    zipf: Path
    embed_dim: int
    text_embeddings: Optional[Path]  # None -> deterministic toy embedder
    frame_embeddings: Path
    frames_manifest: Path
    filter: FilterConfig
    mtg: MtgConfig
    train: HnNceConfig
    eval: EvalConfig
    both_directions: bool = True
    workers: int = 1
    annotate_port: int = 8077
    annotate_lease_seconds: float = 600.0
    annotate_frames_dir: Optional[Path] = None

    @property
    def artifacts_dir(self) -> Path:
        return self.out_dir / "artifacts"

    @property
    def manifests_dir(self) -> Path:
        return self.out_dir / "manifests"

    def artifact(self, name: str) -> Path:
        return self.artifacts_dir / name


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"missing config key: {context}.{key}" if context else f"missing config key: {key}")
    return mapping[key]


def load_config(path: str | Path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Parse the YAML pipeline config; relative paths resolve against the
    config file's directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    base = path.parent

    def respath(value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else (base / p)

    overrides = overrides or {}
    corpus = _require(raw, "corpus", "")
    lexicon = _require(raw, "lexicon", "")
    embeddings = _require(raw, "embeddings", "")

    filt_raw = raw.get("filter", {})
    try:
        filt = FilterConfig(
            sim_max=filt_raw.get("sim_max", 0.96),
            sim_min=filt_raw.get("sim_min", 0.6),
            zipf_min=filt_raw.get("zipf_min", 3.0),
            template_blocklist=tuple(filt_raw.get("template_blocklist", DEFAULT_TEMPLATE_BLOCKLIST)),
            max_video_pairs_per_caption_pair=filt_raw.get("max_video_pairs_per_caption_pair", 10),
            visual_sim_min=filt_raw.get("visual_sim_min"),
        )
    except Exception as exc:
        raise ConfigError(f"bad filter config: {exc}") from None

    mtg_raw = dict(raw.get("mtg", {}))
    if "mtg_mode" in overrides:
        mtg_raw["mode"] = overrides["mtg_mode"]
    if "mtg_url" in overrides:
        mtg_raw["url"] = overrides["mtg_url"]
    if os.environ.get(MTG_URL_ENV):
        mtg_raw["url"] = os.environ[MTG_URL_ENV]
    if "n_candidates" in overrides:
        mtg_raw["n_candidates"] = overrides["n_candidates"]
    if "select" in overrides:
        mtg_raw["select"] = overrides["select"]
    mtg = MtgConfig(**{k: v for k, v in mtg_raw.items() if k in MtgConfig.__dataclass_fields__})

    train_raw = raw.get("train", {})
    try:
        train_cfg = HnNceConfig(
            **{k: v for k, v in train_raw.items() if k in HnNceConfig.__dataclass_fields__}
        )
    except Exception as exc:
        raise ConfigError(f"bad train config: {exc}") from None

    eval_raw = raw.get("eval", {})
    eval_cfg = EvalConfig(
        n_val=eval_raw.get("n_val", 40),
        n_annotate=eval_raw.get("n_annotate", 25),
        ks=tuple(eval_raw.get("ks", (1, 5, 10, 50))),
        n_frames=eval_raw.get("n_frames"),
        subset_size=eval_raw.get("subset_size", 6),
        frame_sweep=tuple(eval_raw.get("frame_sweep", ())),
    )

    seed = int(overrides.get("seed", raw.get("seed", 0)))
    train_cfg.seed = seed
    text_emb = embeddings.get("text", "toy")

    annotate_raw = raw.get("annotate", {})
    cfg = PipelineConfig(
        seed=seed,
        out_dir=respath(overrides.get("out_dir", _require(raw, "out_dir", ""))),
        corpus_train=respath(_require(corpus, "train", "corpus")),
        corpus_heldout=respath(corpus["heldout"]) if corpus.get("heldout") else None,
        dictionary=respath(_require(lexicon, "dictionary", "lexicon")),
        zipf=respath(_require(lexicon, "zipf", "lexicon")),
        embed_dim=int(_require(embeddings, "dim", "embeddings")),
        text_embeddings=None if text_emb in (None, "toy") else respath(text_emb),
        frame_embeddings=respath(_require(embeddings, "frames", "embeddings")),
        frames_manifest=respath(_require(embeddings, "frames_manifest", "embeddings")),
        filter=filt,
        mtg=mtg,
        train=train_cfg,
        eval=eval_cfg,
        both_directions=bool(raw.get("both_directions", True)),
        workers=int(overrides.get("workers", raw.get("workers", 1))),
        annotate_port=int(annotate_raw.get("port", 8077)),
        annotate_lease_seconds=float(annotate_raw.get("lease_seconds", 600.0)),
        annotate_frames_dir=respath(annotate_raw["frames_dir"]) if annotate_raw.get("frames_dir") else None,
    )
    return cfg


# --------------------------------------------------------------------------
# Shared loading helpers (memoized per run via RunContext)


@dataclass
class RunContext:
    cfg: PipelineConfig
    _cache: dict = field(default_factory=dict)

    def _memo(self, key: str, loader: Callable):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def train_corpus(self) -> Corpus:
        return self._memo("train_corpus", lambda: load_corpus(self.cfg.corpus_train))

    def heldout_corpus(self) -> Corpus:
        if self.cfg.corpus_heldout is None:
            raise ConfigError("corpus.heldout is required for this stage")
        return self._memo("heldout_corpus", lambda: load_corpus(self.cfg.corpus_heldout))

    def lexicon(self) -> Lexicon:
        return self._memo("lexicon", lambda: load_lexicon(self.cfg.dictionary, self.cfg.zipf))

    def frame_embeddings(self) -> EmbeddingStore:
        return self._memo("frames", lambda: load_embeddings(self.cfg.frame_embeddings))

    def frames_manifest(self) -> FramesManifest:
        return self._memo("manifest", lambda: load_frames_manifest(self.cfg.frames_manifest))

    def text_embedder(self) -> TextEmbedder:
        def build():
            store = load_embeddings(self.cfg.text_embeddings) if self.cfg.text_embeddings else None
            return TextEmbedder(self.cfg.embed_dim, store)

        return self._memo("text_embedder", build)

    def caption_store(self, captions: list[str]) -> EmbeddingStore:
        """Embedding store over caption keys (toy mode synthesizes it)."""
        embedder = self.text_embedder()
        if embedder.store is not None:
            return embedder.store
        return store_from_texts(captions, self.cfg.embed_dim)

    def mtg_client(self) -> MtgClient:
        return self._memo("mtg_client", lambda: MtgClient(base_url=self.cfg.mtg.url))


# --------------------------------------------------------------------------
# Stage implementations. Each returns a counts dict for the manifest.


def stage_mine(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    corpus = ctx.train_corpus()
    captions = corpus.distinct_captions()
    pairs = mine_corpus_pairs(captions, workers=cfg.workers)
    out = cfg.artifact("pairs.jsonl")
    with open(out, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json_obj(), ensure_ascii=False) + "\n")
    return {"videos": len(corpus), "distinct_captions": len(captions), "pairs": len(pairs)}


def stage_filter_pairs(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    pairs = read_pairs_jsonl(cfg.artifact("pairs.jsonl"))
    lexicon = ctx.lexicon()
    caption_texts = sorted({p.caption_a for p in pairs} | {p.caption_b for p in pairs})
    store = ctx.caption_store(caption_texts)
    kept = 0
    by_reason: dict[str, int] = {}
    with open(cfg.artifact("filter_report.jsonl"), "w", encoding="utf-8") as report, open(
        cfg.artifact("kept_pairs.jsonl"), "w", encoding="utf-8"
    ) as kept_out:
        for pair in pairs:
            decision = filter_caption_pair(pair, store, lexicon, cfg.filter)
            by_reason[decision.reason] = by_reason.get(decision.reason, 0) + 1
            report.write(
                json.dumps(
                    {
                        "caption_a": pair.caption_a,
                        "caption_b": pair.caption_b,
                        "kept": decision.kept,
                        "reason": decision.reason,
                        "text_sim": decision.text_sim,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            if decision.kept:
                kept += 1
                obj = pair.to_json_obj()
                obj["text_sim"] = decision.text_sim
                kept_out.write(json.dumps(obj, ensure_ascii=False) + "\n")
    return {"pairs_in": len(pairs), "kept": kept, "by_reason": by_reason}


def _read_kept_pairs(path: Path) -> list[tuple[CaptionPair, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append((CaptionPair.from_json_obj(obj), float(obj["text_sim"])))
    return out


def _directed_pairs(pairs: list[CaptionPair], both_directions: bool) -> list[tuple[CaptionPair, str]]:
    """Directed views of each canonical pair, tagged with the direction the
    text describes; records stay keyed by the canonical (a, b) order."""
    directed = []
    for pair in pairs:
        directed.append((pair, "ab"))
        if both_directions:
            directed.append((pair.reversed(), "ba"))
    return directed


def _canonical_key(pair: CaptionPair, direction: str) -> tuple[str, str, str]:
    if direction == "ab":
        return (pair.caption_a, pair.caption_b, direction)
    return (pair.caption_b, pair.caption_a, direction)


def generate_text(directed: CaptionPair, ctx: RunContext, n_candidates: Optional[int] = None) -> ModificationText:
    """One modification text for a directed caption pair, per the MTG mode."""
    cfg = ctx.cfg
    n = n_candidates if n_candidates is not None else cfg.mtg.n_candidates
    if cfg.mtg.mode == "rule":
        text = rule_based_text(directed, cfg.seed)
        if n > 1:
            cands = [rule_based_text(directed, cfg.seed + i).text for i in range(n)]
            text = ModificationText(
                text=cands[0], source=text.source, template_id=text.template_id, candidates=cands
            )
        return text
    if cfg.mtg.mode == "rule-paraphrase":
        text = rule_based_text(directed, cfg.seed)
        new = paraphrase(text.text, ctx.mtg_client())
        return ModificationText(text=new, source="rule_paraphrased", template_id=text.template_id)
    req = MtgRequest(
        caption_a=directed.caption_a,
        caption_b=directed.caption_b,
        top_k=cfg.mtg.top_k,
        temperature=cfg.mtg.temperature,
        n_candidates=n,
    )
    return llm_generate(req, ctx.mtg_client(), select=cfg.mtg.select)


def stage_gen_text(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    kept = _read_kept_pairs(cfg.artifact("kept_pairs.jsonl"))
    directed = _directed_pairs([p for p, _ in kept], cfg.both_directions)

    def gen(job: tuple[CaptionPair, str]):
        pair, direction = job
        return pair, direction, generate_text(pair, ctx)

    failures = 0
    needs_service = cfg.mtg.mode != "rule"
    results: list[tuple[CaptionPair, str, Optional[ModificationText], Optional[str]]] = []
    if needs_service and directed:
        # Probe once so total unreachability fails the stage rather than
        # silently failing every pair; other per-pair errors stay per-pair.
        try:
            generate_text(directed[0][0], ctx)
        except MtgTransportError:
            raise
        except MtgError:
            pass
        with ThreadPoolExecutor(max_workers=cfg.mtg.concurrency) as pool:
            futures = [pool.submit(gen, job) for job in directed]
            for job, fut in zip(directed, futures):
                try:
                    pair, direction, text = fut.result()
                    results.append((pair, direction, text, None))
                except MtgError as exc:
                    failures += 1
                    results.append((job[0], job[1], None, str(exc)))
    else:
        for job in directed:
            pair, direction, text = gen(job)
            results.append((pair, direction, text, None))

    with open(cfg.artifact("texts.jsonl"), "w", encoding="utf-8") as out, open(
        cfg.artifact("gen_text_failures.jsonl"), "w", encoding="utf-8"
    ) as failed:
        for pair, direction, text, error in results:
            if text is None:
                cap_a, cap_b, _ = _canonical_key(pair, direction)
                failed.write(
                    json.dumps(
                        {"caption_a": cap_a, "caption_b": cap_b, "direction": direction, "error": error},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
                logger.warning("generation failed for %r -> %r: %s", pair.caption_a, pair.caption_b, error)
                continue
            cap_a, cap_b, _ = _canonical_key(pair, direction)
            obj = {"caption_a": cap_a, "caption_b": cap_b, "direction": direction}
            obj.update(text.to_json_obj())
            out.write(json.dumps(obj, ensure_ascii=False) + "\n")
    return {"directed_pairs": len(directed), "texts": len(directed) - failures, "failures": failures}


def stage_filter_videos(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    kept = _read_kept_pairs(cfg.artifact("kept_pairs.jsonl"))
    corpus = ctx.train_corpus()
    frames = ctx.frame_embeddings()
    manifest = ctx.frames_manifest()
    n_pairs = 0
    with open(cfg.artifact("video_pairs.jsonl"), "w", encoding="utf-8") as out:
        for pair, text_sim in kept:
            for qv, tv, vis in select_video_pairs(pair, corpus, frames, manifest, cfg.filter):
                out.write(
                    json.dumps(
                        {
                            "caption_a": pair.caption_a,
                            "caption_b": pair.caption_b,
                            "query_video": qv,
                            "target_video": tv,
                            "visual_sim": vis,
                            "text_sim": text_sim,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
                n_pairs += 1
    return {"caption_pairs": len(kept), "video_pairs": n_pairs}


def stage_build_triplets(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    corpus = ctx.train_corpus()
    texts: dict[tuple[str, str, str], ModificationText] = {}
    with open(cfg.artifact("texts.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            texts[(obj["caption_a"], obj["caption_b"], obj["direction"])] = ModificationText.from_json_obj(obj)

    directed_rows: list[DirectedVideoPair] = []
    row_texts: list[ModificationText] = []
    n_video_pairs = 0
    skipped = 0
    with open(cfg.artifact("video_pairs.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            n_video_pairs += 1
            directions = [("ab", obj["query_video"], obj["target_video"], obj["caption_a"], obj["caption_b"])]
            if cfg.both_directions:
                directions.append(("ba", obj["target_video"], obj["query_video"], obj["caption_b"], obj["caption_a"]))
            for direction, qv, tv, cap_q, cap_t in directions:
                key = (obj["caption_a"], obj["caption_b"], direction)
                text = texts.get(key)
                if text is None:
                    skipped += 1
                    continue
                directed_rows.append(
                    DirectedVideoPair(
                        query_video=qv,
                        target_video=tv,
                        caption_query=cap_q,
                        caption_target=cap_t,
                        text_sim=obj["text_sim"],
                        visual_sim=obj["visual_sim"],
                    )
                )
                row_texts.append(text)
    triplets = build_triplets(directed_rows, row_texts, corpus)
    write_triplets_jsonl(triplets, cfg.artifact("triplets.jsonl"))
    return {"video_pairs": n_video_pairs, "triplets": len(triplets), "skipped_missing_text": skipped}


def stage_stats(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    triplets = read_triplets_jsonl(cfg.artifact("triplets.jsonl"))
    stats = compute_stats(triplets)
    with open(cfg.artifact("stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, hist in (
        ("triplets_per_target.csv", stats.triplets_per_target),
        ("text_word_length.csv", stats.text_word_length),
    ):
        with open(cfg.artifact(name), "w", encoding="utf-8") as fh:
            fh.write("value,count\n")
            for value in sorted(hist):
                fh.write(f"{value},{hist[value]}\n")
    return {"triplets": stats.n_triplets, "distinct_videos": stats.n_distinct_videos}


def stage_make_eval_set(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    heldout = ctx.heldout_corpus()
    train_corpus = ctx.train_corpus()
    lexicon = ctx.lexicon()
    frames = ctx.frame_embeddings()
    manifest = ctx.frames_manifest()
    caption_texts = [" ".join(t) for t in heldout.distinct_captions()]
    store = ctx.caption_store(caption_texts)

    if cfg.mtg.mode != "rule":
        probe = CaptionPair("a b", "a c", "substitute", "b", "c", 1)
        try:
            generate_text(probe, ctx, n_candidates=1)
        except MtgTransportError:
            raise
        except MtgError:
            pass

    def gen3(directed: CaptionPair) -> list[str]:
        text = generate_text(directed, ctx, n_candidates=3)
        return list(text.candidates or [text.text] * 3)

    pools = make_eval_candidates(
        heldout,
        set(train_corpus.records),
        store,
        lexicon,
        frames,
        manifest,
        cfg.filter,
        gen3,
        n_val=cfg.eval.n_val,
        n_annotate=cfg.eval.n_annotate,
        seed=cfg.seed,
    )

    with open(cfg.artifact("annotate_pool.jsonl"), "w", encoding="utf-8") as fh:
        for cand in pools.annotation:
            fh.write(json.dumps(cand.to_json_obj(), ensure_ascii=False) + "\n")

    gallery_ids = sorted(heldout.records)
    mids = {v: middle_frame_embedding(v, frames, manifest) for v in gallery_ids}
    with open(cfg.artifact("val_queries.jsonl"), "w", encoding="utf-8") as fh:
        for cand in pools.validation:
            subset = _visual_subset(cand.target_video, gallery_ids, mids, cfg.eval.subset_size)
            fh.write(
                json.dumps(
                    {
                        "query_id": cand.candidate_id,
                        "query_video_or_image": cand.query_video,
                        "text": cand.texts[0],
                        "target_video": cand.target_video,
                        "subset": subset,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return {
        "heldout_videos": len(heldout),
        "val_queries": len(pools.validation),
        "annotate_candidates": len(pools.annotation),
    }


def _visual_subset(target: str, gallery_ids: list[str], mids: dict, size: int) -> list[str]:
    """CIRR-style subset: the target plus its most visually similar gallery
    videos, by middle-frame similarity."""
    others = [v for v in gallery_ids if v != target]
    others.sort(key=lambda v: (-float(np.dot(mids[target], mids[v])), v))
    return sorted([target] + others[: size - 1])


def _training_rows(ctx: RunContext, triplets: list[CoVRTriplet]) -> list[TrainingRow]:
    cfg = ctx.cfg
    frames = ctx.frame_embeddings()
    manifest = ctx.frames_manifest()
    embedder = ctx.text_embedder()
    rows = []
    for t in triplets:
        visual = middle_frame_embedding(t.query_video, frames, manifest)
        text_emb = embedder.embed(t.modification.text)
        target_frames = video_frames(
            t.target_video, frames, manifest.frame_count(t.target_video), cfg.eval.n_frames
        )
        weights = frame_weights(target_frames, text_emb)
        target_emb = video_embedding(target_frames, weights)
        rows.append(TrainingRow(target_id=t.target_video, visual=visual, text=text_emb, target=target_emb))
    return rows


def stage_train(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    triplets = read_triplets_jsonl(cfg.artifact("triplets.jsonl"))
    rows = _training_rows(ctx, triplets)
    result = train(rows, cfg.embed_dim, cfg.train)
    save_head(result.head, cfg.artifact("head.ckpt"), meta={"seed": cfg.train.seed})
    with open(cfg.artifact("loss_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(result.loss_curve):
            fh.write(f"{epoch},{loss!r}\n")
    return {"rows": len(rows), "epochs": cfg.train.epochs, "final_loss": result.loss_curve[-1]}


def _load_queries(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def stage_eval(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    heldout = ctx.heldout_corpus()
    frames = ctx.frame_embeddings()
    manifest = ctx.frames_manifest()
    embedder = ctx.text_embedder()
    head, _ = load_head(cfg.artifact("head.ckpt"))
    queries = _load_queries(cfg.artifact("val_queries.jsonl"))
    gallery_ids = sorted(heldout.records)
    frame_counts = {v: manifest.frame_count(v) for v in gallery_ids}

    def run_mode(mode: str, n_frames: Optional[int]) -> dict:
        ranks, subset_ranks = [], []
        uniform_gallery = None
        if mode == "visual":
            entries = []
            for vid in gallery_ids:
                fr = video_frames(vid, frames, frame_counts[vid], n_frames)
                entries.append(GalleryEntry(vid, video_embedding(fr, uniform_weights(len(fr)))))
            uniform_gallery = Gallery(entries)
        for q in queries:
            visual = middle_frame_embedding(q["query_video_or_image"], frames, manifest)
            text_emb = embedder.embed(q["text"])
            if mode == "visual":
                f = visual.astype(np.float64)
                gallery = uniform_gallery
            else:
                gallery = gallery_for_text(gallery_ids, frames, frame_counts, text_emb, n_frames)
                if mode == "text":
                    f = text_emb.astype(np.float64)
                elif mode == "avg":
                    f = compose_query(visual, text_emb, fusion="avg")
                else:
                    f = compose_query(visual, text_emb, fusion="mlp", head=head)
            cq = ComposedQuery(
                query_id=q["query_id"],
                f=f,
                target_id=q["target_video"],
                subset_ids=tuple(q["subset"]) if q.get("subset") else None,
            )
            ranks.append(rank_of_target(cq, gallery))
            if cq.subset_ids is not None:
                subset_ranks.append(rank_of_target(cq, gallery, subset=True))
        report = report_from_ranks(ranks, cfg.eval.ks, subset_ranks or None, gallery_size=len(gallery_ids))
        return report.to_json_obj()

    report_obj = {
        "composed_mlp": run_mode("mlp", cfg.eval.n_frames),
        "composed_avg": run_mode("avg", cfg.eval.n_frames),
        "text_only": run_mode("text", cfg.eval.n_frames),
        "visual_only": run_mode("visual", cfg.eval.n_frames),
    }
    if cfg.eval.frame_sweep:
        report_obj["frame_sweep"] = {str(n): run_mode("mlp", n) for n in cfg.eval.frame_sweep}
    write_report_json(report_obj, cfg.artifact("eval_report.json"))
    return {
        "queries": len(queries),
        "gallery": len(gallery_ids),
        "composed_mlp_r1": report_obj["composed_mlp"]["r_at"]["1"],
    }


def stage_serve_annotate(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    queue = annotate.AnnotationQueue.from_files(
        cfg.artifact("annotate_pool.jsonl"),
        cfg.artifact("decision_log.jsonl"),
        lease_seconds=cfg.annotate_lease_seconds,
    )
    app = annotate.create_app(queue, frames_dir=cfg.annotate_frames_dir)
    import uvicorn

    uvicorn.run(app, host="127.0.0.1", port=cfg.annotate_port, log_level="warning")
    return {"candidates": len(queue.candidates)}


# --------------------------------------------------------------------------
# Stage registry + manifest-driven execution.


@dataclass(frozen=True)
class StageSpec:
    name: str
    inputs: Callable[[PipelineConfig], list[Path]]
    outputs: Callable[[PipelineConfig], list[Path]]
    run: Callable[[RunContext], dict]
    config_keys: tuple[str, ...]


def _common_inputs(cfg: PipelineConfig) -> list[Path]:
    return [cfg.corpus_train, cfg.dictionary, cfg.zipf]


STAGES: dict[str, StageSpec] = {}


def _stage(name, inputs, outputs, run, config_keys):
    STAGES[name] = StageSpec(name, inputs, outputs, run, config_keys)


_stage(
    "mine",
    lambda c: [c.corpus_train],
    lambda c: [c.artifact("pairs.jsonl")],
    stage_mine,
    ("workers",),
)
_stage(
    "filter-pairs",
    lambda c: [c.corpus_train, c.dictionary, c.zipf, c.artifact("pairs.jsonl")]
    + ([c.text_embeddings] if c.text_embeddings else []),
    lambda c: [c.artifact("filter_report.jsonl"), c.artifact("kept_pairs.jsonl")],
    stage_filter_pairs,
    ("filter", "embed_dim"),
)
_stage(
    "gen-text",
    lambda c: [c.artifact("kept_pairs.jsonl")],
    lambda c: [c.artifact("texts.jsonl"), c.artifact("gen_text_failures.jsonl")],
    stage_gen_text,
    ("mtg", "seed", "both_directions"),
)
_stage(
    "filter-videos",
    lambda c: [c.corpus_train, c.artifact("kept_pairs.jsonl"), c.frame_embeddings, c.frames_manifest],
    lambda c: [c.artifact("video_pairs.jsonl")],
    stage_filter_videos,
    ("filter",),
)
_stage(
    "build-triplets",
    lambda c: [c.corpus_train, c.artifact("video_pairs.jsonl"), c.artifact("texts.jsonl")],
    lambda c: [c.artifact("triplets.jsonl")],
    stage_build_triplets,
    ("both_directions",),
)
_stage(
    "stats",
    lambda c: [c.artifact("triplets.jsonl")],
    lambda c: [c.artifact("stats.json"), c.artifact("triplets_per_target.csv"), c.artifact("text_word_length.csv")],
    stage_stats,
    (),
)
_stage(
    "make-eval-set",
    lambda c: [c.corpus_train, c.corpus_heldout, c.dictionary, c.zipf, c.frame_embeddings, c.frames_manifest],
    lambda c: [c.artifact("val_queries.jsonl"), c.artifact("annotate_pool.jsonl")],
    stage_make_eval_set,
    ("filter", "mtg", "eval", "seed", "embed_dim"),
)
_stage(
    "train",
    lambda c: [c.artifact("triplets.jsonl"), c.frame_embeddings, c.frames_manifest],
    lambda c: [c.artifact("head.ckpt"), c.artifact("loss_curve.csv")],
    stage_train,
    ("train", "embed_dim", "eval"),
)
_stage(
    "eval",
    lambda c: [
        c.corpus_heldout,
        c.artifact("head.ckpt"),
        c.artifact("val_queries.jsonl"),
        c.frame_embeddings,
        c.frames_manifest,
    ],
    lambda c: [c.artifact("eval_report.json")],
    stage_eval,
    ("eval", "embed_dim"),
)
_stage(
    "serve-annotate",
    lambda c: [c.artifact("annotate_pool.jsonl")],
    lambda c: [],
    stage_serve_annotate,
    ("annotate_port", "annotate_lease_seconds"),
)

PIPELINE_ORDER = [
    "mine",
    "filter-pairs",
    "gen-text",
    "filter-videos",
    "build-triplets",
    "stats",
    "make-eval-set",
    "train",
    "eval",
]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 20):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if hasattr(value, "__dataclass_fields__"):
        return {k: _jsonable(getattr(value, k)) for k in value.__dataclass_fields__}
    return value


def stage_config_hash(cfg: PipelineConfig, spec: StageSpec) -> str:
    subset = {key: _jsonable(getattr(cfg, key)) for key in spec.config_keys}
    subset["seed"] = cfg.seed
    blob = json.dumps(subset, sort_keys=True).encode("utf-8")
    return hashlib.blake2b(blob, digest_size=16).hexdigest()


def run_stage(
    name: str,
    cfg: PipelineConfig,
    force: bool = False,
    strict: bool = False,
    ctx: Optional[RunContext] = None,
) -> dict:
    """Run one stage with manifest-based skip logic; returns the manifest."""
    if name not in STAGES:
        raise ConfigError(f"unknown stage: {name!r} (choose from {sorted(STAGES)})")
    spec = STAGES[name]
    for path in spec.inputs(cfg):
        if path is None or not Path(path).exists():
            raise MissingArtifactError(f"stage {name}: missing input {path}")

    cfg.artifacts_dir.mkdir(parents=True, exist_ok=True)
    cfg.manifests_dir.mkdir(parents=True, exist_ok=True)
    input_hashes = {str(p): _sha256(Path(p)) for p in spec.inputs(cfg)}
    config_hash = stage_config_hash(cfg, spec)
    manifest_path = cfg.manifests_dir / f"{name}.json"

    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text(encoding="utf-8"))
        unchanged = previous.get("input_hashes") == input_hashes and previous.get("config_hash") == config_hash
        outputs_present = all(p.exists() for p in spec.outputs(cfg))
        if unchanged and outputs_present and not force:
            logger.info("stage %s: up to date, skipping", name)
            previous["skipped"] = True
            return previous
        if strict and not unchanged and not force:
            raise StrictHashError(
                f"stage {name}: inputs or config changed since last run (use --force to rebuild)"
            )

    ctx = ctx or RunContext(cfg)
    start = time.monotonic()
    counts = spec.run(ctx)
    manifest = {
        "stage": name,
        "input_hashes": input_hashes,
        "config_hash": config_hash,
        "seed": cfg.seed,
        "counts": counts,
        "wall_time": time.monotonic() - start,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("stage %s: done in %.2fs %s", name, manifest["wall_time"], counts)
    return manifest


def run_all(cfg: PipelineConfig, force: bool = False, strict: bool = False) -> dict[str, dict]:
    ctx = RunContext(cfg)
    results = {}
    for name in PIPELINE_ORDER:
        if name == "make-eval-set" and cfg.corpus_heldout is None:
            logger.info("no held-out corpus configured; skipping %s and eval", name)
            continue
        if name == "eval" and cfg.corpus_heldout is None:
            continue
        results[name] = run_stage(name, cfg, force=force, strict=strict, ctx=ctx)
    return results

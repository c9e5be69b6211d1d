"""Deterministic synthetic corpus + embeddings for tests and demo runs.

Builds a small world of "{size} {color} {object}" captions whose frame
embeddings are jittered bag-of-token vectors, so caption pairs mined at one
token of edit distance correspond to visually similar videos and a composed
query (visual + modification text) is genuinely more informative than either
modality alone. A handful of rows are planted to exercise every caption
filter: template captions, digit diffs, out-of-vocabulary and rare diff
words, and near-identical / unrelated caption pairs.

Everything is a pure function of the seed, so pipelines over the generated
files are reproducible byte-for-byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, CaptionRecord, normalize_caption, save_corpus
from .embeddings import EmbeddingStore, frame_id, save_embeddings, toy_embed
from .filtering import FramesManifest, save_frames_manifest

SIZES = ("small", "big", "tiny", "huge", "giant", "little", "narrow", "wide")
COLORS = (
    "red", "blue", "green", "white", "black", "yellow", "purple", "orange",
    "brown", "gray", "pink", "golden", "silver", "teal", "crimson", "ivory",
)
OBJECTS = (
    "car", "boat", "house", "tree", "bird", "fish", "lamp", "chair",
    "bridge", "tower", "garden", "river", "window", "door", "statue", "kite",
)

FRAMES_PER_VIDEO = 5
EMBED_DIM = 64

# Planted rows exercising each caption-pair filter. The oov/rare words below
# are excluded from / downweighted in the generated lexicon.
OOV_WORD = "zorblax"
RARE_WORD = "gneiss"
PLANTED_CAPTIONS = (
    "flag of america",
    "flag of canada",
    "abstract of color movement",
    "abstract of color nature",
    "light leaks element 190",
    "light leaks element 215",
    f"blue {OOV_WORD}",
    "blue galaxy",
    f"small {RARE_WORD} bowl",
    "small ceramic bowl",
    "zebra",
    "coins",
    "leaves",
    "peacock",
    "ha ha ha ha ha ha ha giggle",
    "ha ha ha ha ha ha ha chuckle",
)


def _rng_for(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}|{label}".encode("utf-8"), digest_size=8).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))


def _grid_cells() -> list[str]:
    return [f"{s} {c} {o}" for s in SIZES for c in COLORS for o in OBJECTS]


@dataclass
class ToyWorld:
    train: Corpus
    heldout: Corpus
    frames: EmbeddingStore
    manifest: FramesManifest
    dictionary: set[str]
    zipf: dict[str, float]


def build_world(
    seed: int = 0,
    n_train_captions: int = 500,
    n_train_videos: int = 600,
    n_heldout: int = 120,
) -> ToyWorld:
    cells = _grid_cells()
    rng = _rng_for(seed, "captions")
    order = rng.permutation(len(cells))

    n_grid = n_train_captions - len(PLANTED_CAPTIONS)
    train_captions = [cells[i] for i in order[:n_grid]] + list(PLANTED_CAPTIONS)
    heldout_captions = [cells[i] for i in order[n_grid : n_grid + n_heldout]]

    train = _make_corpus(train_captions, n_train_videos, prefix="trn", seed=seed)
    heldout = _make_corpus(heldout_captions, len(heldout_captions), prefix="hld", seed=seed + 1)

    frames = EmbeddingStore(dim=EMBED_DIM)
    manifest = FramesManifest()
    for corpus in (train, heldout):
        for rec in corpus:
            _add_video_frames(frames, manifest, rec, seed)

    dictionary, zipf = _make_lexicon(train_captions + heldout_captions)
    return ToyWorld(
        train=train, heldout=heldout, frames=frames, manifest=manifest, dictionary=dictionary, zipf=zipf
    )


def _make_corpus(captions: list[str], n_videos: int, prefix: str, seed: int) -> Corpus:
    assert n_videos >= len(captions)
    rng = _rng_for(seed, f"corpus-{prefix}")
    corpus = Corpus()
    assignments = list(captions)
    extra = rng.choice(len(captions), size=n_videos - len(captions), replace=False)
    assignments += [captions[i] for i in extra]
    for idx, caption in enumerate(assignments):
        video_id = f"{prefix}{idx:05d}"
        corpus.add(
            CaptionRecord(
                video_id=video_id,
                caption_raw=caption,
                tokens=tuple(normalize_caption(caption)),
                duration_s=round(float(rng.uniform(4.0, 30.0)), 1),
                flow_magnitude=round(float(rng.uniform(0.0, 3.0)), 3),
            )
        )
    return corpus


def _video_jitter_scale(video_id: str, seed: int) -> float:
    rng = _rng_for(seed, f"jitter-scale-{video_id}")
    # Mostly gentle camera noise; a minority of "shaky" videos widens the
    # visual-similarity spread so threshold ablations have something to cut.
    if rng.uniform() < 0.10:
        return float(rng.uniform(0.65, 0.95))
    return float(rng.uniform(0.2, 0.55))


def _add_video_frames(frames: EmbeddingStore, manifest: FramesManifest, rec: CaptionRecord, seed: int) -> None:
    base = toy_embed(rec.caption_raw, EMBED_DIM).astype(np.float64)
    scale = _video_jitter_scale(rec.video_id, seed)
    manifest.counts[rec.video_id] = FRAMES_PER_VIDEO
    for k in range(FRAMES_PER_VIDEO):
        rng = _rng_for(seed, f"frame-{rec.video_id}-{k}")
        jitter = rng.standard_normal(EMBED_DIM)
        jitter /= np.linalg.norm(jitter)
        frames.add(frame_id(rec.video_id, k), base + scale * jitter)


def _make_lexicon(captions: list[str]) -> tuple[set[str], dict[str, float]]:
    vocab: set[str] = set()
    for caption in captions:
        vocab.update(normalize_caption(caption))
    dictionary = {w for w in vocab if w != OOV_WORD and not any(ch.isdigit() for ch in w)}
    zipf = {w: 4.2 for w in dictionary}
    zipf[RARE_WORD] = 1.8
    return dictionary, zipf


def write_world(world: ToyWorld, out_dir: str | Path) -> dict[str, Path]:
    """Materialize the world as the pipeline's input files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "train.csv",
        "heldout": out / "heldout.csv",
        "frames": out / "frames.cvem",
        "frames_manifest": out / "frames.csv",
        "dictionary": out / "dictionary.txt",
        "zipf": out / "zipf.tsv",
    }
    save_corpus(world.train, paths["train"])
    save_corpus(world.heldout, paths["heldout"])
    save_embeddings(world.frames, paths["frames"])
    save_frames_manifest(world.manifest, paths["frames_manifest"])
    paths["dictionary"].write_text("\n".join(sorted(world.dictionary)) + "\n", encoding="utf-8")
    with open(paths["zipf"], "w", encoding="utf-8") as fh:
        for word in sorted(world.zipf):
            fh.write(f"{word}\t{world.zipf[word]}\n")
    return paths


DEFAULT_CONFIG_TEMPLATE = """\
seed: {seed}
out_dir: {out_dir}
corpus:
  train: {train}
  heldout: {heldout}
lexicon:
  dictionary: {dictionary}
  zipf: {zipf}
embeddings:
  dim: {dim}
  text: toy
  frames: {frames}
  frames_manifest: {frames_manifest}
filter:
  sim_max: 0.96
  sim_min: 0.6
  zipf_min: 3.0
  max_video_pairs_per_caption_pair: 10
mtg:
  mode: llm
  url: http://127.0.0.1:8099
  top_k: 200
  temperature: 0.8
  n_candidates: 1
  select: first
train:
  tau: 0.07
  alpha: 1.0
  beta: 0.5
  batch_size: 32
  learning_rate: 0.1
  epochs: 60
eval:
  n_val: 40
  n_annotate: 25
  ks: [1, 5, 10, 50]
"""


def write_config(paths: dict[str, Path], config_path: str | Path, seed: int = 0, out_dir: str = "out") -> Path:
    """Write a ready-to-run pipeline config next to the generated data."""
    config_path = Path(config_path)
    base = config_path.parent.resolve()

    def rel(p: Path) -> str:
        return str(p.resolve().relative_to(base))

    config_path.write_text(
        DEFAULT_CONFIG_TEMPLATE.format(
            seed=seed,
            out_dir=out_dir,
            train=rel(paths["train"]),
            heldout=rel(paths["heldout"]),
            dictionary=rel(paths["dictionary"]),
            zipf=rel(paths["zipf"]),
            dim=EMBED_DIM,
            frames=rel(paths["frames"]),
            frames_manifest=rel(paths["frames_manifest"]),
        ),
        encoding="utf-8",
    )
    return config_path

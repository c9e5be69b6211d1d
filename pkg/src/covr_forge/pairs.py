"""Mining caption pairs at token edit distance exactly one.

Candidate generation uses a deletion-neighborhood index: every caption
contributes its full token-join key plus one key per single-token deletion,
so any two captions at token edit distance 1 (substitute, insert, or delete
one token) necessarily share a bucket. Bucket collisions are then verified
with an exact distance check, so the output has no false positives and, by
the bucket-sharing guarantee, no false negatives either.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Optional, Sequence

from .corpus import caption_key

logger = logging.getLogger(__name__)

# Captions longer than this are degenerate in web corpora and would blow up
# the deletion-key count; they are skipped with a warning.
MAX_TOKENS = 64

EDIT_SUBSTITUTE = "substitute"
EDIT_INSERT = "insert"
EDIT_DELETE = "delete"


@dataclass(frozen=True)
class CaptionPair:
    """An unordered caption pair at token edit distance 1.

    caption_a < caption_b in canonical (join-key) order; the edit is described
    from a's perspective. diff_a is the token only in a, diff_b the token only
    in b; position is the first index where the two token sequences diverge.
    """

    caption_a: str
    caption_b: str
    edit_kind: str
    diff_a: Optional[str]
    diff_b: Optional[str]
    position: int

    def diff_tokens(self) -> list[str]:
        return [t for t in (self.diff_a, self.diff_b) if t is not None]

    def reversed(self) -> "CaptionPair":
        """The same edit viewed from b's perspective (b -> a direction)."""
        kind = self.edit_kind
        if kind == EDIT_INSERT:
            kind = EDIT_DELETE
        elif kind == EDIT_DELETE:
            kind = EDIT_INSERT
        return CaptionPair(
            caption_a=self.caption_b,
            caption_b=self.caption_a,
            edit_kind=kind,
            diff_a=self.diff_b,
            diff_b=self.diff_a,
            position=self.position,
        )

    def to_json_obj(self) -> dict:
        return {
            "caption_a": self.caption_a,
            "caption_b": self.caption_b,
            "edit_kind": self.edit_kind,
            "diff_a": self.diff_a,
            "diff_b": self.diff_b,
            "position": self.position,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CaptionPair":
        return cls(
            caption_a=obj["caption_a"],
            caption_b=obj["caption_b"],
            edit_kind=obj["edit_kind"],
            diff_a=obj.get("diff_a"),
            diff_b=obj.get("diff_b"),
            position=obj["position"],
        )


def edit_one(a: Sequence[str], b: Sequence[str]) -> Optional[tuple[str, Optional[str], Optional[str], int]]:
    """Exact token-edit-distance-1 check.

    Returns (edit_kind, diff_a, diff_b, position) describing the a -> b edit,
    or None if the distance is not exactly 1.
    """
    la, lb = len(a), len(b)
    if la == lb:
        pos = -1
        for i in range(la):
            if a[i] != b[i]:
                if pos >= 0:
                    return None
                pos = i
        if pos < 0:
            return None  # identical
        return (EDIT_SUBSTITUTE, a[pos], b[pos], pos)
    if la + 1 == lb:
        res = _one_token_gap(a, b)
        if res is None:
            return None
        pos, token = res
        return (EDIT_INSERT, None, token, pos)
    if lb + 1 == la:
        res = _one_token_gap(b, a)
        if res is None:
            return None
        pos, token = res
        return (EDIT_DELETE, token, None, pos)
    return None


def _one_token_gap(short: Sequence[str], long: Sequence[str]) -> Optional[tuple[int, str]]:
    """If long == short with one extra token, return (position, token)."""
    i = 0
    n = len(short)
    while i < n and short[i] == long[i]:
        i += 1
    # long[i] is the candidate inserted token; the rest must align.
    for j in range(i, n):
        if short[j] != long[j + 1]:
            return None
    return (i, long[i])


@dataclass
class DeletionIndex:
    """Join-key buckets mapping each caption and its single-token deletions.

    Buckets hold indices into the caption list passed to build_index. Captions
    longer than MAX_TOKENS are excluded (and reported via skipped_count).
    """

    buckets: dict[str, list[int]]
    skipped_count: int = 0


def _deletion_keys(tokens: tuple[str, ...]) -> set[str]:
    keys = {caption_key(tokens)}
    for i in range(len(tokens)):
        keys.add(caption_key(tokens[:i] + tokens[i + 1 :]))
    return keys


def build_index(captions: Sequence[tuple[str, ...]]) -> DeletionIndex:
    """Build the deletion-neighborhood index over distinct token sequences."""
    buckets: dict[str, list[int]] = {}
    skipped = 0
    for idx, tokens in enumerate(captions):
        if len(tokens) > MAX_TOKENS:
            skipped += 1
            logger.warning("skipping caption with %d tokens (> %d): %r...", len(tokens), MAX_TOKENS, tokens[:5])
            continue
        for key in _deletion_keys(tokens):
            buckets.setdefault(key, []).append(idx)
    return DeletionIndex(buckets=buckets, skipped_count=skipped)


def _pair_from_indices(captions: Sequence[tuple[str, ...]], i: int, j: int) -> Optional[CaptionPair]:
    a, b = captions[i], captions[j]
    key_a, key_b = caption_key(a), caption_key(b)
    if key_b < key_a:
        a, b = b, a
        key_a, key_b = key_b, key_a
    res = edit_one(a, b)
    if res is None:
        return None
    kind, diff_a, diff_b, pos = res
    return CaptionPair(key_a, key_b, kind, diff_a, diff_b, pos)


# Worker-side state for process pools; populated via the initializer so the
# caption list is shipped once per worker instead of once per task.
_worker_captions: Sequence[tuple[str, ...]] = ()


def _init_worker(captions: Sequence[tuple[str, ...]]) -> None:
    global _worker_captions
    _worker_captions = captions


def _verify_chunk(chunk: list[tuple[int, int]]) -> list[CaptionPair]:
    out = []
    for i, j in chunk:
        pair = _pair_from_indices(_worker_captions, i, j)
        if pair is not None:
            out.append(pair)
    return out


def mine_pairs(
    index: DeletionIndex,
    captions: Sequence[tuple[str, ...]],
    workers: int = 1,
) -> list[CaptionPair]:
    """All unordered caption pairs at token edit distance 1, sorted by key.

    The result is independent of input order and worker count: candidates from
    shared buckets are verified exactly, deduplicated, and sorted by
    (caption_a, caption_b).
    """
    candidates: set[tuple[int, int]] = set()
    for ids in index.buckets.values():
        if len(ids) < 2:
            continue
        for i, j in combinations(ids, 2):
            candidates.add((i, j) if i < j else (j, i))

    ordered = sorted(candidates)
    if workers <= 1 or len(ordered) < 2048:
        verified = _verify_all(captions, ordered)
    else:
        chunk_size = max(1, (len(ordered) + workers - 1) // workers)
        chunks = [ordered[k : k + chunk_size] for k in range(0, len(ordered), chunk_size)]
        verified = []
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(captions,)) as pool:
            for part in pool.map(_verify_chunk, chunks):
                verified.extend(part)
    verified.sort(key=lambda p: (p.caption_a, p.caption_b))
    return verified


def _verify_all(captions: Sequence[tuple[str, ...]], pairs: Iterable[tuple[int, int]]) -> list[CaptionPair]:
    out = []
    for i, j in pairs:
        pair = _pair_from_indices(captions, i, j)
        if pair is not None:
            out.append(pair)
    return out


def mine_corpus_pairs(captions: Iterable[tuple[str, ...]], workers: int = 1) -> list[CaptionPair]:
    """Convenience wrapper: dedupe captions, build the index, mine pairs."""
    distinct: dict[tuple[str, ...], None] = {}
    for tokens in captions:
        distinct.setdefault(tuple(tokens), None)
    caption_list = list(distinct)
    index = build_index(caption_list)
    return mine_pairs(index, caption_list, workers=workers)


def write_pairs_jsonl(pairs: Iterable[CaptionPair], path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json_obj(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_pairs_jsonl(path) -> list[CaptionPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(CaptionPair.from_json_obj(json.loads(line)))
    return out

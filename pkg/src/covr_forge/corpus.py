"""Caption corpus ingestion and normalization.

Every downstream stage (pair mining, filtering, text generation) operates on
normalized token sequences, so the tokenizer here is the single source of
truth: Unicode-aware lowercasing, whitespace splitting, and per-token trimming
of leading/trailing punctuation. Hyphenated words stay intact and interior
punctuation (e.g. "23.09.2015") is preserved so digit-based filters still see
it.
"""

from __future__ import annotations

import csv
import json
import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional


logger = logging.getLogger(__name__)


class CorpusError(Exception):
    """Raised for malformed corpus or lexicon files."""


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize_caption(raw: str) -> list[str]:
    """Normalize a raw caption into its canonical token sequence.

    Lowercases (Unicode-aware), splits on whitespace, strips leading and
    trailing punctuation from each token, and drops tokens that become empty.
    Idempotent: re-normalizing the space-joined output yields the same tokens.
    """
    tokens = []
    for piece in raw.lower().split():
        start = 0
        end = len(piece)
        while start < end and _is_punct(piece[start]):
            start += 1
        while end > start and _is_punct(piece[end - 1]):
            end -= 1
        if end > start:
            tokens.append(piece[start:end])
    return tokens


def caption_key(tokens: Iterable[str]) -> str:
    """Canonical string key for a normalized token sequence."""
    return " ".join(tokens)


@dataclass(frozen=True)
class CaptionRecord:
    """One (video, caption) corpus row plus its normalized tokens."""

    video_id: str
    caption_raw: str
    tokens: tuple[str, ...]
    duration_s: Optional[float] = None
    flow_magnitude: Optional[float] = None
    categories: Optional[tuple[str, ...]] = None

    @property
    def key(self) -> str:
        return caption_key(self.tokens)


@dataclass
class Corpus:
    """Immutable-after-load collection of CaptionRecords, keyed by video_id."""

    records: dict[str, CaptionRecord] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CaptionRecord]:
        return iter(self.records.values())

    def add(self, record: CaptionRecord) -> None:
        if record.video_id in self.records:
            raise CorpusError(f"duplicate video_id: {record.video_id!r}")
        self.records[record.video_id] = record

    def get(self, video_id: str) -> CaptionRecord:
        try:
            return self.records[video_id]
        except KeyError:
            raise CorpusError(f"unknown video_id: {video_id!r}") from None

    def video_ids(self) -> list[str]:
        return list(self.records)

    def videos_by_caption(self) -> dict[str, list[str]]:
        """Map caption key -> sorted video ids sharing that caption."""
        by_key: dict[str, list[str]] = {}
        for rec in self:
            by_key.setdefault(rec.key, []).append(rec.video_id)
        for ids in by_key.values():
            ids.sort()
        return by_key

    def distinct_captions(self) -> list[tuple[str, ...]]:
        """Distinct normalized token sequences, in first-seen order."""
        seen: dict[tuple[str, ...], None] = {}
        for rec in self:
            seen.setdefault(rec.tokens, None)
        return list(seen)


def _make_record(
    video_id: str,
    caption: str,
    duration_s: Optional[float],
    flow_magnitude: Optional[float],
    categories: Optional[list[str]],
    line_no: int,
) -> CaptionRecord:
    if duration_s is not None and duration_s < 0:
        raise CorpusError(f"line {line_no}: negative duration_s")
    if flow_magnitude is not None and flow_magnitude < 0:
        raise CorpusError(f"line {line_no}: negative flow_magnitude")
    return CaptionRecord(
        video_id=video_id,
        caption_raw=caption,
        tokens=tuple(normalize_caption(caption)),
        duration_s=duration_s,
        flow_magnitude=flow_magnitude,
        categories=tuple(categories) if categories is not None else None,
    )


def _opt_float(value: str, line_no: int, name: str) -> Optional[float]:
    if value is None or value == "":
        return None
    try:
        return float(value)
    except ValueError:
        raise CorpusError(f"line {line_no}: bad {name}: {value!r}") from None


# Categories travel in a single CSV cell, ';'-separated.
_CATEGORY_SEP = ";"


def load_corpus(path: str | Path, fmt: Optional[str] = None) -> Corpus:
    """Load a corpus from CSV or JSONL (format inferred from suffix if omitted).

    Rejects duplicate video ids and reports parse errors with line numbers.
    """
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix in (".jsonl", ".ndjson") else "csv"
    if fmt == "csv":
        corpus = _load_csv(path)
    elif fmt == "jsonl":
        corpus = _load_jsonl(path)
    else:
        raise CorpusError(f"unknown corpus format: {fmt!r}")
    logger.info("loaded %d records from %s", len(corpus), path)
    return corpus


def _load_csv(path: Path) -> Corpus:
    corpus = Corpus()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "video_id" not in reader.fieldnames or "caption" not in reader.fieldnames:
            raise CorpusError(f"{path}: header must contain video_id and caption")
        for row in reader:
            line_no = reader.line_num
            video_id = (row.get("video_id") or "").strip()
            caption = row.get("caption")
            if not video_id or caption is None:
                raise CorpusError(f"line {line_no}: missing video_id or caption")
            cats_cell = row.get("categories") or ""
            categories = [c for c in cats_cell.split(_CATEGORY_SEP) if c] or None
            rec = _make_record(
                video_id,
                caption,
                _opt_float(row.get("duration_s") or "", line_no, "duration_s"),
                _opt_float(row.get("flow_magnitude") or "", line_no, "flow_magnitude"),
                categories,
                line_no,
            )
            corpus.add(rec)
    return corpus


def _load_jsonl(path: Path) -> Corpus:
    corpus = Corpus()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict) or "video_id" not in obj or "caption" not in obj:
                raise CorpusError(f"line {line_no}: row must have video_id and caption")
            duration = obj.get("duration_s")
            flow = obj.get("flow_magnitude")
            for name, val in (("duration_s", duration), ("flow_magnitude", flow)):
                if val is not None and not isinstance(val, (int, float)):
                    raise CorpusError(f"line {line_no}: bad {name}: {val!r}")
            cats = obj.get("categories")
            if cats is not None and not (isinstance(cats, list) and all(isinstance(c, str) for c in cats)):
                raise CorpusError(f"line {line_no}: categories must be a list of strings")
            rec = _make_record(
                str(obj["video_id"]),
                str(obj["caption"]),
                float(duration) if duration is not None else None,
                float(flow) if flow is not None else None,
                cats,
                line_no,
            )
            corpus.add(rec)
    return corpus


def save_corpus(corpus: Corpus, path: str | Path, fmt: Optional[str] = None) -> None:
    """Serialize a corpus; load(save(c)) round-trips to identical records."""
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix in (".jsonl", ".ndjson") else "csv"
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "caption", "duration_s", "flow_magnitude", "categories"])
            for rec in corpus:
                writer.writerow(
                    [
                        rec.video_id,
                        rec.caption_raw,
                        "" if rec.duration_s is None else repr(rec.duration_s),
                        "" if rec.flow_magnitude is None else repr(rec.flow_magnitude),
                        "" if rec.categories is None else _CATEGORY_SEP.join(rec.categories),
                    ]
                )
    elif fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for rec in corpus:
                obj: dict = {"video_id": rec.video_id, "caption": rec.caption_raw}
                if rec.duration_s is not None:
                    obj["duration_s"] = rec.duration_s
                if rec.flow_magnitude is not None:
                    obj["flow_magnitude"] = rec.flow_magnitude
                if rec.categories is not None:
                    obj["categories"] = list(rec.categories)
                fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    else:
        raise CorpusError(f"unknown corpus format: {fmt!r}")


@dataclass
class Lexicon:
    """Dictionary membership plus zipf frequency scores.

    An absent zipf entry is reported as None (unknown), which callers treat
    as rarer than any threshold.
    """

    dictionary: set[str] = field(default_factory=set)
    zipf: dict[str, float] = field(default_factory=dict)

    def in_dictionary(self, word: str) -> bool:
        return word.lower() in self.dictionary

    def zipf_score(self, word: str) -> Optional[float]:
        return self.zipf.get(word.lower())


def load_lexicon(dict_path: str | Path, zipf_path: str | Path) -> Lexicon:
    """Load a dictionary (one word per line) and a zipf table (word<TAB>score)."""
    lex = Lexicon()
    with open(dict_path, encoding="utf-8") as fh:
        for line in fh:
            word = line.strip()
            if word:
                lex.dictionary.add(word.lower())
    with open(zipf_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"line {line_no}: expected 'word<TAB>score', got {line!r}")
            word, score = parts
            try:
                lex.zipf[word.strip().lower()] = float(score)
            except ValueError:
                raise CorpusError(f"line {line_no}: bad zipf score: {score!r}") from None
    logger.info("loaded lexicon: %d dictionary words, %d zipf scores", len(lex.dictionary), len(lex.zipf))
    return lex

"""Annotation service for curating the evaluation set.

Serves candidates (a directed video pair, three frames per side, three
candidate modification texts) to annotators, who keep the best text or
discard the sample with a reason. Decisions go to an append-only JSONL log;
replaying the log from an empty queue reconstructs the exact state, and
leases are deliberately in-memory only, so a crash can never lose a
candidate — it simply re-enters the queue.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, Response

from .triplets import AnnotationCandidate

VERDICT_KEEP = "keep"
VERDICT_DISCARD = "discard"
DISCARD_REASONS = ("bad_text", "too_similar", "too_different", "low_quality", "captions_too_similar")

DEFAULT_LEASE_SECONDS = 600.0


class AnnotationError(Exception):
    """Validation failure (unknown candidate, malformed decision...)."""


class ConflictError(AnnotationError):
    """A conflicting decision already exists for this candidate."""


@dataclass(frozen=True)
class AnnotationDecision:
    candidate_id: str
    verdict: str
    annotator: str
    timestamp: str
    chosen_index: Optional[int] = None
    discard_reason: Optional[str] = None

    def __post_init__(self) -> None:
        if self.verdict not in (VERDICT_KEEP, VERDICT_DISCARD):
            raise AnnotationError(f"verdict must be keep or discard, got {self.verdict!r}")
        if self.verdict == VERDICT_KEEP:
            if self.chosen_index is None:
                raise AnnotationError("keep requires chosen_index")
            if self.chosen_index not in (0, 1, 2):
                raise AnnotationError(f"chosen_index must be 0..2, got {self.chosen_index}")
            if self.discard_reason is not None:
                raise AnnotationError("keep cannot carry a discard_reason")
        else:
            if self.chosen_index is not None:
                raise AnnotationError("discard cannot carry chosen_index")
            if self.discard_reason is not None and self.discard_reason not in DISCARD_REASONS:
                raise AnnotationError(f"unknown discard_reason: {self.discard_reason!r}")
        if not self.annotator:
            raise AnnotationError("annotator id required")

    def same_payload(self, other: "AnnotationDecision") -> bool:
        """Semantic equality, ignoring submission time."""
        return (
            self.candidate_id == other.candidate_id
            and self.verdict == other.verdict
            and self.annotator == other.annotator
            and self.chosen_index == other.chosen_index
            and self.discard_reason == other.discard_reason
        )

    def to_json_obj(self) -> dict:
        obj = {
            "candidate_id": self.candidate_id,
            "verdict": self.verdict,
            "annotator": self.annotator,
            "timestamp": self.timestamp,
        }
        if self.chosen_index is not None:
            obj["chosen_index"] = self.chosen_index
        if self.discard_reason is not None:
            obj["discard_reason"] = self.discard_reason
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AnnotationDecision":
        return cls(
            candidate_id=obj["candidate_id"],
            verdict=obj["verdict"],
            annotator=obj["annotator"],
            timestamp=obj["timestamp"],
            chosen_index=obj.get("chosen_index"),
            discard_reason=obj.get("discard_reason"),
        )


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class AnnotationQueue:
    """Linearizable queue state: pool, decisions, and ephemeral leases."""

    def __init__(
        self,
        candidates: list[AnnotationCandidate],
        log_path: Optional[str | Path] = None,
        lease_seconds: float = DEFAULT_LEASE_SECONDS,
        clock: Callable[[], float] = time.monotonic,
    ):
        ids = [c.candidate_id for c in candidates]
        if len(set(ids)) != len(ids):
            raise AnnotationError("duplicate candidate ids in pool")
        self.candidates: dict[str, AnnotationCandidate] = {c.candidate_id: c for c in candidates}
        self.decisions: dict[str, AnnotationDecision] = {}
        self.leases: dict[str, tuple[str, float]] = {}  # candidate_id -> (annotator, expiry)
        self.log_path = Path(log_path) if log_path else None
        self.lease_seconds = lease_seconds
        self.clock = clock
        self._lock = threading.Lock()

    @classmethod
    def from_files(
        cls,
        pool_path: str | Path,
        log_path: Optional[str | Path] = None,
        lease_seconds: float = DEFAULT_LEASE_SECONDS,
        clock: Callable[[], float] = time.monotonic,
    ) -> "AnnotationQueue":
        candidates = []
        with open(pool_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    candidates.append(AnnotationCandidate.from_json_obj(json.loads(line)))
        queue = cls(candidates, log_path=log_path, lease_seconds=lease_seconds, clock=clock)
        if log_path and Path(log_path).exists():
            queue.replay(log_path)
        return queue

    def replay(self, log_path: str | Path) -> int:
        """Apply a decision log to reconstruct state (no re-logging)."""
        applied = 0
        with open(log_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                decision = AnnotationDecision.from_json_obj(json.loads(line))
                self._apply(decision, log=False)
                applied += 1
        return applied

    def _active_lease(self, candidate_id: str) -> Optional[str]:
        lease = self.leases.get(candidate_id)
        if lease is None:
            return None
        annotator, expiry = lease
        if self.clock() >= expiry:
            del self.leases[candidate_id]
            return None
        return annotator

    def next_candidate(self, annotator: str) -> Optional[AnnotationCandidate]:
        """The annotator's current lease if active, else the first undecided,
        unleased candidate (which becomes leased); None when exhausted."""
        if not annotator:
            raise AnnotationError("annotator id required")
        with self._lock:
            for cand_id in self.candidates:
                if cand_id in self.decisions:
                    continue
                holder = self._active_lease(cand_id)
                if holder == annotator:
                    self.leases[cand_id] = (annotator, self.clock() + self.lease_seconds)
                    return self.candidates[cand_id]
            for cand_id in self.candidates:
                if cand_id in self.decisions:
                    continue
                if self._active_lease(cand_id) is None:
                    self.leases[cand_id] = (annotator, self.clock() + self.lease_seconds)
                    return self.candidates[cand_id]
            return None

    def submit(self, decision: AnnotationDecision) -> str:
        """Record a decision; returns 'ok' or 'duplicate' (idempotent)."""
        with self._lock:
            return self._apply(decision, log=True)

    def _apply(self, decision: AnnotationDecision, log: bool) -> str:
        if decision.candidate_id not in self.candidates:
            raise AnnotationError(f"unknown candidate: {decision.candidate_id!r}")
        existing = self.decisions.get(decision.candidate_id)
        if existing is not None:
            if existing.same_payload(decision):
                return "duplicate"
            raise ConflictError(
                f"candidate {decision.candidate_id!r} already decided "
                f"({existing.verdict} by {existing.annotator})"
            )
        holder = self._active_lease(decision.candidate_id)
        if holder is not None and holder != decision.annotator:
            raise ConflictError(
                f"candidate {decision.candidate_id!r} is leased to another annotator"
            )
        self.decisions[decision.candidate_id] = decision
        self.leases.pop(decision.candidate_id, None)
        if log and self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(decision.to_json_obj(), ensure_ascii=False) + "\n")
        return "ok"

    def stats(self) -> dict:
        kept = sum(1 for d in self.decisions.values() if d.verdict == VERDICT_KEEP)
        discarded = len(self.decisions) - kept
        reasons: dict[str, int] = {}
        for d in self.decisions.values():
            if d.verdict == VERDICT_DISCARD:
                reasons[d.discard_reason or "unspecified"] = reasons.get(d.discard_reason or "unspecified", 0) + 1
        return {
            "pool": len(self.candidates),
            "decided": len(self.decisions),
            "remaining": len(self.candidates) - len(self.decisions),
            "kept": kept,
            "discarded": discarded,
            "discard_rate": (discarded / len(self.decisions)) if self.decisions else None,
            "discard_reasons": reasons,
        }

    def export(self) -> dict:
        """Kept candidates as triplets (chosen text), plus discard stats."""
        triplets = []
        for cand_id, cand in self.candidates.items():
            decision = self.decisions.get(cand_id)
            if decision is None or decision.verdict != VERDICT_KEEP:
                continue
            assert decision.chosen_index is not None
            triplets.append(
                {
                    "query_video": cand.query_video,
                    "target_video": cand.target_video,
                    "text": cand.texts[decision.chosen_index],
                    "caption_a": cand.caption_query,
                    "caption_b": cand.caption_target,
                    "candidate_id": cand_id,
                    "chosen_index": decision.chosen_index,
                    "annotator": decision.annotator,
                }
            )
        return {"triplets": triplets, "stats": self.stats()}


_PLACEHOLDER_SVG = """\
<svg xmlns="http://www.w3.org/2000/svg" width="320" height="180">
  <rect width="320" height="180" fill="#{color}"/>
  <text x="160" y="84" font-family="monospace" font-size="16" fill="#fff" text-anchor="middle">{video_id}</text>
  <text x="160" y="110" font-family="monospace" font-size="13" fill="#ddd" text-anchor="middle">frame {index}</text>
</svg>
"""


def _placeholder_svg(video_id: str, index: int) -> str:
    import hashlib

    digest = hashlib.blake2b(video_id.encode("utf-8"), digest_size=3).hexdigest()
    return _PLACEHOLDER_SVG.format(color=digest, video_id=video_id, index=index)


def frame_url(frame_ref: str) -> str:
    video_id, _, index = frame_ref.rpartition("#")
    return f"/frames/{video_id}/{index}"


def create_app(queue: AnnotationQueue, frames_dir: Optional[str | Path] = None) -> FastAPI:
    """FastAPI app exposing the REST protocol over an AnnotationQueue."""
    from fastapi.middleware.cors import CORSMiddleware

    app = FastAPI(title="covr-forge annotation service")
    # the browser UI may be served from another origin (or file://)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])
    frames_root = Path(frames_dir) if frames_dir else None

    def candidate_payload(cand: AnnotationCandidate) -> dict:
        obj = cand.to_json_obj()
        obj["query_frame_urls"] = [frame_url(r) for r in cand.query_frames]
        obj["target_frame_urls"] = [frame_url(r) for r in cand.target_frames]
        return obj

    @app.get("/api/candidate/next")
    def next_candidate(annotator: str = ""):
        if not annotator:
            return JSONResponse({"error": "annotator query parameter required"}, status_code=400)
        cand = queue.next_candidate(annotator)
        return {"candidate": candidate_payload(cand) if cand else None, "stats": queue.stats()}

    @app.post("/api/decision")
    async def post_decision(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "invalid JSON body"}, status_code=400)
        try:
            decision = AnnotationDecision(
                candidate_id=body.get("candidate_id", ""),
                verdict=body.get("verdict", ""),
                annotator=body.get("annotator", ""),
                timestamp=body.get("timestamp") or _utc_now(),
                chosen_index=body.get("chosen_index"),
                discard_reason=body.get("discard_reason"),
            )
        except AnnotationError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        try:
            status = queue.submit(decision)
        except ConflictError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        except AnnotationError as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)
        return {"status": status, "stats": queue.stats()}

    @app.get("/api/stats")
    def stats():
        return queue.stats()

    @app.get("/api/export")
    def export():
        return queue.export()

    @app.get("/frames/{video_id}/{index}")
    def frame_image(video_id: str, index: int):
        if frames_root is not None:
            for ext in ("jpg", "jpeg", "png"):
                path = frames_root / video_id / f"{index}.{ext}"
                if path.exists():
                    return FileResponse(path)
        return Response(content=_placeholder_svg(video_id, index), media_type="image/svg+xml")

    return app

"""Modification-text generation for caption pairs.

Two routes: a rule-based template engine (optionally post-paraphrased), and a
wire protocol to an external generation service. The service boundary is a
single HTTP endpoint (POST /v1/generate) so tests and toy pipelines can run
against a deterministic stub; see mtg_stub.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import requests

from .pairs import CaptionPair

logger = logging.getLogger(__name__)

SOURCE_RULE = "rule"
SOURCE_RULE_PARAPHRASED = "rule_paraphrased"
SOURCE_LLM = "llm"

RESPONSE_MARKER = "### Response:"

# Fixed template table; {d1} is the token leaving the caption, {d2} the token
# entering it. A template is applicable only when its tokens exist for the
# pair's edit kind.
RULE_TEMPLATES: tuple[tuple[str, bool, bool], ...] = (
    ("Remove {d1}", True, False),
    ("Take out {d1} and add {d2}", True, True),
    ("Change {d1} for {d2}", True, True),
    ("Replace {d1} with {d2}", True, True),
    ("Replace {d1} by {d2}", True, True),
    ("Make the {d1} into {d2}", True, True),
    ("Add {d2}", False, True),
    ("Change it to {d2}", False, True),
)


class MtgError(Exception):
    pass


class MtgTransportError(MtgError):
    """Service unreachable or persistently failing."""


class MtgEmptyCompletion(MtgError):
    """The service returned an empty completion."""


@dataclass
class ModificationText:
    text: str
    source: str
    template_id: Optional[int] = None
    candidates: Optional[list[str]] = None

    def __post_init__(self) -> None:
        assert self.text, "modification text must be nonempty"
        assert (self.template_id is not None) == (
            self.source in (SOURCE_RULE, SOURCE_RULE_PARAPHRASED)
        ), "template_id present iff rule-derived"
        if self.candidates is not None:
            assert self.text in self.candidates

    def to_json_obj(self) -> dict:
        obj: dict = {"text": self.text, "source": self.source}
        if self.template_id is not None:
            obj["template_id"] = self.template_id
        if self.candidates is not None:
            obj["candidates"] = self.candidates
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModificationText":
        return cls(
            text=obj["text"],
            source=obj["source"],
            template_id=obj.get("template_id"),
            candidates=obj.get("candidates"),
        )


@dataclass
class MtgRequest:
    caption_a: str
    caption_b: str
    top_k: int = 200
    temperature: float = 0.8
    n_candidates: int = 1

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise MtgError("top_k must be >= 1")
        if self.temperature <= 0:
            raise MtgError("temperature must be > 0")
        if self.n_candidates < 1:
            raise MtgError("n_candidates must be >= 1")


def applicable_templates(pair: CaptionPair) -> list[int]:
    out = []
    for idx, (_, needs_d1, needs_d2) in enumerate(RULE_TEMPLATES):
        if needs_d1 and pair.diff_a is None:
            continue
        if needs_d2 and pair.diff_b is None:
            continue
        out.append(idx)
    return out


def rule_based_text(pair: CaptionPair, rng_seed: int) -> ModificationText:
    """Instantiate one applicable template, chosen uniformly per (seed, pair).

    The choice is keyed on the pair itself rather than on a shared RNG
    stream, so it is independent of processing order and worker count.
    """
    choices = applicable_templates(pair)
    assert choices, "a valid CaptionPair always admits at least one template"
    digest = hashlib.blake2b(
        f"{rng_seed}|{pair.caption_a}|{pair.caption_b}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    template_id = choices[int(rng.integers(len(choices)))]
    text = RULE_TEMPLATES[template_id][0].format(d1=pair.diff_a, d2=pair.diff_b)
    return ModificationText(text=text, source=SOURCE_RULE, template_id=template_id)


def format_llm_prompt(caption_a: str, caption_b: str) -> str:
    """Byte-exact generation prompt for a caption pair."""
    return f"{caption_a}\n&&\n{caption_b} \n\n{RESPONSE_MARKER}"


def parse_llm_prompt(prompt: str) -> tuple[str, str]:
    """Inverse of format_llm_prompt (for stubs and debugging)."""
    body = prompt
    if body.endswith(RESPONSE_MARKER):
        body = body[: -len(RESPONSE_MARKER)]
    if body.endswith(" \n\n"):
        body = body[:-3]
    a, sep, b = body.partition("\n&&\n")
    if not sep:
        raise MtgError(f"not a generation prompt: {prompt!r}")
    return a, b


def strip_completion(completion: str) -> str:
    """Normalize a raw completion: drop everything through the response
    marker, cut at the first newline, trim whitespace."""
    text = completion
    marker_at = text.find(RESPONSE_MARKER)
    if marker_at >= 0:
        text = text[marker_at + len(RESPONSE_MARKER) :]
    text = text.split("\n", 1)[0].strip()
    return text


def select_candidate(candidates: list[str], strategy: str = "first") -> str:
    """Pick one candidate: 'first', or 'longest' (ties to earliest index)."""
    if not candidates:
        raise MtgError("no candidates to select from")
    if strategy == "first":
        return candidates[0]
    if strategy == "longest":
        best = candidates[0]
        for cand in candidates[1:]:
            if len(cand) > len(best):
                best = cand
        return best
    raise MtgError(f"unknown selection strategy: {strategy!r}")


@dataclass
class MtgClient:
    """HTTP client for the generation service.

    POST {base_url}/v1/generate with JSON
    {prompt, top_k, temperature, n, stop: ["\\n"]}; the response carries
    {completions: [string]}. Transient failures are retried with exponential
    backoff (max_attempts total tries) before raising MtgTransportError.
    """

    base_url: str
    timeout_s: float = 30.0
    max_attempts: int = 3
    backoff_base_s: float = 0.2
    session: requests.Session = field(default_factory=requests.Session, repr=False)

    def generate(self, prompt: str, top_k: int, temperature: float, n: int) -> list[str]:
        payload = {
            "prompt": prompt,
            "top_k": top_k,
            "temperature": temperature,
            "n": n,
            "stop": ["\n"],
        }
        url = self.base_url.rstrip("/") + "/v1/generate"
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            try:
                resp = self.session.post(url, json=payload, timeout=self.timeout_s)
                resp.raise_for_status()
                body = resp.json()
                completions = body.get("completions")
                if not isinstance(completions, list) or len(completions) != n:
                    raise MtgTransportError(f"malformed response from {url}: {body!r}")
                return [str(c) for c in completions]
            except (requests.RequestException, ValueError) as exc:
                last_exc = exc
                if attempt + 1 < self.max_attempts:
                    delay = self.backoff_base_s * (2**attempt)
                    logger.warning("generation attempt %d failed (%s); retrying in %.2fs", attempt + 1, exc, delay)
                    time.sleep(delay)
        raise MtgTransportError(f"service at {url} failed after {self.max_attempts} attempts: {last_exc}")


def llm_generate(req: MtgRequest, client: MtgClient, select: str = "first") -> ModificationText:
    """Generate modification text(s) for a caption pair via the service."""
    prompt = format_llm_prompt(req.caption_a, req.caption_b)
    raw = client.generate(prompt, req.top_k, req.temperature, req.n_candidates)
    completions = [strip_completion(c) for c in raw]
    for c in completions:
        if not c:
            raise MtgEmptyCompletion(f"empty completion for pair {req.caption_a!r} / {req.caption_b!r}")
    text = select_candidate(completions, select)
    candidates = completions if req.n_candidates > 1 else None
    return ModificationText(text=text, source=SOURCE_LLM, candidates=candidates)


PARAPHRASE_PREFIX = "Paraphrase the following sentence: "


def paraphrase(text: str, client: MtgClient) -> str:
    """Rewrite a modification text through the paraphrase prompt."""
    raw = client.generate(PARAPHRASE_PREFIX + text, top_k=200, temperature=0.8, n=1)
    result = strip_completion(raw[0])
    if not result:
        raise MtgEmptyCompletion(f"empty paraphrase for {text!r}")
    return result

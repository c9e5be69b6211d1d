"""Deterministic stand-in for the external text-generation service.

Implements the same wire protocol (POST /v1/generate) but derives completions
purely from the prompt, so pipelines driven against it are reproducible
byte-for-byte. Generation prompts get diff-aware texts ("change it to X",
"remove Y", ...); paraphrase prompts are echoed back unchanged.
"""

from __future__ import annotations

import argparse
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .corpus import normalize_caption
from .pairs import edit_one
from .textgen import PARAPHRASE_PREFIX, RESPONSE_MARKER, parse_llm_prompt


def stub_completions(prompt: str, n: int) -> list[str]:
    """Deterministic completions for a prompt (no randomness anywhere)."""
    if prompt.startswith(PARAPHRASE_PREFIX):
        return [prompt[len(PARAPHRASE_PREFIX) :].strip()] * n

    if RESPONSE_MARKER not in prompt:
        return [f"echo: {prompt.strip()}"] * n

    caption_a, caption_b = parse_llm_prompt(prompt)
    edit = edit_one(normalize_caption(caption_a), normalize_caption(caption_b))
    if edit is None:
        variants = [f"make it like: {caption_b.strip()}"] * 3
    else:
        _, diff_a, diff_b, _ = edit
        if diff_b is not None:
            variants = [f"change it to {diff_b}", f"add {diff_b}", f"make it {diff_b}"]
        else:
            variants = [f"remove {diff_a}", f"take out {diff_a}", f"remove the {diff_a}"]

    out = []
    for i in range(n):
        if i < len(variants):
            out.append(variants[i])
        else:
            out.append(f"{variants[0]} ({i})")
    return out


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802 (http.server API)
        if self.path != "/v1/generate":
            self.send_error(404)
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length))
            prompt = body["prompt"]
            n = int(body.get("n", 1))
        except (json.JSONDecodeError, KeyError, ValueError):
            self.send_error(400, "bad request body")
            return
        payload = json.dumps({"completions": stub_completions(prompt, n)}).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format, *args):  # silence per-request noise
        pass


class StubServer:
    """In-process stub; use as a context manager in tests."""

    def __init__(self, port: int = 0):
        self.httpd = ThreadingHTTPServer(("127.0.0.1", port), _StubHandler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "StubServer":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run the deterministic generation stub service.")
    parser.add_argument("--port", type=int, default=8099)
    args = parser.parse_args(argv)
    server = ThreadingHTTPServer(("127.0.0.1", args.port), _StubHandler)
    print(f"stub generation service on http://127.0.0.1:{args.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

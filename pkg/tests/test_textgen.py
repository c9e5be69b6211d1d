"""Modification-text generation: templates, prompt format, wire protocol."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

import covr_forge.mtg_stub as mtg_stub
from covr_forge.pairs import CaptionPair
from covr_forge.textgen import (
    MtgClient,
    MtgEmptyCompletion,
    MtgRequest,
    MtgTransportError,
    RULE_TEMPLATES,
    applicable_templates,
    format_llm_prompt,
    llm_generate,
    paraphrase,
    parse_llm_prompt,
    rule_based_text,
    select_candidate,
    strip_completion,
)


def sub_pair(a, b, diff_a, diff_b, pos=0):
    return CaptionPair(a, b, "substitute", diff_a, diff_b, pos)


class TestRuleTemplates:
    def test_substitution_admits_all_templates(self):
        pair = sub_pair("happy girl dancing", "beautiful girl dancing", "happy", "beautiful")
        assert applicable_templates(pair) == list(range(len(RULE_TEMPLATES)))

    def test_insert_only_d2_templates(self):
        pair = CaptionPair("sky timelapse", "x", "insert", None, "clouds", 0)
        ids = applicable_templates(pair)
        assert ids and all(not RULE_TEMPLATES[i][1] for i in ids)
        text = rule_based_text(pair, 0)
        assert "clouds" in text.text

    def test_delete_only_d1_templates(self):
        pair = CaptionPair("clouds sky", "sky", "delete", "clouds", None, 0)
        assert applicable_templates(pair) == [0]
        assert rule_based_text(pair, 123).text == "Remove clouds"

    def test_deterministic_given_seed(self):
        pair = sub_pair("dandelion field", "rice field", "dandelion", "rice")
        assert rule_based_text(pair, 7).text == rule_based_text(pair, 7).text
        assert rule_based_text(pair, 7).template_id == rule_based_text(pair, 7).template_id

    def test_make_the_into_template(self):
        pair = sub_pair("happy girl dancing", "beautiful girl dancing", "happy", "beautiful")
        texts = {rule_based_text(pair, seed).text for seed in range(200)}
        assert "Make the happy into beautiful" in texts

    def test_diff_tokens_always_verbatim(self):
        pair = sub_pair("a b", "a c", "b", "c", 1)
        for seed in range(50):
            text = rule_based_text(pair, seed)
            needs_d1, needs_d2 = RULE_TEMPLATES[text.template_id][1:]
            if needs_d1:
                assert "b" in text.text.split()
            if needs_d2:
                assert "c" in text.text.split()

    def test_choice_roughly_uniform(self):
        pair = sub_pair("x one", "x two", "one", "two", 1)
        counts = [0] * len(RULE_TEMPLATES)
        for seed in range(2000):
            counts[rule_based_text(pair, seed).template_id] += 1
        assert min(counts) > 2000 / len(RULE_TEMPLATES) * 0.5


class TestPromptFormat:
    def test_byte_exact(self):
        prompt = format_llm_prompt("Clouds in the sky", "Airplane in the sky")
        assert prompt == "Clouds in the sky\n&&\nAirplane in the sky \n\n### Response:"

    def test_minimal(self):
        assert format_llm_prompt("a", "b") == "a\n&&\nb \n\n### Response:"

    def test_parse_roundtrip(self):
        a, b = "Young woman smiling", "Old woman smiling"
        assert parse_llm_prompt(format_llm_prompt(a, b)) == (a, b)

    def test_injective_on_delimiter_free_pairs(self):
        seen = {}
        for a, b in [("a", "b"), ("a b", "c"), ("a", "b c"), ("x", "y")]:
            p = format_llm_prompt(a, b)
            assert p not in seen
            seen[p] = (a, b)


class TestSelectCandidate:
    def test_longest(self):
        assert select_candidate(["a", "bbb", "cc"], "longest") == "bbb"

    def test_single(self):
        assert select_candidate(["a"], "first") == "a"
        assert select_candidate(["a"], "longest") == "a"

    def test_tie_earliest(self):
        assert select_candidate(["aa", "bb"], "longest") == "aa"

    def test_first(self):
        assert select_candidate(["x", "yyy"], "first") == "x"

    def test_empty_errors(self):
        with pytest.raises(Exception):
            select_candidate([], "first")


class TestStripCompletion:
    def test_plain(self):
        assert strip_completion("Add an airplane") == "Add an airplane"

    def test_echoed_prompt(self):
        raw = "Clouds\n&&\nSky \n\n### Response: Add an airplane\nextra stuff"
        assert strip_completion(raw) == "Add an airplane"

    def test_cut_at_first_newline(self):
        assert strip_completion("line one\nline two") == "line one"


class _FixedHandler(BaseHTTPRequestHandler):
    responses: list[str] = ["Add an airplane"]
    failures_before_success = 0
    calls = 0

    def do_POST(self):
        cls = type(self)
        cls.calls += 1
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        if cls.calls <= cls.failures_before_success:
            self.send_error(500, "transient")
            return
        completions = (cls.responses * body["n"])[: body["n"]]
        payload = json.dumps({"completions": completions}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def fixed_server():
    _FixedHandler.calls = 0
    _FixedHandler.failures_before_success = 0
    _FixedHandler.responses = ["Add an airplane"]
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _FixedHandler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}"
    httpd.shutdown()
    httpd.server_close()


class TestLlmGenerate:
    def test_single_completion(self, fixed_server):
        client = MtgClient(base_url=fixed_server, backoff_base_s=0.0)
        req = MtgRequest("Clouds in the sky", "Airplane in the sky")
        result = llm_generate(req, client)
        assert result.text == "Add an airplane" and result.source == "llm"
        assert result.candidates is None

    def test_three_distinct_candidates_via_stub(self, stub_server):
        client = MtgClient(base_url=stub_server.url, backoff_base_s=0.0)
        req = MtgRequest("Clouds in the sky", "Airplane in the sky", n_candidates=3)
        result = llm_generate(req, client, select="first")
        assert result.candidates is not None and len(result.candidates) == 3
        assert len(set(result.candidates)) == 3
        assert result.text == result.candidates[0]

    def test_stub_is_diff_aware(self, stub_server):
        client = MtgClient(base_url=stub_server.url, backoff_base_s=0.0)
        req = MtgRequest("Clouds in the sky", "Airplane in the sky")
        assert "airplane" in llm_generate(req, client).text

    def test_unreachable_after_retries(self):
        client = MtgClient(base_url="http://127.0.0.1:1", backoff_base_s=0.0, timeout_s=0.2)
        req = MtgRequest("a", "b")
        with pytest.raises(MtgTransportError, match="after 3 attempts"):
            llm_generate(req, client)

    def test_transient_failure_recovers(self, fixed_server):
        _FixedHandler.failures_before_success = 2
        client = MtgClient(base_url=fixed_server, backoff_base_s=0.0)
        result = llm_generate(MtgRequest("a", "b"), client)
        assert result.text == "Add an airplane"
        assert _FixedHandler.calls == 3

    def test_empty_completion_error(self, fixed_server):
        _FixedHandler.responses = ["   "]
        client = MtgClient(base_url=fixed_server, backoff_base_s=0.0)
        with pytest.raises(MtgEmptyCompletion):
            llm_generate(MtgRequest("a", "b"), client)

    def test_request_validation(self):
        with pytest.raises(Exception):
            MtgRequest("a", "b", top_k=0)
        with pytest.raises(Exception):
            MtgRequest("a", "b", temperature=0.0)


class TestParaphrase:
    def test_identity_stub_returns_unchanged(self, stub_server):
        client = MtgClient(base_url=stub_server.url, backoff_base_s=0.0)
        assert paraphrase("Replace X with Y", client) == "Replace X with Y"

    def test_passthrough_contract(self, fixed_server):
        _FixedHandler.responses = ["Swap X for Y"]
        client = MtgClient(base_url=fixed_server, backoff_base_s=0.0)
        assert paraphrase("Replace X with Y", client) == "Swap X for Y"

    def test_empty_paraphrase_error(self, fixed_server):
        _FixedHandler.responses = [""]
        client = MtgClient(base_url=fixed_server, backoff_base_s=0.0)
        with pytest.raises(MtgEmptyCompletion):
            paraphrase("anything", client)


class TestStubDeterminism:
    def test_same_prompt_same_completions(self):
        p = format_llm_prompt("red car parked", "blue car parked")
        assert mtg_stub.stub_completions(p, 3) == mtg_stub.stub_completions(p, 3)

    def test_deletion_prompt(self):
        p = format_llm_prompt("clouds sky timelapse", "sky timelapse")
        assert "remove clouds" in mtg_stub.stub_completions(p, 1)[0]

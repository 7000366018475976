"""Adapter layer: scripted doubles, discovery, and the HTTP chat endpoint."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from conftest import scripted_card, write_model_card
from depkit.adapter import (
    AdapterResponse,
    DiscoveryError,
    InferenceRequest,
    ScriptError,
    discover_models,
    generate,
    load_model_card,
    open_endpoint,
)
from depkit.clock import VirtualClock
from depkit.protocol import STATUS_CODES, ModelCard, ProtocolError


def req(prompt="hello"):
    return InferenceRequest(prompt=prompt, request_id="r1")


class TestScripted:
    def test_constant_answer(self):
        endpoint = open_endpoint(scripted_card("m", {"responses": {"*": {"status": 200, "text": "B"}}}))
        for prompt in ("one", "two", "three"):
            assert endpoint.generate(req(prompt)).text == "B"

    def test_echo(self):
        endpoint = open_endpoint(scripted_card("m", {"responses": {"*": {"status": 200, "echo": True}}}))
        assert endpoint.generate(req("hello")).text == "hello"

    def test_schedule_consumed_in_call_order(self):
        endpoint = open_endpoint(scripted_card("m", {
            "schedule": [429, {"status": 200, "text": "ok"}],
            "responses": {"*": {"status": 200, "text": "later"}},
        }))
        first = endpoint.generate(req())
        second = endpoint.generate(req())
        third = endpoint.generate(req())
        assert first.status == 429 and first.error_log
        assert (second.status, second.text) == (200, "ok")
        assert (third.status, third.text) == (200, "later")

    def test_pattern_precedence_catch_all_last(self):
        endpoint = open_endpoint(scripted_card("m", {"responses": {
            "*": {"status": 200, "text": "default"},
            "who*": {"status": 200, "text": "specific"},
        }}))
        assert endpoint.generate(req("who is it")).text == "specific"
        assert endpoint.generate(req("other")).text == "default"

    def test_ordered_list_form(self):
        endpoint = open_endpoint(scripted_card("m", {"responses": [
            ["say A*", {"status": 200, "text": "A"}],
            ["say*", {"status": 200, "text": "any"}],
        ]}))
        assert endpoint.generate(req("say A please")).text == "A"
        assert endpoint.generate(req("say B please")).text == "any"

    def test_unknown_status_is_load_error(self):
        with pytest.raises(ScriptError):
            open_endpoint(scripted_card("m", {"responses": {"*": {"status": 666}}}))

    def test_unmatched_prompt_coded_500(self):
        endpoint = open_endpoint(scripted_card("m", {"responses": {"nomatch*": {"status": 200, "text": "x"}}}))
        response = endpoint.generate(req("something else"))
        assert response.status == 500

    def test_delay_50ms_ten_serial_calls(self):
        endpoint = open_endpoint(scripted_card("m", {
            "responses": {"*": {"status": 200, "text": "x", "delay": 0.05}}}))
        start = time.monotonic()
        for _ in range(10):
            endpoint.generate(req())
        assert time.monotonic() - start >= 0.5

    def test_delay_on_virtual_clock(self):
        clock = VirtualClock()
        endpoint = open_endpoint(
            scripted_card("m", {"responses": {"*": {"status": 200, "text": "x", "delay": 0.05}}}),
            clock=clock)
        for _ in range(10):
            endpoint.generate(req())
        assert clock.now() == pytest.approx(0.5)

    def test_fault_injection_deterministic(self):
        script = {
            "responses": {"*": {"status": 200, "text": "x"}},
            "fault_injection": {"status": 429, "probability": 0.4, "seed": 11},
        }

        def sequence():
            endpoint = open_endpoint(scripted_card("m", script))
            return [endpoint.generate(req(f"p{i}")).status for i in range(50)]

        one = sequence()
        two = sequence()
        assert one == two
        assert 429 in one and 200 in one

    def test_call_counter(self):
        endpoint = open_endpoint(scripted_card("m", {"responses": {"*": {"status": 200, "text": "x"}}}))
        for _ in range(7):
            endpoint.generate(req())
        assert endpoint.call_count == 7

    def test_metadata_carries_model_id(self):
        response = generate(scripted_card("mymodel", {"responses": {"*": {"status": 200, "text": "x"}}}), req())
        assert response.metadata["model_id"] == "mymodel"


class TestAdapterResponseInvariant:
    def test_text_iff_200(self):
        with pytest.raises(ValueError):
            AdapterResponse(status=200, error_log="boom")
        with pytest.raises(ValueError):
            AdapterResponse(status=429, text="should not be here")
        with pytest.raises(ValueError):
            AdapterResponse(status=200, text="x", error_log="y")

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError):
            InferenceRequest(prompt="")


class TestDiscovery:
    def test_partial_validity(self, tmp_path):
        write_model_card(tmp_path, "good-a", {"responses": {"*": {"status": 200, "text": "x"}}})
        write_model_card(tmp_path, "good-b", {"responses": {"*": {"status": 200, "text": "x"}}})
        (tmp_path / "broken.model.json").write_text("{not json", encoding="utf-8")
        cards, warnings = discover_models([tmp_path])
        assert [c.model_id for c in cards] == ["good-a", "good-b"]
        assert len(warnings) == 1 and "broken.model.json" in warnings[0]

    def test_empty_directory(self, tmp_path):
        cards, warnings = discover_models([tmp_path])
        assert cards == [] and warnings == []

    def test_sorted_by_model_id(self, tmp_path):
        for mid in ("zeta", "alpha", "mid"):
            write_model_card(tmp_path, mid, {"responses": {"*": {"status": 200, "text": "x"}}})
        cards, _ = discover_models([tmp_path])
        assert [c.model_id for c in cards] == ["alpha", "mid", "zeta"]

    def test_duplicate_model_id_names_both_paths(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        write_model_card(a, "dupe", {"responses": {"*": {"status": 200, "text": "x"}}})
        path_b = b / "dupe.model.json"
        b.mkdir()
        path_b.write_text(json.dumps({
            "model_id": "dupe",
            "endpoint": {"kind": "scripted", "script": {"responses": {"*": {"status": 200, "text": "y"}}}},
        }), encoding="utf-8")
        with pytest.raises(DiscoveryError) as exc:
            discover_models([a, b])
        message = str(exc.value)
        assert str(a / "dupe.model.json") in message and str(path_b) in message

    def test_filename_mismatch_warns(self, tmp_path):
        (tmp_path / "wrongname.model.json").write_text(json.dumps({
            "model_id": "actual-id",
            "endpoint": {"kind": "scripted", "script": {"responses": {"*": {"status": 200, "text": "x"}}}},
        }), encoding="utf-8")
        cards, warnings = discover_models([tmp_path])
        assert [c.model_id for c in cards] == ["actual-id"]
        assert any("filename" in w for w in warnings)

    def test_card_requires_known_endpoint_kind(self, tmp_path):
        path = tmp_path / "bad.model.json"
        path.write_text(json.dumps({"model_id": "bad", "endpoint": {"kind": "grpc"}}), encoding="utf-8")
        with pytest.raises(ProtocolError):
            load_model_card(path)


# ---------------------------------------------------------------------------
# HTTP chat endpoint against a local stub


class _StubChat(BaseHTTPRequestHandler):
    behavior = {"status": 200, "body": None, "sleep": 0.0}
    requests_seen = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        payload = json.loads(self.rfile.read(length))
        type(self).requests_seen.append(payload)
        if self.behavior["sleep"]:
            time.sleep(self.behavior["sleep"])
        body = self.behavior["body"]
        if body is None:
            content = payload["messages"][0]["content"]
            body = json.dumps({
                "message": {"role": "assistant", "content": f"stub says: {content}"},
                "usage": {"prompt_tokens": 3, "completion_tokens": 5},
            }).encode("utf-8")
        self.send_response(self.behavior["status"])
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


@pytest.fixture
def chat_stub():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _StubChat)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    _StubChat.behavior = {"status": 200, "body": None, "sleep": 0.0}
    _StubChat.requests_seen = []
    yield f"http://127.0.0.1:{httpd.server_address[1]}/chat"
    httpd.shutdown()
    thread.join(timeout=2)
    httpd.server_close()


def http_card(url, **endpoint_extra):
    return ModelCard(model_id="remote-model",
                     endpoint={"kind": "http-chat", "base_url": url, **endpoint_extra},
                     generation_defaults={"max_tokens": 16})


class TestHttpChat:
    def test_fixed_completion(self, chat_stub):
        response = generate(http_card(chat_stub), req("ping"))
        assert response.status == 200
        assert response.text == "stub says: ping"
        assert response.metadata["model_id"] == "remote-model"
        assert response.metadata["token_counts"] == {"prompt_tokens": 3, "completion_tokens": 5}

    def test_generation_defaults_merged(self, chat_stub):
        generate(http_card(chat_stub), InferenceRequest(prompt="p", generation={"temperature": 0.1}))
        sent = _StubChat.requests_seen[-1]
        assert sent["max_tokens"] == 16 and sent["temperature"] == 0.1
        assert sent["messages"] == [{"role": "user", "content": "p"}]

    def test_upstream_429_passthrough(self, chat_stub):
        _StubChat.behavior = {"status": 429, "body": b"slow down", "sleep": 0.0}
        response = generate(http_card(chat_stub), req())
        assert response.status == 429
        assert response.error_log

    def test_malformed_reply_is_500(self, chat_stub):
        _StubChat.behavior = {"status": 200, "body": b'{"unexpected": true}', "sleep": 0.0}
        assert generate(http_card(chat_stub), req()).status == 500

    def test_unreachable_is_503(self):
        response = generate(http_card("http://127.0.0.1:9/chat"), req())
        assert response.status == 503

    def test_timeout_is_503(self, chat_stub):
        _StubChat.behavior = {"status": 200, "body": None, "sleep": 0.5}
        response = generate(http_card(chat_stub, timeout_s=0.1), req())
        assert response.status == 503
        assert "timeout" in response.error_log

    def test_status_totality_under_garbage_bodies(self, chat_stub):
        cases = [
            (200, b""),
            (200, b"\x00\xffgarbage"),
            (200, b'{"message": 42}'),
            (200, b'{"message": {"content": 7}}'),
            (200, b'{"message": {"content": "ok"'),
            (202, b"weird"),
            (301, b""),
            (404, b"gone"),
            (500, b"boom"),
            (502, b"bad gateway"),
        ]
        for status, body in cases:
            _StubChat.behavior = {"status": status, "body": body, "sleep": 0.0}
            response = generate(http_card(chat_stub), req())
            assert response.status in STATUS_CODES
            assert (response.status == 200) == (response.text is not None)


class TestUniformInterface:
    def test_scripted_and_http_are_interchangeable(self, chat_stub):
        # the same driver loop works against either endpoint kind
        def drive(card):
            endpoint = open_endpoint(card)
            return [endpoint.generate(req(f"q{i}")).status for i in range(3)]

        assert drive(scripted_card("s", {"responses": {"*": {"status": 200, "text": "x"}}})) == [200] * 3
        assert drive(http_card(chat_stub)) == [200] * 3

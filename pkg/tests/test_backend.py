import json

import pytest

from boxchain.backend import (
    MatchRule,
    MockBackend,
    ModelRequest,
    ModelResponse,
    RemoteBackend,
    RemoteConfig,
    ScriptedBehavior,
    estimate_image_tokens,
    estimate_text_tokens,
    image_fingerprint,
)
from boxchain.errors import (
    BackendUnavailableError,
    CapabilityError,
    ConfigError,
    InputFormatError,
    ParameterError,
)
from boxchain.render import encode_png
from conftest import make_noise_image


@pytest.fixture()
def png():
    return encode_png(make_noise_image(40, 30, seed=1))


def behavior(*rules):
    return ScriptedBehavior(tuple(rules) + (MatchRule("*", "UNKNOWN"),))


class TestModelRequest:
    def test_temperature_pinned(self, png):
        with pytest.raises(ParameterError):
            ModelRequest(images=(png,), instruction="hi", temperature=0.7)

    def test_needs_image_and_instruction(self, png):
        with pytest.raises(ParameterError):
            ModelRequest(images=(), instruction="hi")
        with pytest.raises(ParameterError):
            ModelRequest(images=(png,), instruction="")

    def test_counts_non_negative(self):
        with pytest.raises(ParameterError):
            ModelResponse(text="x", prompt_token_count=-1, output_token_count=0, image_token_count=0)


class TestMockBackend:
    def test_first_match_wins(self, png):
        b = MockBackend(behavior(
            MatchRule("Which red box", "<box>3</box>"),
            MatchRule("red box", "<box>9</box>"),
        ))
        resp = b.invoke(ModelRequest(images=(png,), instruction="Which red box holds it?"))
        assert resp.text == "<box>3</box>"

    def test_catch_all(self, png):
        b = MockBackend(behavior())
        assert b.invoke(ModelRequest(images=(png,), instruction="anything")).text == "UNKNOWN"

    def test_catch_all_required(self):
        with pytest.raises(ConfigError):
            ScriptedBehavior((MatchRule("only this", "x"),))

    def test_regex_rule(self, png):
        b = MockBackend(behavior(MatchRule(r"box \d+", "matched", regex=True)))
        assert b.invoke(ModelRequest(images=(png,), instruction="pick box 12 now")).text == "matched"

    def test_fingerprint_rule(self, png):
        other = encode_png(make_noise_image(40, 30, seed=2))
        fp = image_fingerprint(png)
        b = MockBackend(behavior(MatchRule("*", "this image", fingerprint=fp[:16])))
        assert b.invoke(ModelRequest(images=(png,), instruction="q")).text == "this image"
        assert b.invoke(ModelRequest(images=(other,), instruction="q")).text == "UNKNOWN"

    def test_deterministic_including_tokens(self, png):
        b = MockBackend(behavior(MatchRule("q", "a")))
        r1 = b.invoke(ModelRequest(images=(png,), instruction="q"))
        r2 = b.invoke(ModelRequest(images=(png,), instruction="q"))
        assert r1 == r2
        assert r1.estimated

    def test_call_log_monotonic(self, png):
        b = MockBackend(behavior())
        for i in range(3):
            b.invoke(ModelRequest(images=(png,), instruction=f"call {i}"))
        assert [c.index for c in b.call_log] == [1, 2, 3]
        assert b.call_log[1].instruction == "call 1"

    def test_from_file(self, tmp_path, png):
        path = tmp_path / "behavior.json"
        path.write_text(json.dumps([
            {"instruction_pattern": "hello", "response": "hi"},
            {"instruction_pattern": "*", "response": "fallback"},
        ]))
        b = MockBackend(ScriptedBehavior.from_file(path))
        assert b.invoke(ModelRequest(images=(png,), instruction="hello there")).text == "hi"

    def test_from_file_malformed(self, tmp_path):
        path = tmp_path / "behavior.json"
        path.write_text("{not json")
        with pytest.raises(InputFormatError):
            ScriptedBehavior.from_file(path)


class TestTokenEstimation:
    def test_text_tokens(self):
        assert estimate_text_tokens("") == 0
        assert estimate_text_tokens("abcd") == 1
        assert estimate_text_tokens("abcde") == 2

    def test_image_tokens_by_tiles(self, png):
        # 40x30 image, 512px tiles -> 1 tile
        assert estimate_image_tokens(png, tile_px=512, tokens_per_tile=256) == 256
        # 16px tiles -> ceil(40/16)*ceil(30/16) = 3*2 = 6 tiles
        assert estimate_image_tokens(png, tile_px=16, tokens_per_tile=10) == 60


class TestRemoteBackend:
    def config(self):
        return RemoteConfig(endpoint="http://example.invalid/v1/chat", model="m")

    def test_retries_then_unavailable(self, monkeypatch, png):
        import requests

        calls = []

        def fake_post(*args, **kwargs):
            calls.append(args)
            raise requests.ConnectionError("no route")

        monkeypatch.setattr(requests, "post", fake_post)
        monkeypatch.setattr("time.sleep", lambda s: None)
        b = RemoteBackend(self.config())
        with pytest.raises(BackendUnavailableError):
            b.invoke(ModelRequest(images=(png,), instruction="q"))
        assert len(calls) == 3

    def test_request_not_mutated_across_retries(self, monkeypatch, png):
        import requests

        bodies = []

        def fake_post(url, json=None, **kwargs):
            bodies.append(json)
            raise requests.Timeout("slow")

        monkeypatch.setattr(requests, "post", fake_post)
        monkeypatch.setattr("time.sleep", lambda s: None)
        b = RemoteBackend(self.config())
        with pytest.raises(BackendUnavailableError):
            b.invoke(ModelRequest(images=(png,), instruction="q"))
        assert bodies[0] == bodies[1] == bodies[2]
        assert bodies[0]["temperature"] == 0

    def test_capability_error_not_retried(self, monkeypatch, png):
        import requests

        calls = []

        class Resp:
            status_code = 415
            text = "images not supported"

        def fake_post(*args, **kwargs):
            calls.append(1)
            return Resp()

        monkeypatch.setattr(requests, "post", fake_post)
        b = RemoteBackend(self.config())
        with pytest.raises(CapabilityError):
            b.invoke(ModelRequest(images=(png,), instruction="q"))
        assert len(calls) == 1

    def test_usage_reported(self, monkeypatch, png):
        import requests

        class Resp:
            status_code = 200
            text = "ok"

            @staticmethod
            def json():
                return {
                    "choices": [{"message": {"content": "42"}}],
                    "usage": {"prompt_tokens": 10, "completion_tokens": 2},
                }

        monkeypatch.setattr(requests, "post", lambda *a, **k: Resp())
        b = RemoteBackend(self.config())
        resp = b.invoke(ModelRequest(images=(png,), instruction="q"))
        assert resp.text == "42"
        assert (resp.prompt_token_count, resp.output_token_count) == (10, 2)
        assert not resp.estimated

    def test_missing_usage_estimated(self, monkeypatch, png):
        import requests

        class Resp:
            status_code = 200
            text = "ok"

            @staticmethod
            def json():
                return {"choices": [{"message": {"content": "hello world"}}]}

        monkeypatch.setattr(requests, "post", lambda *a, **k: Resp())
        b = RemoteBackend(self.config())
        resp = b.invoke(ModelRequest(images=(png,), instruction="q"))
        assert resp.estimated
        assert resp.image_token_count == 256

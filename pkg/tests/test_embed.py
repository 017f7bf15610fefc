"""Embedding backend tests: determinism, normalization, the remote client's
protocol handling and the recorded-fixture transport."""

from __future__ import annotations

import json

import numpy as np
import pytest
import requests

from ragkit.embed import (
    EmbedderConfig,
    EmbedError,
    FixtureTransport,
    HashingEmbedder,
    RecordingTransport,
    RemoteEmbedder,
    embed_text,
    embed_tokens,
    make_embedder,
)


# -- hashing embedder ---------------------------------------------------------


def test_hashing_embedder_unit_norm_and_dim():
    embedder = HashingEmbedder(dim=48)
    for text in ("asthme", "a", "une phrase plus longue sur le cœur"):
        vector = embedder.embed(text)
        assert vector.shape == (48,)
        assert np.linalg.norm(vector) == pytest.approx(1.0, abs=1e-12)


def test_hashing_embedder_deterministic_across_instances():
    a = HashingEmbedder(dim=96).embed("hypertension artérielle")
    b = HashingEmbedder(dim=96).embed("hypertension artérielle")
    assert np.array_equal(a, b)


def test_hashing_embedder_case_insensitive():
    embedder = HashingEmbedder(dim=64)
    assert np.array_equal(embedder.embed("Asthme"), embedder.embed("asthme"))


def test_hashing_embedder_similar_texts_closer_than_unrelated():
    embedder = HashingEmbedder(dim=256)
    base = embedder.embed("bronchite chronique")
    near = embedder.embed("bronchite chroniques")
    far = embedder.embed("zzz qqq xxyyzz")
    assert float(base @ near) > float(base @ far)


def test_hashing_embedder_short_text_uses_whole_text():
    embedder = HashingEmbedder(dim=32)
    vector = embedder.embed("ab")
    assert np.linalg.norm(vector) == pytest.approx(1.0, abs=1e-12)


def test_hashing_embedder_rejects_bad_dim():
    with pytest.raises(EmbedError):
        HashingEmbedder(dim=0)


# -- config validation -----------------------------------------------------------


def test_embedder_config_validation():
    with pytest.raises(EmbedError):
        EmbedderConfig(kind="magic", model_name="m", dim=8)
    with pytest.raises(EmbedError):
        EmbedderConfig(kind="remote", model_name="m", dim=8)  # no endpoint
    with pytest.raises(EmbedError):
        EmbedderConfig(kind="hashing", model_name="m", dim=0)


def test_make_embedder_dispatches():
    hashing = make_embedder(EmbedderConfig(kind="hashing", model_name="h", dim=8))
    assert isinstance(hashing, HashingEmbedder)
    remote = make_embedder(
        EmbedderConfig(kind="remote", model_name="m", dim=8, endpoint_url="http://x/v1")
    )
    assert isinstance(remote, RemoteEmbedder)


# -- remote client ------------------------------------------------------------------


def _remote_config(dim=4, retries=1, batch_size=32):
    return EmbedderConfig(
        kind="remote",
        model_name="test-encoder",
        dim=dim,
        endpoint_url="http://backend/v1/embeddings",
        retries=retries,
        batch_size=batch_size,
    )


class _ScriptedTransport:
    """Returns canned embeddings; counts calls and captured payloads."""

    def __init__(self, dim=4, fail_times=0, status=200):
        self.dim = dim
        self.fail_times = fail_times
        self.status = status
        self.calls = []

    def __call__(self, url, payload, headers, timeout_s):
        self.calls.append(payload)
        if self.fail_times > 0:
            self.fail_times -= 1
            raise requests.ConnectionError("scripted failure")
        data = [
            {"embedding": [float(len(text))] + [1.0] * (self.dim - 1)}
            for text in payload["input"]
        ]
        return self.status, {"data": data}


def test_remote_embedder_normalizes_and_orders():
    transport = _ScriptedTransport()
    embedder = RemoteEmbedder(_remote_config(), transport=transport)
    vectors = embedder.embed_many(["a", "bbb"])
    assert len(vectors) == 2
    for vector in vectors:
        assert np.linalg.norm(vector) == pytest.approx(1.0, abs=1e-12)
    # first component encodes the text length, so order is observable
    assert vectors[0][0] < vectors[1][0]


def test_remote_embedder_batching_invariant():
    one_at_a_time = RemoteEmbedder(_remote_config(batch_size=1), transport=_ScriptedTransport())
    one_batch = RemoteEmbedder(_remote_config(batch_size=16), transport=_ScriptedTransport())
    texts = ["un", "deux", "trois", "quatre"]
    singles = one_at_a_time.embed_many(texts)
    batched = one_batch.embed_many(texts)
    for a, b in zip(singles, batched):
        assert np.array_equal(a, b)


def test_remote_embedder_retries_then_succeeds(caplog):
    transport = _ScriptedTransport(fail_times=1)
    embedder = RemoteEmbedder(_remote_config(retries=2), transport=transport)
    vector = embedder.embed("asthme")
    assert vector.shape == (4,)
    assert len(transport.calls) == 2


def test_remote_embedder_exhausted_retries_name_the_text():
    transport = _ScriptedTransport(fail_times=10)
    embedder = RemoteEmbedder(_remote_config(retries=1), transport=transport)
    with pytest.raises(EmbedError, match="asthme"):
        embedder.embed("asthme")
    assert len(transport.calls) == 2  # initial try + 1 retry


def test_remote_embedder_rejects_dimension_mismatch():
    transport = _ScriptedTransport(dim=3)
    embedder = RemoteEmbedder(_remote_config(dim=4, retries=0), transport=transport)
    with pytest.raises(EmbedError, match="dimension"):
        embedder.embed("mot")


def test_remote_embedder_rejects_count_mismatch():
    def transport(url, payload, headers, timeout_s):
        return 200, {"data": [{"embedding": [1.0, 0.0, 0.0, 0.0]}]}

    embedder = RemoteEmbedder(_remote_config(retries=0), transport=transport)
    with pytest.raises(EmbedError, match="count mismatch"):
        embedder.embed_many(["a", "b"])


def test_remote_embedder_rejects_malformed_body():
    def transport(url, payload, headers, timeout_s):
        return 200, {"unexpected": True}

    embedder = RemoteEmbedder(_remote_config(retries=0), transport=transport)
    with pytest.raises(EmbedError, match="malformed"):
        embedder.embed("mot")


def test_remote_embedder_non_200_is_error():
    transport = _ScriptedTransport(status=503)
    embedder = RemoteEmbedder(_remote_config(retries=0), transport=transport)
    with pytest.raises(EmbedError, match="503"):
        embedder.embed("mot")


def test_remote_embedder_sends_api_key_from_env(monkeypatch):
    captured = {}

    def transport(url, payload, headers, timeout_s):
        captured.update(headers)
        return 200, {"data": [{"embedding": [1.0, 0.0, 0.0, 0.0]}]}

    monkeypatch.setenv("RAGKIT_API_KEY", "sk-secret")
    embedder = RemoteEmbedder(_remote_config(), transport=transport)
    embedder.embed("mot")
    assert captured.get("Authorization") == "Bearer sk-secret"


# -- fixture transport ----------------------------------------------------------------


def test_fixture_transport_replays_and_records(tmp_path):
    fixture = tmp_path / "embeddings.jsonl"
    live = _ScriptedTransport()
    recording = RecordingTransport(live, fixture)
    config = _remote_config()
    RemoteEmbedder(config, transport=recording).embed_many(["a", "bb"])

    replayed = RemoteEmbedder(config, transport=FixtureTransport(fixture))
    vectors = replayed.embed_many(["a", "bb"])
    direct = RemoteEmbedder(config, transport=_ScriptedTransport()).embed_many(["a", "bb"])
    for a, b in zip(vectors, direct):
        assert np.array_equal(a, b)


def test_fixture_transport_unmatched_request_raises(tmp_path):
    fixture = tmp_path / "embeddings.jsonl"
    fixture.write_text(
        json.dumps({"request": {"model": "x", "input": ["a"]}, "status": 200,
                    "response": {"data": [{"embedding": [1, 0, 0, 0]}]}})
        + "\n",
        encoding="utf-8",
    )
    embedder = RemoteEmbedder(_remote_config(retries=0), transport=FixtureTransport(fixture))
    with pytest.raises(EmbedError, match="no recorded response"):
        embedder.embed("something else")


# -- module-level helpers ----------------------------------------------------------------


def test_embed_text_returns_embedding_vector():
    config = EmbedderConfig(kind="hashing", model_name="h", dim=16)
    vector = embed_text(config, "asthme")
    assert vector.dim == 16
    assert vector.text == "asthme"
    assert np.linalg.norm(vector.values) == pytest.approx(1.0, abs=1e-12)


def test_embed_text_rejects_empty():
    config = EmbedderConfig(kind="hashing", model_name="h", dim=16)
    with pytest.raises(EmbedError):
        embed_text(config, "   ")


def test_embed_tokens_uses_metrics_tokenizer():
    config = EmbedderConfig(kind="hashing", model_name="h", dim=16)
    pairs = embed_tokens(config, "Asthme: maladie")
    assert [token for token, _ in pairs] == ["asthme", ":", "maladie"]
    for _, vector in pairs:
        assert np.linalg.norm(vector.values) == pytest.approx(1.0, abs=1e-12)


def test_embed_tokens_rejects_tokenless_text():
    config = EmbedderConfig(kind="hashing", model_name="h", dim=16)
    with pytest.raises(EmbedError, match="no tokens"):
        embed_tokens(config, " \n ")

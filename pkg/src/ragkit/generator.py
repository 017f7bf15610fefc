"""Prompt rendering and chat-completion generation over HTTP backends.

Prompts come from plain-text template files with ``{question}`` and (for the
retrieval-augmented mode) ``{context}`` placeholders.  Backends speak the
common chat-completions JSON shape; a built-in mock backend (endpoint URLs
starting with ``mock:``) answers deterministically so whole pipelines can run
offline and bit-reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import requests

from .retriever import VectorIndex, query_index

__all__ = [
    "GeneratorError",
    "PromptError",
    "PromptTemplate",
    "load_template",
    "RenderResult",
    "render_prompt",
    "BackendConfig",
    "GenerationRun",
    "generate",
    "RunSpec",
    "enumerate_configs",
    "RetrieverHandle",
    "BatchResult",
    "run_batch",
    "runs_to_jsonl",
    "runs_from_jsonl",
    "MODES",
]

logger = logging.getLogger(__name__)

#: ``base`` prompts the model directly; ``rag`` adds retrieved context.
MODES = ("base", "rag")


class GeneratorError(RuntimeError):
    """Raised on unrecoverable backend failures (malformed responses, 4xx)."""


class PromptError(ValueError):
    """Raised on template or rendering precondition violations."""


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt template for one generation mode.

    ``base`` templates contain exactly one ``{question}`` placeholder; ``rag``
    templates contain exactly one ``{question}`` and one ``{context}``.
    """

    mode: str
    text: str
    language: str = "fr"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PromptError(f"unknown mode {self.mode!r}")
        question_count = self.text.count("{question}")
        context_count = self.text.count("{context}")
        if question_count != 1:
            raise PromptError(
                f"{self.mode} template must contain exactly one {{question}} "
                f"placeholder, found {question_count}"
            )
        expected_context = 1 if self.mode == "rag" else 0
        if context_count != expected_context:
            raise PromptError(
                f"{self.mode} template must contain exactly {expected_context} "
                f"{{context}} placeholder(s), found {context_count}"
            )


def load_template(mode: str, path: str | Path | None = None) -> PromptTemplate:
    """Load a prompt template from ``path`` or the packaged French default."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        if mode not in MODES:
            raise PromptError(f"unknown mode {mode!r}")
        name = "base_fr.txt" if mode == "base" else "rag_fr.txt"
        text = resources.files("ragkit").joinpath(f"prompts/{name}").read_text(
            encoding="utf-8"
        )
    return PromptTemplate(mode=mode, text=text)


@dataclass(frozen=True)
class RenderResult:
    """A rendered prompt plus what truncation, if any, was applied."""

    text: str
    truncated: bool
    dropped_context: int


def render_prompt(
    template: PromptTemplate,
    question: str,
    context: Sequence[str] | None = None,
    char_budget: int = 4000,
) -> RenderResult:
    """Fill a template with the question and (for rag) the retrieved context.

    Context items are joined by blank lines, best-ranked first.  If the
    rendered prompt exceeds ``char_budget`` characters, items are dropped from
    the lowest-ranked end until it fits (or no items remain); the result
    records how many were dropped.  Rendering is deterministic: equal inputs
    give byte-equal prompts.

    Args:
        template: The template to fill.
        question: Non-empty question (the term to explain).
        context: Retrieved chunk texts; required non-empty for ``rag`` and
            forbidden for ``base``.
        char_budget: Maximum rendered length in characters.

    Raises:
        PromptError: On an empty question or a mode/context mismatch.
    """
    if not question.strip():
        raise PromptError("question must be non-empty")
    if template.mode == "base":
        if context:
            raise PromptError("base mode takes no context")
        return RenderResult(
            text=template.text.replace("{question}", question),
            truncated=False,
            dropped_context=0,
        )
    if not context:
        raise PromptError("rag mode needs at least one context item")

    items = list(context)
    dropped = 0
    while True:
        text = template.text.replace("{context}", "\n\n".join(items)).replace(
            "{question}", question
        )
        if len(text) <= char_budget or not items:
            return RenderResult(text=text, truncated=dropped > 0, dropped_context=dropped)
        items.pop()
        dropped += 1


@dataclass(frozen=True)
class BackendConfig:
    """One text-generation backend.

    Attributes:
        endpoint_url: Chat-completions URL, or a ``mock:`` URL for the
            built-in offline backend (``mock:static:<text>``, ``mock:fill``,
            ``mock:para``).
        model_name: Model identifier sent to the backend; fine-tuned variants
            are separate backends with their own names.
        finetuned: Whether this backend is a fine-tuned variant (carried into
            reports; not sent to the backend).
        temperature: Sampling temperature; 0 keeps decoding greedy.
        timeout_ms: Per-request timeout.
        retries: Extra attempts after a retryable failure.
        api_key_env: Environment variable holding the bearer token, if any.
    """

    endpoint_url: str
    model_name: str
    finetuned: bool = False
    temperature: float = 0.0
    timeout_ms: int = 30_000
    retries: int = 2
    api_key_env: str = "RAGKIT_API_KEY"


@dataclass
class GenerationRun:
    """One generation: the rendered prompt, the output and how it ended.

    ``finish_reason`` is ``"stop"`` (natural end), ``"length"`` (token budget
    exhausted) or ``"error"`` (backend unreachable after retries; output
    empty).  ``context_refs`` is empty exactly when ``mode == "base"``.
    """

    query_id: str
    config_id: str
    term: str
    mode: str
    backend_model: str
    encoder: str | None
    max_tokens: int
    prompt: str
    context_refs: list[str] = field(default_factory=list)
    truncated: bool = False
    dropped_context: int = 0
    output_text: str = ""
    finish_reason: str = "stop"
    latency_ms: int = 0
    raw_response: dict | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise GeneratorError(f"unknown mode {self.mode!r}")
        if self.mode == "base" and self.context_refs:
            raise GeneratorError("base-mode runs cannot carry context references")


# -- transports ---------------------------------------------------------------

# A transport maps (url, payload, headers, timeout_s) to
# (status, response_body, latency_ms).

_MOCK_VOCAB = (
    "maladie", "inflammation", "affection", "organe", "traitement", "douleur",
    "chronique", "infection", "peau", "sang", "qui", "touche", "provoque",
    "entraine", "une", "des", "du", "la", "le", "les", "et", "ou", "dans",
    "corps", "humain", "grave", "frequente", "rare", "benigne", "tissu",
    "cellule", "muscle", "os", "nerf", "souvent", "parfois", "appelee",
)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _mock_transport(url: str, payload: dict, headers: dict, timeout_s: float):
    """Deterministic offline chat-completions backend.

    ``mock:static:<text>`` always answers ``<text>``; ``mock:fill`` answers
    exactly ``max_tokens`` words with finish reason ``length``; ``mock:para``
    answers a pseudo-paraphrase seeded by the prompt, occasionally hitting the
    token budget.  Latency is reported as 0 so recorded runs are
    bit-reproducible.
    """
    prompt = payload["messages"][0]["content"]
    max_tokens = int(payload["max_tokens"])
    spec = url.split(":", 2)
    kind = spec[1] if len(spec) > 1 else "para"
    if kind == "static":
        text = spec[2] if len(spec) > 2 else "OK"
        finish = "stop"
    elif kind == "fill":
        text = " ".join(f"mot{i + 1}" for i in range(max_tokens))
        finish = "length"
    elif kind == "para":
        rng = random.Random(_fnv1a64(f"{prompt}\x1f{max_tokens}".encode("utf-8")))
        if rng.random() < 0.15:
            n_words = max_tokens
            finish = "length"
        else:
            n_words = rng.randint(5, max(6, min(max_tokens - 1, 24)))
            finish = "stop"
        words = [rng.choice(_MOCK_VOCAB) for _ in range(n_words)]
        text = (" ".join(words)).capitalize()
        if finish == "stop":
            text += "."
    else:
        raise GeneratorError(f"unknown mock backend {url!r}")
    body = {
        "id": f"mock-{_fnv1a64(prompt.encode('utf-8')) % 10**8:08d}",
        "object": "chat.completion",
        "model": payload.get("model", "mock"),
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": finish,
            }
        ],
    }
    return 200, body, 0


def _http_transport(url: str, payload: dict, headers: dict, timeout_s: float):
    start = time.perf_counter()
    response = requests.post(url, json=payload, headers=headers, timeout=timeout_s)
    latency_ms = int((time.perf_counter() - start) * 1000)
    status = response.status_code
    try:
        body = response.json()
    except ValueError as exc:
        raise GeneratorError(
            f"non-JSON response (status {status}) from {url}: {response.text[:200]!r}"
        ) from exc
    return status, body, latency_ms


def _pick_transport(config: BackendConfig, transport: Callable | None) -> Callable:
    if transport is not None:
        return transport
    if config.endpoint_url.startswith("mock:"):
        return _mock_transport
    return _http_transport


# -- generation ----------------------------------------------------------------


def _auth_headers(config: BackendConfig) -> dict:
    import os

    headers = {"Content-Type": "application/json"}
    key = os.environ.get(config.api_key_env, "")
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def generate(
    config: BackendConfig, run: GenerationRun, transport: Callable | None = None
) -> GenerationRun:
    """Send one rendered prompt to the backend and record the outcome.

    Retryable failures (timeouts, connection errors, HTTP 429/5xx) are retried
    up to ``config.retries`` extra times; if all attempts fail the run comes
    back with ``finish_reason="error"`` and empty output rather than raising,
    so batches keep going.  Non-retryable HTTP errors and malformed response
    bodies raise :class:`GeneratorError` with a response excerpt.

    Returns:
        The same run object, with ``output_text``, ``finish_reason``,
        ``latency_ms`` and ``raw_response`` filled in.
    """
    send = _pick_transport(config, transport)
    payload = {
        "model": config.model_name,
        "messages": [{"role": "user", "content": run.prompt}],
        "max_tokens": run.max_tokens,
        "temperature": config.temperature,
    }
    timeout_s = config.timeout_ms / 1000.0
    attempts = config.retries + 1
    last_error: Exception | None = None
    for attempt in range(attempts):
        try:
            status, body, latency_ms = send(
                config.endpoint_url, payload, _auth_headers(config), timeout_s
            )
            if status == 429 or status >= 500:
                raise requests.ConnectionError(f"retryable status {status}")
            if status != 200:
                raise GeneratorError(
                    f"backend returned status {status}: {json.dumps(body)[:200]}"
                )
            try:
                choice = body["choices"][0]
                content = choice["message"]["content"]
                finish = choice.get("finish_reason", "stop")
            except (KeyError, IndexError, TypeError) as exc:
                raise GeneratorError(
                    f"malformed backend response: {json.dumps(body)[:200]}"
                ) from exc
            run.output_text = content
            run.finish_reason = "length" if finish == "length" else "stop"
            run.latency_ms = latency_ms
            run.raw_response = body
            return run
        except (requests.Timeout, requests.ConnectionError) as exc:
            last_error = exc
            logger.warning(
                "generation attempt %d/%d failed for %s: %s",
                attempt + 1,
                attempts,
                run.query_id,
                exc,
            )
            if attempt < attempts - 1:
                time.sleep(min(0.2 * (attempt + 1), 1.0))
    run.output_text = ""
    run.finish_reason = "error"
    run.latency_ms = 0
    run.raw_response = {"error": str(last_error), "attempts": attempts}
    return run


# -- batch orchestration ---------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """One configuration: a backend, a mode (with encoder) and a token budget."""

    config_id: str
    backend: BackendConfig
    mode: str
    encoder: str | None
    max_tokens: int


def config_id_for(backend_model: str, mode: str, encoder: str | None, max_tokens: int) -> str:
    mode_label = mode if encoder is None else f"{mode}:{encoder}"
    return f"{backend_model}|{mode_label}|{max_tokens}"


def enumerate_configs(
    backends: Sequence[BackendConfig],
    modes: Sequence[str],
    budgets: Sequence[int],
    encoders: Sequence[str],
) -> list[RunSpec]:
    """Cross product of backends, modes (rag expanded per encoder) and budgets.

    The order is deterministic: backends outermost, then modes (``rag``
    expanding over encoders in the given order), then budgets.
    """
    for mode in modes:
        if mode not in MODES:
            raise GeneratorError(f"unknown mode {mode!r}")
    if "rag" in modes and not encoders:
        raise GeneratorError("rag mode needs at least one encoder")
    specs: list[RunSpec] = []
    for backend in backends:
        for mode in modes:
            encoder_choices: Sequence[str | None] = encoders if mode == "rag" else [None]
            for encoder in encoder_choices:
                for budget in budgets:
                    specs.append(
                        RunSpec(
                            config_id=config_id_for(
                                backend.model_name, mode, encoder, budget
                            ),
                            backend=backend,
                            mode=mode,
                            encoder=encoder,
                            max_tokens=budget,
                        )
                    )
    return specs


@dataclass
class RetrieverHandle:
    """What rag generation needs per encoder: index, embedder and chunk texts."""

    index: VectorIndex
    embedder: object
    chunk_texts: Mapping[str, str]

    def retrieve(self, question: str, k: int):
        return query_index(self.index, question, k, self.embedder)


@dataclass
class BatchResult:
    """Summary of one batch: written runs plus per-query failures."""

    n_runs: int
    n_skipped: int
    n_errors: int
    failures: list[tuple[str, str]]


def query_id_for(config_id: str, term: str) -> str:
    return hashlib.sha1(f"{config_id}\x1f{term}".encode("utf-8")).hexdigest()[:16]


def run_to_dict(run: GenerationRun) -> dict:
    return {
        "query_id": run.query_id,
        "config_id": run.config_id,
        "term": run.term,
        "mode": run.mode,
        "backend_model": run.backend_model,
        "encoder": run.encoder,
        "max_tokens": run.max_tokens,
        "prompt": run.prompt,
        "context_refs": run.context_refs,
        "truncated": run.truncated,
        "dropped_context": run.dropped_context,
        "output_text": run.output_text,
        "finish_reason": run.finish_reason,
        "latency_ms": run.latency_ms,
        "raw_response": run.raw_response,
    }


def run_from_dict(obj: dict) -> GenerationRun:
    return GenerationRun(
        query_id=obj["query_id"],
        config_id=obj["config_id"],
        term=obj["term"],
        mode=obj["mode"],
        backend_model=obj["backend_model"],
        encoder=obj.get("encoder"),
        max_tokens=obj["max_tokens"],
        prompt=obj.get("prompt", ""),
        context_refs=list(obj.get("context_refs", [])),
        truncated=obj.get("truncated", False),
        dropped_context=obj.get("dropped_context", 0),
        output_text=obj.get("output_text", ""),
        finish_reason=obj.get("finish_reason", "stop"),
        latency_ms=obj.get("latency_ms", 0),
        raw_response=obj.get("raw_response"),
    )


def runs_to_jsonl(runs: Iterable[GenerationRun], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for run in runs:
            fh.write(json.dumps(run_to_dict(run), ensure_ascii=False) + "\n")


def runs_from_jsonl(path: str | Path) -> list[GenerationRun]:
    out: list[GenerationRun] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(run_from_dict(json.loads(line)))
    return out


def _prepare_run(
    spec: RunSpec,
    term: str,
    templates: Mapping[str, PromptTemplate],
    retrieval: Mapping[str, RetrieverHandle],
    retrieval_k: int,
    char_budget: int,
) -> GenerationRun:
    template = templates[spec.mode]
    if spec.mode == "base":
        rendered = render_prompt(template, term, None, char_budget)
        context_refs: list[str] = []
    else:
        handle = retrieval[spec.encoder]
        hits = handle.retrieve(term, retrieval_k)
        context_texts = [handle.chunk_texts[ref] for ref in hits.chunk_refs]
        if not context_texts:
            raise GeneratorError(f"no retrievable context for term {term!r}")
        rendered = render_prompt(template, term, context_texts, char_budget)
        kept = len(context_texts) - rendered.dropped_context
        context_refs = hits.chunk_refs[:kept]
    return GenerationRun(
        query_id=query_id_for(spec.config_id, term),
        config_id=spec.config_id,
        term=term,
        mode=spec.mode,
        backend_model=spec.backend.model_name,
        encoder=spec.encoder,
        max_tokens=spec.max_tokens,
        prompt=rendered.text,
        context_refs=context_refs,
        truncated=rendered.truncated,
        dropped_context=rendered.dropped_context,
    )


def run_batch(
    specs: Sequence[RunSpec],
    terms: Sequence[str],
    templates: Mapping[str, PromptTemplate],
    retrieval: Mapping[str, RetrieverHandle],
    out_path: str | Path,
    retrieval_k: int = 3,
    char_budget: int = 4000,
    workers: int = 2,
    transport: Callable | None = None,
) -> BatchResult:
    """Run every (configuration, term) pair and append results to a JSONL file.

    Runs already present in ``out_path`` (matched by ``query_id``) are skipped,
    so an interrupted batch resumes where it stopped.  Generation requests run
    on a small thread pool, but results are written by a single writer in
    enumeration order (configurations outermost, then terms), so the finished
    file is deterministic for a deterministic backend.

    Per-query failures (retrieval or prompt errors, non-retryable backend
    errors) are recorded and skipped; unreachable-backend runs are written
    with ``finish_reason="error"``.

    Returns:
        A :class:`BatchResult` with counts and failure reasons.
    """
    out_path = Path(out_path)
    done: set[str] = set()
    if out_path.exists():
        for existing in runs_from_jsonl(out_path):
            done.add(existing.query_id)

    pending: list[tuple[RunSpec, str]] = []
    n_skipped = 0
    for spec in specs:
        for term in terms:
            if query_id_for(spec.config_id, term) in done:
                n_skipped += 1
            else:
                pending.append((spec, term))

    failures: list[tuple[str, str]] = []
    n_written = 0
    n_errors = 0

    def execute(spec: RunSpec, term: str) -> GenerationRun:
        run = _prepare_run(spec, term, templates, retrieval, retrieval_k, char_budget)
        return generate(spec.backend, run, transport=transport)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            (spec, term, pool.submit(execute, spec, term)) for spec, term in pending
        ]
        with open(out_path, "a", encoding="utf-8") as fh:
            for spec, term, future in futures:
                try:
                    run = future.result()
                except Exception as exc:  # noqa: BLE001 - recorded, batch continues
                    query_id = query_id_for(spec.config_id, term)
                    logger.warning("run %s failed: %s", query_id, exc)
                    failures.append((query_id, str(exc)))
                    continue
                if run.finish_reason == "error":
                    n_errors += 1
                fh.write(json.dumps(run_to_dict(run), ensure_ascii=False) + "\n")
                fh.flush()
                n_written += 1

    return BatchResult(
        n_runs=n_written, n_skipped=n_skipped, n_errors=n_errors, failures=failures
    )

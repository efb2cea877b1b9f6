"""Token generators standing in for the shared-weights language model.

Three interchangeable backends sit behind one streaming contract:

* ``ScriptedFormulation`` / ``ScriptedArticulation`` replay a scenario file.
  The articulation script is keyed by how many think and response segments
  were visible when the step ran, so a wrong prompt surfaces immediately as a
  key or prefix mismatch instead of silently producing plausible tokens.
* ``MockGenerator`` derives every token from a hash of (seed, prompt), making
  it a pure function suitable for property tests.
* ``RemoteGenerator`` adapts a server-sent-events streaming chat-completion
  endpoint. Real endpoints emit text only, so audio tokens are synthesized
  positionally to keep the text/audio interleave ratio intact.

Scripted and mock generation is referentially transparent in
(spec, prompt, stop): calling twice yields identical streams, and truncating
the budget yields a prefix of the untruncated stream.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass

import httpx

from .core import (
    END_OF_RESPONSE,
    END_OF_RESPONSE_ID,
    FIRST_CONTENT_ID,
    THINK_CLOSE,
    SegmentationPolicy,
    Token,
    TokenKind,
    audio_token,
    text_token,
)
from .errors import BackendError, ContractViolation, ScenarioError
from .scenario import Scenario


class CompletionReason(enum.Enum):
    STOP_TOKEN = "stop_token"
    BUDGET = "budget"
    BACKEND_ERROR = "backend_error"


@dataclass(frozen=True)
class StopCondition:
    max_tokens: int
    stop_kinds: frozenset[TokenKind]

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ContractViolation("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationResult:
    tokens: tuple[Token, ...]
    reason: CompletionReason
    error: BackendError | None = None


class GenerationStream:
    """Incremental token stream; ``reason`` is available once exhausted.

    A ``BackendError`` raised mid-generation ends the stream with reason
    ``BACKEND_ERROR`` and the error attached rather than propagating, so the
    scheduler can abort a turn cleanly with a partial transcript.
    """

    def __init__(self, gen):
        self._gen = gen
        self.reason: CompletionReason | None = None
        self.error: BackendError | None = None

    def __iter__(self):
        return self

    def __next__(self) -> Token:
        if self.reason is not None:
            raise StopIteration
        try:
            return next(self._gen)
        except StopIteration as stop:
            self.reason = stop.value or CompletionReason.BUDGET
            raise StopIteration from None
        except BackendError as exc:
            self.reason = CompletionReason.BACKEND_ERROR
            self.error = exc
            raise StopIteration from None

    def collect(self) -> GenerationResult:
        tokens = tuple(self)
        assert self.reason is not None
        return GenerationResult(tokens=tokens, reason=self.reason, error=self.error)


def _emit(script, stop: StopCondition):
    """Serve tokens from an iterable under a stop condition.

    The stop token is included in the stream. Runs that consume the entire
    iterable without hitting the budget or a stop kind fall through and the
    caller decides what exhaustion means.
    """
    emitted = 0
    for tok in script:
        yield tok
        emitted += 1
        if tok.kind in stop.stop_kinds:
            return CompletionReason.STOP_TOKEN
        if emitted >= stop.max_tokens:
            return CompletionReason.BUDGET
    return None


def parse_formulation_prompt(prompt) -> tuple[tuple[Token, ...], tuple[Token, ...]]:
    """Split a formulation prompt into (input tokens, prior think tokens)."""
    prompt = tuple(prompt)
    opens = [i for i, t in enumerate(prompt) if t.kind is TokenKind.THINK_OPEN]
    if len(opens) != 1:
        raise ContractViolation("formulation prompt needs exactly one think-open")
    if any(t.kind is TokenKind.THINK_CLOSE for t in prompt):
        raise ContractViolation("formulation prompt must not contain think-close")
    at = opens[0]
    return prompt[:at], prompt[at + 1 :]


def parse_articulation_prompt(
    prompt,
) -> tuple[tuple[Token, ...], tuple[Token, ...], tuple[Token, ...]]:
    """Split an articulation prompt into (input, think, response) tokens."""
    prompt = tuple(prompt)
    opens = [i for i, t in enumerate(prompt) if t.kind is TokenKind.THINK_OPEN]
    closes = [i for i, t in enumerate(prompt) if t.kind is TokenKind.THINK_CLOSE]
    if len(opens) != 1 or len(closes) != 1 or closes[0] < opens[0]:
        raise ContractViolation(
            "articulation prompt needs exactly one think-open/think-close pair"
        )
    return prompt[: opens[0]], prompt[opens[0] + 1 : closes[0]], prompt[closes[0] + 1 :]


def _check_input(inp, scenario: Scenario, who: str) -> None:
    expected = scenario.input.all_tokens()
    if tuple(inp) != expected:
        raise BackendError(
            f"{who}: prompt input does not match scenario {scenario.name!r}"
        )


def _check_think_prefix(think, scenario: Scenario, who: str) -> int:
    ids = tuple(t.id for t in think)
    if ids != scenario.cot_ids[: len(ids)]:
        raise BackendError(
            f"{who}: prompt think content is not a prefix of the scenario script"
        )
    return len(ids)


class ScriptedFormulation:
    """Replays the scenario's chain-of-thought, then the close tag."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario

    def stream(self, prompt, stop: StopCondition) -> GenerationStream:
        return GenerationStream(self._generate(tuple(prompt), stop))

    def _generate(self, prompt, stop):
        inp, prior = parse_formulation_prompt(prompt)
        _check_input(inp, self.scenario, "scripted formulation")
        pos = _check_think_prefix(prior, self.scenario, "scripted formulation")
        script = [text_token(i) for i in self.scenario.cot_ids[pos:]]
        script.append(THINK_CLOSE)
        reason = yield from _emit(script, stop)
        if reason is None:
            raise BackendError("scripted formulation: script exhausted")
        return reason


class ScriptedArticulation:
    """Serves the response continuation for the visible (think, response) state.

    ``think_unit`` / ``response_unit`` are the segment sizes the scheduler
    hands off with; they turn prompt token counts into segment counts for
    continuation keying. Explicit continuations are strict (a missing key is
    fatal); otherwise the canonical response stream is sliced on demand and
    the end-of-response marker is appended when it runs out.
    """

    def __init__(
        self,
        scenario: Scenario,
        think_unit: int,
        response_unit: int,
        pattern: SegmentationPolicy | None = None,
    ):
        if think_unit < 1 or response_unit < 1:
            raise ContractViolation("segment units must be positive")
        self.scenario = scenario
        self.think_unit = think_unit
        self.response_unit = response_unit
        self.pattern = pattern or SegmentationPolicy()

    def stream(self, prompt, stop: StopCondition) -> GenerationStream:
        return GenerationStream(self._generate(tuple(prompt), stop))

    def _visible_counts(self, think, response) -> tuple[int, int]:
        t = _check_think_prefix(think, self.scenario, "scripted articulation")
        if t not in (len(self.scenario.cot_ids),) and t % self.think_unit != 0:
            raise BackendError(
                "scripted articulation: think context ends mid-segment "
                f"({t} tokens, unit {self.think_unit})"
            )
        r = len(response)
        if r % self.response_unit != 0:
            raise BackendError(
                "scripted articulation: response history is not whole segments "
                f"({r} tokens, unit {self.response_unit})"
            )
        k = -(-t // self.think_unit)  # ceil
        return k, r // self.response_unit

    def _generate(self, prompt, stop):
        inp, think, response = parse_articulation_prompt(prompt)
        _check_input(inp, self.scenario, "scripted articulation")
        k, m = self._visible_counts(think, response)
        r = len(response)

        if self.scenario.continuations is not None:
            try:
                ids = self.scenario.continuations[(k, m)]
            except KeyError:
                raise ScenarioError(
                    f"scenario {self.scenario.name!r} has no continuation for "
                    f"key ({k},{m})"
                ) from None
            script = self._materialize(ids, r)
            reason = yield from _emit(script, stop)
            if reason is None:
                raise BackendError(
                    f"scripted articulation: continuation ({k},{m}) exhausted"
                )
            return reason

        canonical = self.scenario.response_ids
        assert canonical is not None
        if tuple(t.id for t in response) != canonical[:r]:
            raise BackendError(
                "scripted articulation: response history is not a prefix of "
                "the scenario response stream"
            )
        remaining = list(canonical[r:]) + [END_OF_RESPONSE_ID]
        script = self._materialize(tuple(remaining), r)
        reason = yield from _emit(script, stop)
        if reason is None:
            raise BackendError("scripted articulation: response stream exhausted")
        return reason

    def _materialize(self, ids, stream_offset: int) -> list[Token]:
        """Assign text/audio kinds by global response-stream position."""
        out: list[Token] = []
        pos = stream_offset
        for token_id in ids:
            if token_id == END_OF_RESPONSE_ID:
                out.append(END_OF_RESPONSE)
                continue
            kind = self.pattern.response_kind_at(pos)
            out.append(Token(token_id, kind))
            pos += 1
        return out


def _hash_int(*parts) -> int:
    joined = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(joined.encode()).digest()[:8], "big")


class MockGenerator:
    """Pure pseudo-random generator: a function of (seed, prompt, stop).

    The virtual chain of thought and response stream are fully determined by
    the seed and the prompt's input tokens, so stepwise calls with growing
    prefixes continue one consistent stream.
    """

    def __init__(
        self,
        seed: int,
        policy: SegmentationPolicy,
        *,
        cot_range: tuple[int, int] = (40, 360),
        response_range: tuple[int, int] = (60, 700),
    ):
        self.seed = seed
        self.policy = policy
        self.cot_range = cot_range
        self.response_range = response_range

    def stream(self, prompt, stop: StopCondition) -> GenerationStream:
        return GenerationStream(self._generate(tuple(prompt), stop))

    def _generate(self, prompt, stop):
        if TokenKind.THINK_CLOSE in stop.stop_kinds:
            return (yield from self._think(prompt, stop))
        return (yield from self._respond(prompt, stop))

    def _content_id(self, label: str, position: int) -> int:
        return FIRST_CONTENT_ID + _hash_int(self.seed, label, position) % 50000

    def _length(self, label: str, input_sig: int, bounds: tuple[int, int]) -> int:
        low, high = bounds
        return low + _hash_int(self.seed, label, input_sig) % (high - low + 1)

    def _think(self, prompt, stop):
        inp, prior = parse_formulation_prompt(prompt)
        sig = _hash_int(*(t.id for t in inp))
        total = self._length("cot_len", sig, self.cot_range)
        script = [
            text_token(self._content_id(f"cot:{sig}", j))
            for j in range(len(prior), total)
        ]
        script.append(THINK_CLOSE)
        reason = yield from _emit(script, stop)
        assert reason is not None  # script always ends with the close tag
        return reason

    def _respond(self, prompt, stop):
        inp, _think, response = parse_articulation_prompt(prompt)
        sig = _hash_int(*(t.id for t in inp))
        total = self._length("res_len", sig, self.response_range)
        script: list[Token] = []
        for pos in range(len(response), total):
            script.append(
                Token(self._content_id(f"res:{sig}", pos), self.policy.response_kind_at(pos))
            )
        script.append(END_OF_RESPONSE)
        reason = yield from _emit(script, stop)
        assert reason is not None
        return reason


def default_text_shim(chunk: str) -> list[int]:
    """Fallback tokenizer: one content id per whitespace-separated piece."""
    return [FIRST_CONTENT_ID + _hash_int("shim", piece) % 50000 for piece in chunk.split()]


def default_prompt_renderer(prompt) -> str:
    """Render a token prompt as plain text for a remote chat endpoint."""
    pieces = []
    for tok in prompt:
        if tok.kind is TokenKind.THINK_OPEN:
            pieces.append("<think>")
        elif tok.kind is TokenKind.THINK_CLOSE:
            pieces.append("</think>")
        elif tok.kind is TokenKind.END_OF_RESPONSE:
            pieces.append("<eor>")
        elif tok.kind is TokenKind.AUDIO:
            pieces.append(f"a{tok.id}")
        else:
            pieces.append(f"t{tok.id}")
    return " ".join(pieces)


_RETRIABLE_STATUS = {408, 429, 500, 502, 503, 504}


class RemoteGenerator:
    """Streaming chat-completion client over HTTP server-sent events.

    Text deltas are mapped to text tokens through a pluggable shim; in
    response mode, audio tokens are synthesized between them so the output
    satisfies the configured text/audio chunk layout. One generator instance
    serializes its connection use (no concurrent streams per instance).
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        policy: SegmentationPolicy,
        *,
        auth_env: str = "THINKPACE_API_TOKEN",
        tokenizer=default_text_shim,
        renderer=default_prompt_renderer,
        client: httpx.Client | None = None,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.policy = policy
        self.auth_env = auth_env
        self.tokenizer = tokenizer
        self.renderer = renderer
        self._client = client or httpx.Client(timeout=timeout)

    def stream(self, prompt, stop: StopCondition) -> GenerationStream:
        return GenerationStream(self._generate(tuple(prompt), stop))

    def _headers(self) -> dict:
        headers = {"Accept": "text/event-stream"}
        token = os.environ.get(self.auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _text_deltas(self, prompt, max_tokens: int):
        payload = {
            "model": self.model,
            "stream": True,
            "max_tokens": max_tokens,
            "messages": [{"role": "user", "content": self.renderer(prompt)}],
        }
        try:
            with self._client.stream(
                "POST", self.endpoint, json=payload, headers=self._headers()
            ) as response:
                if response.status_code != 200:
                    retriable = response.status_code in _RETRIABLE_STATUS
                    raise BackendError(
                        f"remote backend HTTP {response.status_code}",
                        retriable=retriable,
                    )
                for line in response.iter_lines():
                    if not line.startswith("data:"):
                        continue
                    data = line[len("data:") :].strip()
                    if data == "[DONE]":
                        return
                    try:
                        delta = json.loads(data)
                    except json.JSONDecodeError as exc:
                        raise BackendError(f"bad SSE payload: {exc}") from exc
                    for choice in delta.get("choices", []):
                        text = choice.get("delta", {}).get("content")
                        if text:
                            yield text
        except httpx.TransportError as exc:
            raise BackendError(f"remote transport failure: {exc}", retriable=True) from exc

    def _generate(self, prompt, stop):
        think_mode = TokenKind.THINK_CLOSE in stop.stop_kinds
        if think_mode:
            _inp, prior = parse_formulation_prompt(prompt)
            stream_pos = len(prior)
        else:
            _inp, _think, response = parse_articulation_prompt(prompt)
            stream_pos = len(response)

        def script():
            pos = stream_pos
            for chunk in self._text_deltas(prompt, stop.max_tokens):
                for text_id in self.tokenizer(chunk):
                    if think_mode:
                        yield text_token(text_id)
                        continue
                    # Fill audio positions until the pattern reaches a text slot.
                    while self.policy.response_kind_at(pos) is not TokenKind.TEXT:
                        yield audio_token(
                            FIRST_CONTENT_ID + _hash_int("audio", pos, text_id) % 50000
                        )
                        pos += 1
                    yield Token(text_id, TokenKind.TEXT)
                    pos += 1
            yield THINK_CLOSE if think_mode else END_OF_RESPONSE

        reason = yield from _emit(script(), stop)
        assert reason is not None
        return reason


class BackendKind(enum.Enum):
    SCRIPTED = "scripted"
    MOCK = "mock"
    REMOTE = "remote"


@dataclass(frozen=True)
class GeneratorSpec:
    """Declarative backend selection resolved per brain by the scheduler."""

    kind: BackendKind
    seed: int = 0
    scenario: Scenario | None = None
    endpoint: str = ""
    model: str = ""
    auth_env: str = "THINKPACE_API_TOKEN"
    mock_cot_range: tuple[int, int] = (40, 360)
    mock_response_range: tuple[int, int] = (60, 700)


def scripted_backend_from_scenario(scenario: Scenario) -> tuple[GeneratorSpec, GeneratorSpec]:
    """Formulation and articulation specs replaying one scenario."""
    spec = GeneratorSpec(kind=BackendKind.SCRIPTED, scenario=scenario)
    return spec, spec


def resolve_generator(
    spec: GeneratorSpec,
    role: str,
    policy: SegmentationPolicy,
    *,
    think_unit: int | None = None,
    response_unit: int | None = None,
):
    """Instantiate the runtime generator for one brain.

    ``role`` is "formulation" or "articulation". Segment units default to the
    policy's sizes; the interleaved baseline passes its own chunk sizes.
    """
    if spec.kind is BackendKind.SCRIPTED:
        if spec.scenario is None:
            raise ScenarioError("scripted backend requires a scenario")
        if role == "formulation":
            return ScriptedFormulation(spec.scenario)
        return ScriptedArticulation(
            spec.scenario,
            think_unit or policy.think_segment_tokens,
            response_unit or policy.response_segment_tokens,
            pattern=policy,
        )
    if spec.kind is BackendKind.MOCK:
        return MockGenerator(
            spec.seed,
            policy,
            cot_range=spec.mock_cot_range,
            response_range=spec.mock_response_range,
        )
    if spec.kind is BackendKind.REMOTE:
        if not spec.endpoint or not spec.model:
            raise BackendError("remote backend needs an endpoint and model name")
        return RemoteGenerator(spec.endpoint, spec.model, policy, auth_env=spec.auth_env)
    raise BackendError(f"unknown backend kind {spec.kind!r}")

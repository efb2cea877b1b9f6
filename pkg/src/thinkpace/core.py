"""Core domain types: tokens, segments, policies, rates, and transcripts.

Everything here is an immutable value object; instances can be shared freely
between concurrent execution contexts without synchronization.

Conventions used throughout the package:

* Token ids 0, 1, 2 are reserved for the structural control tokens
  (think-open, think-close, end-of-response). Content tokens (text/audio)
  must use ids >= FIRST_CONTENT_ID.
* Structural tokens never appear inside ``Segment.tokens``; they carry no
  virtual generation time and are excluded from all token budgets. Budgets
  count generated content tokens only.
* A "chunk" of response output is ``text_per_chunk`` text tokens followed by
  ``audio_per_chunk`` audio tokens (the default 1+4 layout means a 100-token
  response segment holds exactly 20 text and 80 audio tokens).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .errors import ContractViolation

THINK_OPEN_ID = 0
THINK_CLOSE_ID = 1
END_OF_RESPONSE_ID = 2
FIRST_CONTENT_ID = 3


class TokenKind(enum.Enum):
    TEXT = "text"
    AUDIO = "audio"
    THINK_OPEN = "think_open"
    THINK_CLOSE = "think_close"
    END_OF_RESPONSE = "end_of_response"


CONTROL_KINDS = frozenset(
    {TokenKind.THINK_OPEN, TokenKind.THINK_CLOSE, TokenKind.END_OF_RESPONSE}
)

_RESERVED_IDS = {
    TokenKind.THINK_OPEN: THINK_OPEN_ID,
    TokenKind.THINK_CLOSE: THINK_CLOSE_ID,
    TokenKind.END_OF_RESPONSE: END_OF_RESPONSE_ID,
}


@dataclass(frozen=True)
class Token:
    """One unit of model input/output: a content token or a control marker."""

    id: int
    kind: TokenKind

    def __post_init__(self):
        if self.id < 0:
            raise ContractViolation(f"token id must be non-negative, got {self.id}")
        if self.kind in CONTROL_KINDS:
            expected = _RESERVED_IDS[self.kind]
            if self.id != expected:
                raise ContractViolation(
                    f"control token {self.kind.value} must use reserved id {expected}"
                )
        elif self.id < FIRST_CONTENT_ID:
            raise ContractViolation(
                f"content token id {self.id} collides with reserved control ids"
            )

    @property
    def is_control(self) -> bool:
        return self.kind in CONTROL_KINDS


THINK_OPEN = Token(THINK_OPEN_ID, TokenKind.THINK_OPEN)
THINK_CLOSE = Token(THINK_CLOSE_ID, TokenKind.THINK_CLOSE)
END_OF_RESPONSE = Token(END_OF_RESPONSE_ID, TokenKind.END_OF_RESPONSE)


def text_token(token_id: int) -> Token:
    return Token(token_id, TokenKind.TEXT)


def audio_token(token_id: int) -> Token:
    return Token(token_id, TokenKind.AUDIO)


@dataclass(frozen=True)
class TurnInput:
    """User input for one turn: speech tokens plus optional text tokens."""

    speech_tokens: tuple[Token, ...]
    text_tokens: tuple[Token, ...] = ()

    def __post_init__(self):
        if not self.speech_tokens:
            raise ContractViolation("turn input requires at least one speech token")
        for tok in self.speech_tokens:
            if tok.kind is not TokenKind.AUDIO:
                raise ContractViolation("speech tokens must be audio kind")
        for tok in self.text_tokens:
            if tok.kind is not TokenKind.TEXT:
                raise ContractViolation("input text tokens must be text kind")

    def all_tokens(self) -> tuple[Token, ...]:
        return self.speech_tokens + self.text_tokens


class SegmentKind(enum.Enum):
    THINK = "think"
    RESPONSE = "response"


@dataclass(frozen=True)
class Segment:
    """A contiguous slice of think or response content with 1-based index.

    Structural tokens are never stored in ``tokens``. ``start_time`` and
    ``end_time`` are virtual seconds; segments produced by pure segmentation
    (outside the scheduler) carry zeroed times.
    """

    kind: SegmentKind
    index: int
    tokens: tuple[Token, ...]
    start_time: float = 0.0
    end_time: float = 0.0

    def __post_init__(self):
        if self.index < 1:
            raise ContractViolation("segment index is 1-based")
        if self.start_time > self.end_time:
            raise ContractViolation("segment start_time must be <= end_time")
        for tok in self.tokens:
            if tok.is_control:
                raise ContractViolation("segments carry content tokens only")
            if self.kind is SegmentKind.THINK and tok.kind is TokenKind.AUDIO:
                raise ContractViolation("think segments cannot contain audio tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def with_times(self, start: float, end: float) -> "Segment":
        return replace(self, start_time=start, end_time=end)

    def audio_count(self) -> int:
        return sum(1 for t in self.tokens if t.kind is TokenKind.AUDIO)

    def text_count(self) -> int:
        return sum(1 for t in self.tokens if t.kind is TokenKind.TEXT)


@dataclass(frozen=True)
class SegmentationPolicy:
    """Segment sizes, text/audio interleave ratio, and generation caps."""

    think_segment_tokens: int = 80
    response_segment_tokens: int = 100
    text_per_chunk: int = 1
    audio_per_chunk: int = 4
    max_think_tokens: int = 4096
    max_response_tokens: int = 4096

    def __post_init__(self):
        if self.think_segment_tokens < 1:
            raise ContractViolation("think_segment_tokens must be positive")
        if self.response_segment_tokens < 1:
            raise ContractViolation("response_segment_tokens must be positive")
        if self.text_per_chunk < 1:
            raise ContractViolation("text_per_chunk must be positive")
        if self.audio_per_chunk < 0:
            raise ContractViolation("audio_per_chunk must be non-negative")
        if self.response_segment_tokens % self.chunk_size != 0:
            raise ContractViolation(
                "response_segment_tokens must be a multiple of the chunk size "
                f"({self.chunk_size})"
            )
        if self.max_think_tokens < 1 or self.max_response_tokens < 1:
            raise ContractViolation("token caps must be positive")

    @property
    def chunk_size(self) -> int:
        return self.text_per_chunk + self.audio_per_chunk

    def response_kind_at(self, stream_position: int) -> TokenKind:
        """Token kind at a 0-based position of the response stream."""
        if stream_position % self.chunk_size < self.text_per_chunk:
            return TokenKind.TEXT
        return TokenKind.AUDIO


@dataclass(frozen=True)
class RateModel:
    """Generation speeds and playback timing.

    Rates are tokens per virtual second; ``audio_token_seconds`` is the
    playback duration of one audio token. ``tts_buffer_tokens`` is the number
    of response tokens the streaming synthesizer buffers beyond the first
    playable token before audio output begins.
    """

    formulation_rate: float = 50.0
    articulation_rate: float = 50.0
    audio_token_seconds: float = 0.040
    tts_buffer_tokens: int = 0

    def __post_init__(self):
        for name in ("formulation_rate", "articulation_rate", "audio_token_seconds"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise ContractViolation(f"{name} must be finite and positive")
        if self.tts_buffer_tokens < 0:
            raise ContractViolation("tts_buffer_tokens must be non-negative")


class Brain(enum.Enum):
    FORMULATION = "formulation"
    ARTICULATION = "articulation"


class EventType(enum.Enum):
    GEN_START = "gen_start"
    GEN_END = "gen_end"
    SEGMENT_HANDOFF = "segment_handoff"
    PLAYBACK_START = "playback_start"
    PLAYBACK_END = "playback_end"
    STALL = "stall"
    TURN_END = "turn_end"


# Tie-break lanes for events sharing a timestamp: formulation before
# articulation before playback, turn end last.
_EVENT_LANE = {
    Brain.FORMULATION: 0,
    Brain.ARTICULATION: 1,
    None: 2,
}


@dataclass(frozen=True)
class Event:
    """One timestamped entry of a turn transcript.

    ``brain`` is set for generation events, ``segment_index`` for generation,
    handoff, and playback events, and ``duration`` for stalls.
    """

    time: float
    type: EventType
    brain: Brain | None = None
    segment_kind: SegmentKind | None = None
    segment_index: int | None = None
    duration: float | None = None
    note: str | None = None

    def lane(self) -> int:
        if self.type is EventType.TURN_END:
            return 3
        return _EVENT_LANE[self.brain]


@dataclass(frozen=True)
class Transcript:
    """Append-only record of one simulated turn.

    Events are sorted by ``(time, lane, insertion order)``; think and
    response segments concatenate exactly to ``final_think`` /
    ``final_response`` (conservation).
    """

    turn_id: str
    scenario_id: str
    strategy: str
    events: tuple[Event, ...]
    think_segments: tuple[Segment, ...]
    response_segments: tuple[Segment, ...]
    aborted: bool = False
    notes: tuple[str, ...] = ()

    @property
    def final_think(self) -> tuple[Token, ...]:
        out: list[Token] = []
        for seg in self.think_segments:
            out.extend(seg.tokens)
        return tuple(out)

    @property
    def final_response(self) -> tuple[Token, ...]:
        out: list[Token] = []
        for seg in self.response_segments:
            out.extend(seg.tokens)
        return tuple(out)

    @property
    def end_time(self) -> float:
        return self.events[-1].time if self.events else 0.0


def segment_stream(
    tokens, size: int, kind: SegmentKind = SegmentKind.THINK
) -> tuple[Segment, ...]:
    """Split a token sequence into contiguous fixed-size segments.

    Every segment has exactly ``size`` tokens except the last, which holds the
    remainder (1..size). The concatenation of the output reproduces the input
    exactly; empty input yields an empty tuple.
    """
    if size < 1:
        raise ContractViolation("segment size must be >= 1")
    tokens = tuple(tokens)
    segments = []
    for offset in range(0, len(tokens), size):
        segments.append(
            Segment(kind=kind, index=len(segments) + 1, tokens=tokens[offset : offset + size])
        )
    return tuple(segments)


def ta_interleave_counts(segment_tokens: int, policy: SegmentationPolicy) -> tuple[int, int]:
    """Return (text_count, audio_count) for a full response segment.

    The segment length must be a multiple of the chunk size; anything else
    indicates a malformed response segment.
    """
    chunk = policy.chunk_size
    if segment_tokens < 1 or segment_tokens % chunk != 0:
        raise ContractViolation(
            f"response segment of {segment_tokens} tokens is not a whole number "
            f"of {chunk}-token chunks"
        )
    chunks = segment_tokens // chunk
    return chunks * policy.text_per_chunk, chunks * policy.audio_per_chunk

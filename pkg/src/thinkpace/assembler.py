"""Prompt assembly for the two brains.

The articulation prompt always carries a complete think block — the close tag
is present even while reasoning is still in flight — followed by the response
history. Because each new think segment is inserted *before* the response
history, consecutive articulation prompts are not suffix-extensions of each
other; prefix-cache reuse across steps is deliberately unsupported and every
prompt is rebuilt from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import THINK_CLOSE, THINK_OPEN, Segment, SegmentKind, Token, TokenKind, TurnInput
from .errors import ContractViolation


@dataclass(frozen=True)
class StepContext:
    """Everything one articulation step is conditioned on."""

    input: TurnInput
    think_segments: tuple[Segment, ...]
    response_segments: tuple[Segment, ...]
    think_closed: bool = False

    def __post_init__(self):
        for seq, kind in (
            (self.think_segments, SegmentKind.THINK),
            (self.response_segments, SegmentKind.RESPONSE),
        ):
            for pos, seg in enumerate(seq, start=1):
                if seg.kind is not kind:
                    raise ContractViolation(f"segment {seg.index} has wrong kind")
                if seg.index != pos:
                    raise ContractViolation(
                        f"{kind.value} segment indices must be contiguous from 1"
                    )

    @property
    def visible_counts(self) -> tuple[int, int]:
        """(think segments visible, response segments visible)."""
        return len(self.think_segments), len(self.response_segments)


def build_formulation_prompt(turn_input: TurnInput, prior_think) -> tuple[Token, ...]:
    """Prompt that resumes chain-of-thought generation after ``prior_think``."""
    prior = tuple(prior_think)
    for tok in prior:
        if tok.kind is TokenKind.THINK_CLOSE:
            raise ContractViolation("prior think must not contain the close tag")
    return turn_input.all_tokens() + (THINK_OPEN,) + prior


def build_articulation_prompt(ctx: StepContext) -> tuple[Token, ...]:
    """Prompt for one response step.

    Layout: input tokens, think-open, every think segment in index order,
    think-close, every response segment in index order. The close tag is
    emitted even when the chain of thought is still incomplete.
    """
    parts: list[Token] = list(ctx.input.all_tokens())
    parts.append(THINK_OPEN)
    for seg in ctx.think_segments:
        parts.extend(seg.tokens)
    parts.append(THINK_CLOSE)
    for seg in ctx.response_segments:
        parts.extend(seg.tokens)
    return tuple(parts)

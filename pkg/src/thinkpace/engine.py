"""Deterministic virtual-time scheduler interleaving the two brains.

Generation of k content tokens by a brain occupies k / rate virtual seconds;
structural markers (think tags, end-of-response) take no time. The engine is
a single-threaded event loop over a priority queue keyed by
``(time, lane, insertion sequence)`` where the lanes order simultaneous
events: formulation before articulation before playback. Concurrency between
the brains is modeled, never executed, so transcripts are byte-identical
across repeated runs with the same configuration.

Scheduling contracts per strategy:

* tbs        — the response starts only after the whole chain of thought.
* thkfirst   — response step n waits for think segments 1..n.
* spkfirst   — response step n waits for think segments 1..n-1; step 1
               starts immediately with an empty think block.
* interleaved — a single brain (articulation backend and rate) alternates
               fixed-size think and response chunks.
* direct     — no thinking at all; one free-running response step.

Once the chain of thought closes, articulation runs one final budget-capped
step to the end-of-response marker. Playback is gapless FIFO: a response
segment starts playing at max(its availability, previous playback end), where
availability means one playable token plus the TTS buffer have been emitted.

A stall is recorded when the articulation worker had to wait for a think
handoff and the playback pipeline ran dry during the wait — the audible gap
of the pacing-constraint failure mode. Gaps caused purely by a slow
articulation rate are not stalls.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass

from .assembler import StepContext, build_articulation_prompt, build_formulation_prompt
from .backends import (
    BackendKind,
    CompletionReason,
    GenerationResult,
    GeneratorSpec,
    StopCondition,
    resolve_generator,
)
from .core import (
    Brain,
    Event,
    EventType,
    RateModel,
    Segment,
    SegmentKind,
    SegmentationPolicy,
    TokenKind,
    Transcript,
    TurnInput,
)
from .errors import ContractViolation, InvariantError

_LANE_FORM = 0
_LANE_ART = 1
_LANE_PLAY = 2


class StrategyKind(enum.Enum):
    TBS = "tbs"
    THINK_FIRST = "thkfirst"
    SPEAK_FIRST = "spkfirst"
    INTERLEAVED = "interleaved"
    DIRECT = "direct"


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    chunk_think: int = 8
    chunk_response: int = 20

    def __post_init__(self):
        if self.chunk_think < 1 or self.chunk_response < 1:
            raise ContractViolation("interleave chunk sizes must be >= 1")

    @property
    def name(self) -> str:
        return self.kind.value

    @staticmethod
    def parse(name: str) -> "Strategy":
        try:
            return Strategy(StrategyKind(name))
        except ValueError:
            raise ContractViolation(f"unknown strategy {name!r}") from None


STRATEGY_ORDER = (
    StrategyKind.TBS,
    StrategyKind.THINK_FIRST,
    StrategyKind.SPEAK_FIRST,
    StrategyKind.INTERLEAVED,
    StrategyKind.DIRECT,
)

# Internal queue actions.
_FORM_START = "form_start"
_FORM_END = "form_end"
_ART_CHECK = "art_check"
_ART_END = "art_end"
_INT_THINK = "int_think"
_INT_RESPONSE = "int_response"
_PLAY_EVENT = "play_event"
_TURN_END = "turn_end"


class EngineState:
    """Mutable working state of one simulated turn.

    The engine is the sole mutator; everything it publishes (the final
    ``Transcript``) is immutable. ``advance`` pops and applies exactly one
    pending action and never moves the clock backward.
    """

    def __init__(
        self,
        strategy: Strategy,
        turn_input: TurnInput,
        policy: SegmentationPolicy,
        rates: RateModel,
        formulation_gen,
        articulation_gen,
        *,
        observer=None,
    ):
        self.strategy = strategy
        self.input = turn_input
        self.policy = policy
        self.rates = rates
        self.form_gen = formulation_gen
        self.art_gen = articulation_gen
        self.observer = observer

        self.clock = 0.0
        self._queue: list = []
        self._seq = itertools.count()

        self.events: list[Event] = []
        self.stalls: list[Event] = []
        self.notes: list[str] = []
        self.think_segments: list[Segment] = []
        self.response_segments: list[Segment] = []

        self.think_emitted = 0
        self.response_emitted = 0
        self.segments_handed = 0
        self.total_think_segments: int | None = None  # fixed once the CoT closes
        self.think_closed = False
        self.art_busy = False
        self.art_waiting_since: float | None = None
        self.response_done = False
        self.playback_horizon: float | None = None
        self.aborted = False
        self.turn_ended = False

        interleaved = strategy.kind is StrategyKind.INTERLEAVED
        self.think_unit = strategy.chunk_think if interleaved else policy.think_segment_tokens
        self.response_unit = (
            strategy.chunk_response if interleaved else policy.response_segment_tokens
        )

        if strategy.kind is StrategyKind.DIRECT:
            self._close_think()
        elif interleaved:
            self._push(0.0, _LANE_ART, _INT_THINK, None)
        else:
            self._push(0.0, _LANE_FORM, _FORM_START, None)
        if not interleaved:
            self._push(0.0, _LANE_ART, _ART_CHECK, None)

    # ------------------------------------------------------------------ #
    # Queue plumbing
    # ------------------------------------------------------------------ #

    def _push(self, time: float, lane: int, action: str, payload) -> None:
        heapq.heappush(self._queue, (time, lane, next(self._seq), action, payload))

    def _record(self, event: Event) -> None:
        self.events.append(event)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def advance(self) -> list[Event]:
        """Pop and apply the minimum (time, lane, sequence) action.

        Returns the transcript events this step produced. Formulation actions
        win ties against articulation, which wins against playback.
        """
        if not self._queue:
            raise InvariantError("advance() on an empty queue before turn end")
        time, lane, _seq, action, payload = heapq.heappop(self._queue)
        if time < self.clock:
            raise InvariantError("virtual clock moved backward")
        self.clock = time
        before = len(self.events)
        if action == _FORM_START:
            self._do_form_start(time)
        elif action == _FORM_END:
            self._do_form_end(time, payload)
        elif action == _ART_CHECK:
            self._do_art_check(time)
        elif action == _ART_END:
            self._do_art_end(time, payload)
        elif action == _INT_THINK:
            self._do_interleaved_think(time)
        elif action == _INT_RESPONSE:
            self._do_interleaved_response(time)
        elif action == _PLAY_EVENT:
            self._record(payload)
        elif action == _TURN_END:
            self._record(Event(time=time, type=EventType.TURN_END))
            self.turn_ended = True
        else:  # pragma: no cover
            raise InvariantError(f"unknown action {action!r}")
        return self.events[len(self.events) - (len(self.events) - before) :]

    def run(self) -> None:
        while not self.turn_ended:
            if not self._queue:
                self._finish()
            if self._queue:
                self.advance()

    def _finish(self) -> None:
        if not self.aborted:
            form_done = self.think_closed
            if not (form_done and self.response_done):
                raise InvariantError(
                    "queue drained before both brains completed "
                    f"(think_closed={self.think_closed}, response_done={self.response_done})"
                )
        self._push(self.clock, 3, _TURN_END, None)

    def _abort(self, time: float, error) -> None:
        self.aborted = True
        self.notes.append(f"aborted: {error}")
        self._queue.clear()
        self._push(time, 3, _TURN_END, None)

    # ------------------------------------------------------------------ #
    # Formulation brain
    # ------------------------------------------------------------------ #

    def _close_think(self) -> None:
        self.think_closed = True
        self.total_think_segments = len(self.think_segments)

    def _think_budget_left(self) -> int:
        return self.policy.max_think_tokens - self.think_emitted

    def _do_form_start(self, time: float) -> None:
        if self.think_closed or self.aborted:
            return
        budget = self._think_budget_left()
        if budget <= 0:
            self.notes.append("forced_close: think budget exhausted")
            self._close_think()
            self._push(time, _LANE_ART, _ART_CHECK, None)
            return
        prior = [tok for seg in self.think_segments for tok in seg.tokens]
        prompt = build_formulation_prompt(self.input, prior)
        if self.observer is not None:
            self.observer(Brain.FORMULATION, None, prompt)
        stop = StopCondition(
            max_tokens=min(self.think_unit, budget),
            stop_kinds=frozenset({TokenKind.THINK_CLOSE}),
        )
        result = self.form_gen.stream(prompt, stop).collect()
        if result.reason is CompletionReason.BACKEND_ERROR:
            self._abort(time, result.error)
            return
        content = tuple(t for t in result.tokens if not t.is_control)
        closed = result.reason is CompletionReason.STOP_TOKEN
        self.think_emitted += len(content)
        forced = (
            not closed
            and result.reason is CompletionReason.BUDGET
            and self._think_budget_left() <= 0
        )
        if not content:
            # A probe step that produced only the close tag: zero duration.
            if closed or forced:
                if forced:
                    self.notes.append("forced_close: think budget exhausted")
                self._close_think()
                self._push(time, _LANE_ART, _ART_CHECK, None)
            return
        end = time + len(content) / self.rates.formulation_rate
        segment = Segment(
            kind=SegmentKind.THINK,
            index=len(self.think_segments) + 1,
            tokens=content,
            start_time=time,
            end_time=end,
        )
        self._record(
            Event(
                time=time,
                type=EventType.GEN_START,
                brain=Brain.FORMULATION,
                segment_kind=SegmentKind.THINK,
                segment_index=segment.index,
            )
        )
        self._push(end, _LANE_FORM, _FORM_END, (segment, closed, forced))

    def _do_form_end(self, time: float, payload) -> None:
        segment, closed, forced = payload
        self.think_segments.append(segment)
        self._record(
            Event(
                time=time,
                type=EventType.GEN_END,
                brain=Brain.FORMULATION,
                segment_kind=SegmentKind.THINK,
                segment_index=segment.index,
            )
        )
        self._record(
            Event(
                time=time,
                type=EventType.SEGMENT_HANDOFF,
                brain=Brain.FORMULATION,
                segment_kind=SegmentKind.THINK,
                segment_index=segment.index,
            )
        )
        self.segments_handed += 1
        if closed or forced:
            if forced:
                self.notes.append("forced_close: think budget exhausted")
            self._close_think()
        else:
            self._push(time, _LANE_FORM, _FORM_START, None)
        self._push(time, _LANE_ART, _ART_CHECK, None)

    # ------------------------------------------------------------------ #
    # Articulation brain
    # ------------------------------------------------------------------ #

    def _step_requirements(self, step: int) -> tuple[bool, bool]:
        """(can_run, is_final) for articulation step ``step`` right now."""
        kind = self.strategy.kind
        if kind is StrategyKind.TBS:
            return self.think_closed, True
        if kind is StrategyKind.DIRECT:
            return True, True
        if kind is StrategyKind.THINK_FIRST:
            needed = step
        elif kind is StrategyKind.SPEAK_FIRST:
            needed = step - 1
        else:  # pragma: no cover - interleaved never reaches here
            raise InvariantError("interleaved strategy uses its own scheduling")
        if self.think_closed and needed >= (self.total_think_segments or 0):
            return True, True
        return self.segments_handed >= needed, False

    def _visible_think(self, step: int, final: bool) -> tuple[Segment, ...]:
        kind = self.strategy.kind
        if final or kind is StrategyKind.TBS:
            return tuple(self.think_segments)
        if kind is StrategyKind.DIRECT:
            return ()
        count = step if kind is StrategyKind.THINK_FIRST else step - 1
        return tuple(self.think_segments[:count])

    def _do_art_check(self, time: float) -> None:
        if self.art_busy or self.response_done or self.aborted:
            return
        step = len(self.response_segments) + 1
        can_run, final = self._step_requirements(step)
        if not can_run:
            if self.art_waiting_since is None:
                self.art_waiting_since = time
            return
        waited_since = self.art_waiting_since
        self.art_waiting_since = None
        ctx = StepContext(
            input=self.input,
            think_segments=self._visible_think(step, final),
            response_segments=tuple(self.response_segments),
            think_closed=final,
        )
        self._run_response_step(time, ctx, final=final, waited_since=waited_since)

    def _response_budget_left(self) -> int:
        return self.policy.max_response_tokens - self.response_emitted

    def _run_response_step(self, time, ctx, *, final, waited_since, lane=_LANE_ART):
        budget = self._response_budget_left()
        if budget <= 0:
            self.notes.append("response budget exhausted before end-of-response")
            self.response_done = True
            return
        prompt = build_articulation_prompt(ctx)
        if self.observer is not None:
            self.observer(Brain.ARTICULATION, ctx, prompt)
        cap = budget if final else min(self.response_unit, budget)
        stop = StopCondition(
            max_tokens=cap, stop_kinds=frozenset({TokenKind.END_OF_RESPONSE})
        )
        result = self.art_gen.stream(prompt, stop).collect()
        if result.reason is CompletionReason.BACKEND_ERROR:
            self._abort(time, result.error)
            return
        content = tuple(t for t in result.tokens if not t.is_control)
        ended = result.reason is CompletionReason.STOP_TOKEN
        self.response_emitted += len(content)
        if not content:
            if ended:
                self.response_done = True
            else:
                self.notes.append("response budget exhausted before end-of-response")
                self.response_done = True
            return
        end = time + len(content) / self.rates.articulation_rate
        segment = Segment(
            kind=SegmentKind.RESPONSE,
            index=len(self.response_segments) + 1,
            tokens=content,
            start_time=time,
            end_time=end,
        )
        self.response_segments.append(segment)
        self.art_busy = True
        self._record(
            Event(
                time=time,
                type=EventType.GEN_START,
                brain=Brain.ARTICULATION,
                segment_kind=SegmentKind.RESPONSE,
                segment_index=segment.index,
            )
        )
        self._schedule_playback(segment, waited_since)
        done_after = ended or (
            result.reason is CompletionReason.BUDGET and self._response_budget_left() <= 0 and final
        )
        if result.reason is CompletionReason.BUDGET and final and self._response_budget_left() <= 0:
            self.notes.append("response budget exhausted before end-of-response")
        self._push(end, lane, _ART_END, (segment, done_after))

    def _do_art_end(self, time: float, payload) -> None:
        segment, done_after = payload
        self.art_busy = False
        self._record(
            Event(
                time=time,
                type=EventType.GEN_END,
                brain=Brain.ARTICULATION,
                segment_kind=SegmentKind.RESPONSE,
                segment_index=segment.index,
            )
        )
        if done_after:
            self.response_done = True
            return
        self._push(time, _LANE_ART, _ART_CHECK, None)

    # ------------------------------------------------------------------ #
    # Playback
    # ------------------------------------------------------------------ #

    def _schedule_playback(self, segment: Segment, waited_since) -> None:
        """Queue playback of a response segment and detect audible stalls.

        Availability = the moment (tts_buffer_tokens + 1) of the segment's
        tokens exist, clamped to the segment end for short segments. Playback
        is FIFO and gapless against the previous segment's end.
        """
        tokens_needed = min(len(segment), self.rates.tts_buffer_tokens + 1)
        available = segment.start_time + tokens_needed / self.rates.articulation_rate
        previous_end = self.playback_horizon
        start = available if previous_end is None else max(available, previous_end)
        duration = segment.audio_count() * self.rates.audio_token_seconds
        end = start + duration

        if (
            waited_since is not None
            and segment.start_time > waited_since
            and previous_end is not None
            and previous_end < segment.start_time
        ):
            self.stalls.append(
                Event(
                    time=previous_end,
                    type=EventType.STALL,
                    segment_kind=SegmentKind.RESPONSE,
                    segment_index=segment.index,
                    duration=start - previous_end,
                    note="audio gap while waiting for a think handoff",
                )
            )

        self.playback_horizon = end
        self._push(
            start,
            _LANE_PLAY,
            _PLAY_EVENT,
            Event(
                time=start,
                type=EventType.PLAYBACK_START,
                segment_kind=SegmentKind.RESPONSE,
                segment_index=segment.index,
            ),
        )
        self._push(
            end,
            _LANE_PLAY,
            _PLAY_EVENT,
            Event(
                time=end,
                type=EventType.PLAYBACK_END,
                segment_kind=SegmentKind.RESPONSE,
                segment_index=segment.index,
            ),
        )

    # ------------------------------------------------------------------ #
    # Interleaved single-brain baseline
    # ------------------------------------------------------------------ #

    def _do_interleaved_think(self, time: float) -> None:
        if self.aborted:
            return
        if self.think_closed:
            self._push(time, _LANE_ART, _INT_RESPONSE, None)
            return
        budget = self._think_budget_left()
        if budget <= 0:
            self.notes.append("forced_close: think budget exhausted")
            self._close_think()
            self._push(time, _LANE_ART, _INT_RESPONSE, None)
            return
        prior = [tok for seg in self.think_segments for tok in seg.tokens]
        prompt = build_formulation_prompt(self.input, prior)
        if self.observer is not None:
            self.observer(Brain.ARTICULATION, None, prompt)
        stop = StopCondition(
            max_tokens=min(self.strategy.chunk_think, budget),
            stop_kinds=frozenset({TokenKind.THINK_CLOSE}),
        )
        result = self.form_gen.stream(prompt, stop).collect()
        if result.reason is CompletionReason.BACKEND_ERROR:
            self._abort(time, result.error)
            return
        content = tuple(t for t in result.tokens if not t.is_control)
        closed = result.reason is CompletionReason.STOP_TOKEN
        self.think_emitted += len(content)
        forced = not closed and self._think_budget_left() <= 0
        if closed or forced:
            if forced:
                self.notes.append("forced_close: think budget exhausted")
        if not content:
            if closed or forced:
                self._close_think()
            self._push(time, _LANE_ART, _INT_RESPONSE if (closed or forced) else _INT_THINK, None)
            return
        end = time + len(content) / self.rates.articulation_rate
        segment = Segment(
            kind=SegmentKind.THINK,
            index=len(self.think_segments) + 1,
            tokens=content,
            start_time=time,
            end_time=end,
        )
        self.think_segments.append(segment)
        self._record(
            Event(
                time=time,
                type=EventType.GEN_START,
                brain=Brain.ARTICULATION,
                segment_kind=SegmentKind.THINK,
                segment_index=segment.index,
            )
        )
        self._record(
            Event(
                time=end,
                type=EventType.GEN_END,
                brain=Brain.ARTICULATION,
                segment_kind=SegmentKind.THINK,
                segment_index=segment.index,
            )
        )
        self._record(
            Event(
                time=end,
                type=EventType.SEGMENT_HANDOFF,
                brain=Brain.ARTICULATION,
                segment_kind=SegmentKind.THINK,
                segment_index=segment.index,
            )
        )
        self.segments_handed += 1
        if closed or forced:
            self._close_think()
        self.clock = end
        self._push(end, _LANE_ART, _INT_RESPONSE, None)

    def _do_interleaved_response(self, time: float) -> None:
        if self.response_done or self.aborted:
            self.response_done = True
            return
        final = self.think_closed
        ctx = StepContext(
            input=self.input,
            think_segments=tuple(self.think_segments),
            response_segments=tuple(self.response_segments),
            think_closed=final,
        )
        before = len(self.response_segments)
        self._run_response_step(time, ctx, final=final, waited_since=None)
        produced = len(self.response_segments) > before
        if produced and not final:
            segment = self.response_segments[-1]
            # Alternate back to thinking once this chunk finishes generating.
            self._push(segment.end_time, _LANE_ART, _INT_THINK, None)

    # ------------------------------------------------------------------ #
    # Transcript assembly
    # ------------------------------------------------------------------ #

    def transcript(self, turn_id: str, scenario_id: str) -> Transcript:
        if not self.turn_ended:
            raise InvariantError("transcript requested before the turn ended")
        merged = sorted(self.events + self.stalls, key=lambda e: (e.time, e.lane()))
        return Transcript(
            turn_id=turn_id,
            scenario_id=scenario_id,
            strategy=self.strategy.name,
            events=tuple(merged),
            think_segments=tuple(self.think_segments),
            response_segments=tuple(self.response_segments),
            aborted=self.aborted,
            notes=tuple(dict.fromkeys(self.notes)),
        )


def _scenario_id_for(spec: GeneratorSpec, turn_input: TurnInput) -> str:
    if spec.scenario is not None:
        return spec.scenario.scenario_id
    sig = sum(t.id for t in turn_input.all_tokens()) % 100000
    return f"{spec.kind.value}:{spec.seed}:{sig}"


def run_turn(
    strategy: Strategy,
    turn_input: TurnInput,
    backends: tuple[GeneratorSpec, GeneratorSpec],
    policy: SegmentationPolicy,
    rates: RateModel,
    *,
    observer=None,
    turn_id: str | None = None,
) -> Transcript:
    """Simulate one turn and return its transcript.

    ``backends`` is the (formulation, articulation) spec pair; both brains
    may share one spec. The interleaved baseline runs entirely on the
    articulation backend and rate.
    """
    form_spec, art_spec = backends
    interleaved = strategy.kind is StrategyKind.INTERLEAVED
    if interleaved:
        form_spec = art_spec
    form_gen = resolve_generator(
        form_spec,
        "formulation",
        policy,
        think_unit=strategy.chunk_think if interleaved else None,
    )
    art_gen = resolve_generator(
        art_spec,
        "articulation",
        policy,
        think_unit=strategy.chunk_think if interleaved else None,
        response_unit=strategy.chunk_response if interleaved else None,
    )
    state = EngineState(
        strategy, turn_input, policy, rates, form_gen, art_gen, observer=observer
    )
    state.run()
    scenario_id = _scenario_id_for(art_spec, turn_input)
    return state.transcript(turn_id or f"{scenario_id}/{strategy.name}", scenario_id)

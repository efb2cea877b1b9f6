"""Scenario files: scripted turn content for reproducible simulations.

A scenario pins down one turn completely: the user input tokens, the full
chain-of-thought token sequence, and the response stream. Response content is
given either as one canonical ``response`` stream (sliced on demand) or as
explicit ``continuations`` keyed by how many think/response segments were
visible when the step ran. Explicit keys make a scenario strict: a lookup
miss is a fatal configuration error naming the key.

JSON layout::

    {
      "name": "worked_example",
      "input": {"speech": [id, ...], "text": [id, ...]},
      "cot": [id, ...],
      "response": [id, ...],
      "continuations": {"1,0": [id, ...], ...}
    }

All ids are content ids (>= 3). Inside a continuation the reserved id 2 may
appear as the final element to mark the end of the response.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .core import (
    END_OF_RESPONSE_ID,
    FIRST_CONTENT_ID,
    TurnInput,
    audio_token,
    text_token,
)
from .errors import ScenarioError


@dataclass(frozen=True)
class Scenario:
    name: str
    input: TurnInput
    cot_ids: tuple[int, ...]
    response_ids: tuple[int, ...] | None = None
    continuations: dict[tuple[int, int], tuple[int, ...]] | None = None

    def __post_init__(self):
        if self.response_ids is None and self.continuations is None:
            raise ScenarioError(
                f"scenario {self.name!r} needs a response stream or continuations"
            )
        for i in self.cot_ids:
            _require_content_id(i, "cot", self.name)
        if self.response_ids is not None:
            for i in self.response_ids:
                _require_content_id(i, "response", self.name)
        if self.continuations is not None:
            for key, ids in self.continuations.items():
                for pos, i in enumerate(ids):
                    if i == END_OF_RESPONSE_ID and pos == len(ids) - 1:
                        continue
                    _require_content_id(i, f"continuation {key}", self.name)

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256(
            json.dumps(self.to_json_obj(), sort_keys=True).encode()
        ).hexdigest()
        return digest[:16]

    @property
    def scenario_id(self) -> str:
        return f"{self.name}:{self.fingerprint}"

    def to_json_obj(self) -> dict:
        obj: dict = {
            "name": self.name,
            "input": {
                "speech": [t.id for t in self.input.speech_tokens],
                "text": [t.id for t in self.input.text_tokens],
            },
            "cot": list(self.cot_ids),
        }
        if self.response_ids is not None:
            obj["response"] = list(self.response_ids)
        if self.continuations is not None:
            obj["continuations"] = {
                f"{k},{m}": list(ids) for (k, m), ids in sorted(self.continuations.items())
            }
        return obj

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_obj(), indent=2) + "\n")


def _require_content_id(token_id, where: str, name: str) -> None:
    if not isinstance(token_id, int) or token_id < FIRST_CONTENT_ID:
        raise ScenarioError(
            f"scenario {name!r}: {where} holds id {token_id!r}; content ids "
            f"must be integers >= {FIRST_CONTENT_ID}"
        )


def _parse_key(raw: str) -> tuple[int, int]:
    try:
        k, m = raw.split(",")
        return int(k), int(m)
    except ValueError as exc:
        raise ScenarioError(f"bad continuation key {raw!r}, expected 'k,m'") from exc


def scenario_from_obj(obj: dict) -> Scenario:
    try:
        name = obj["name"]
        raw_input = obj["input"]
        speech = raw_input["speech"]
        text = raw_input.get("text", [])
        cot = obj["cot"]
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"scenario missing required field: {exc}") from exc
    if not isinstance(speech, list) or not speech:
        raise ScenarioError("scenario input.speech must be a non-empty id list")
    turn_input = TurnInput(
        speech_tokens=tuple(audio_token(i) for i in speech),
        text_tokens=tuple(text_token(i) for i in text),
    )
    response = obj.get("response")
    continuations = obj.get("continuations")
    return Scenario(
        name=str(name),
        input=turn_input,
        cot_ids=tuple(cot),
        response_ids=tuple(response) if response is not None else None,
        continuations=(
            {_parse_key(k): tuple(v) for k, v in continuations.items()}
            if continuations is not None
            else None
        ),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ScenarioError(f"scenario {path} must be a JSON object")
    return scenario_from_obj(obj)


def synthetic_scenario(
    name: str,
    cot_tokens: int,
    response_tokens: int,
    *,
    input_tokens: int = 12,
    seed: int = 0,
) -> Scenario:
    """Deterministic scenario with the requested content lengths.

    Token ids are derived from the seed so distinct scenarios do not alias;
    useful for fixtures and parameter sweeps.
    """

    def ids(label: str, count: int) -> tuple[int, ...]:
        out = []
        for j in range(count):
            digest = hashlib.sha256(f"{seed}:{name}:{label}:{j}".encode()).digest()
            out.append(FIRST_CONTENT_ID + int.from_bytes(digest[:4], "big") % 50000)
        return tuple(out)

    return Scenario(
        name=name,
        input=TurnInput(speech_tokens=tuple(audio_token(i) for i in ids("in", input_tokens))),
        cot_ids=ids("cot", cot_tokens),
        response_ids=ids("res", response_tokens),
    )

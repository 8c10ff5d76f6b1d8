"""Validation of submitted survey responses.

A payload names the (surveyId, version) it traversed, carries the answers as
``question identifier -> chosen option text``, and optionally a snapshot of
physiological fields captured right after submission. Violations are data,
not exceptions: the service turns a non-empty list into a 422 body.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from . import flows
from .timeutil import parse_utc_ms


@dataclass(frozen=True)
class PayloadViolation:
    code: str
    field: str = ""
    message: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"code": self.code, "field": self.field, "message": self.message}


@dataclass
class CheckedPayload:
    """Validation outcome: the normalized record body when clean."""

    violations: list[PayloadViolation] = field(default_factory=list)
    body: dict[str, Any] | None = None

    @property
    def ok(self) -> bool:
        return not self.violations


_TOP_KEYS = {"participantId", "surveyId", "surveyVersion", "startedAt",
             "submittedAt", "answers", "physiological", "deviceInfo"}

# field -> (lower, upper, lower_exclusive, upper_exclusive)
_PHYSIO_RANGES: dict[str, tuple[float, float, bool, bool]] = {
    "heartRate": (0.0, 300.0, True, True),
    "stepCount": (0.0, 200_000.0, False, False),
    "latitude": (-90.0, 90.0, False, False),
    "longitude": (-180.0, 180.0, False, False),
    "weight": (0.0, 500.0, True, True),
    "height": (0.0, 3.0, True, True),
    "basalEnergy": (0.0, 100_000.0, False, False),
}


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_payload(doc: Any, definition: flows.SurveyDefinition) -> CheckedPayload:
    """Check a response document against the payload contract and the
    definition's flow graph; returns violations plus the normalized body.

    Version agreement is the caller's concern (it is a 409, not a 422); the
    graph walk below assumes ``definition`` is the version the client used.
    """
    out = CheckedPayload()
    bad = out.violations.append
    if not isinstance(doc, Mapping):
        bad(PayloadViolation("notAnObject", "", "payload must be a JSON object"))
        return out
    for key in sorted(set(doc) - _TOP_KEYS):
        bad(PayloadViolation("unknownField", key, "unexpected field"))

    participant_id = doc.get("participantId")
    if not isinstance(participant_id, str) or not participant_id.strip():
        bad(PayloadViolation("badParticipantId", "participantId",
                             "must be a non-empty string"))
    survey_id = doc.get("surveyId")
    if not isinstance(survey_id, str) or not survey_id:
        bad(PayloadViolation("badSurveyId", "surveyId", "must be a non-empty string"))
    version = doc.get("surveyVersion")
    if not isinstance(version, int) or isinstance(version, bool) or version < 1:
        bad(PayloadViolation("badSurveyVersion", "surveyVersion",
                             "must be a positive integer"))

    started = submitted = None
    for name in ("startedAt", "submittedAt"):
        value = doc.get(name)
        try:
            ms = parse_utc_ms(value)
        except ValueError as exc:
            bad(PayloadViolation("badTimestamp", name, str(exc)))
            continue
        if name == "startedAt":
            started = ms
        else:
            submitted = ms
    if started is not None and submitted is not None and submitted < started:
        bad(PayloadViolation("timeOrder", "submittedAt",
                             "submittedAt must not precede startedAt"))

    answer_indexes = _check_answers(doc.get("answers"), definition, bad)
    physiological = _check_physiological(doc.get("physiological"), bad)

    device_info = doc.get("deviceInfo")
    if device_info is not None and not isinstance(device_info, str):
        bad(PayloadViolation("badDeviceInfo", "deviceInfo", "must be a string"))

    if out.violations:
        return out
    body: dict[str, Any] = {
        "participantId": participant_id,
        "surveyId": survey_id,
        "surveyVersion": version,
        "startedAt": doc["startedAt"],
        "submittedAt": doc["submittedAt"],
        "answers": dict(doc["answers"]),
        "answerIndexes": answer_indexes,
    }
    if physiological is not None:
        body["physiological"] = physiological
    if device_info is not None:
        body["deviceInfo"] = device_info
    out.body = body
    return out


def _check_answers(answers: Any, definition: flows.SurveyDefinition, bad) -> dict[str, int]:
    """Walk the flow graph from the entry question and confirm the answered
    identifiers form exactly one root-to-END path; option indexes are derived
    from the chosen texts and stored alongside them."""
    if not isinstance(answers, Mapping):
        bad(PayloadViolation("badAnswers", "answers",
                             "must be an object of identifier -> option text"))
        return {}
    for key, value in answers.items():
        if not isinstance(key, str) or not isinstance(value, str):
            bad(PayloadViolation("badAnswers", "answers",
                                 "keys and values must be strings"))
            return {}

    indexes: dict[str, int] = {}
    visited: set[str] = set()
    index = 0
    while index != flows.END:
        question = definition.questions[index]
        visited.add(question.identifier)
        if question.identifier not in answers:
            bad(PayloadViolation("missingAnswer", f"answers.{question.identifier}",
                                 f"path reaches {question.identifier!r} but it is unanswered"))
            return {}
        text = answers[question.identifier]
        try:
            option_index = question.options.index(text)
        except ValueError:
            bad(PayloadViolation("unknownOption", f"answers.{question.identifier}",
                                 f"{text!r} is not an option of {question.identifier!r}"))
            return {}
        indexes[question.identifier] = option_index
        index = question.next_question[option_index]

    extras = set(answers) - visited
    for identifier in sorted(extras):
        bad(PayloadViolation("extraAnswer", f"answers.{identifier}",
                             "answer does not lie on the traversed path"))
    return indexes


def _check_physiological(physio: Any, bad) -> dict[str, Any] | None:
    if physio is None:
        return None
    if not isinstance(physio, Mapping):
        bad(PayloadViolation("badPhysiological", "physiological", "must be an object"))
        return None
    for key in sorted(set(physio) - set(_PHYSIO_RANGES)):
        bad(PayloadViolation("unknownField", f"physiological.{key}", "unexpected field"))
    cleaned: dict[str, Any] = {}
    for name, (lo, hi, lo_open, hi_open) in _PHYSIO_RANGES.items():
        if name not in physio:
            continue
        value = physio[name]
        if not _is_number(value):
            bad(PayloadViolation("badNumber", f"physiological.{name}",
                                 "must be a number"))
            continue
        below = value <= lo if lo_open else value < lo
        above = value >= hi if hi_open else value > hi
        if below or above:
            bad(PayloadViolation(f"{name}OutOfRange", f"physiological.{name}",
                                 f"{value} outside allowed range"))
            continue
        cleaned[name] = value
    if ("latitude" in physio) != ("longitude" in physio):
        bad(PayloadViolation("gpsPairIncomplete", "physiological",
                             "latitude and longitude must come together"))
    if "stepCount" in cleaned and not isinstance(cleaned["stepCount"], int):
        bad(PayloadViolation("badNumber", "physiological.stepCount",
                             "must be an integer"))
    # An explicitly sent (even empty) block is preserved as sent.
    return cleaned

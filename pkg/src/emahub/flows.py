"""Branching survey flows: definitions, validation, and session traversal.

A survey is a list of single-choice questions. Each answer option carries the
index of the question shown next, or the END sentinel (-1) to finish the
survey. Question 0 is always the entry point. Definitions are immutable once
validated; sessions are small immutable values so every traversal step yields
a new session and replay is trivially deterministic.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping

from .timeutil import format_utc_ms, parse_utc_ms

END = -1

ACTIVE = "active"
COMPLETED = "completed"
ABORTED = "aborted"

IDENTIFIER_RE = re.compile(r"^[a-z0-9-]+$")

PATH_LIMIT = 1_000_000


class FlowError(Exception):
    """Base class for survey-flow failures."""


class DefinitionFormatError(FlowError):
    """The definition document is structurally broken (missing/mistyped fields)."""


class InvalidDefinitionError(FlowError):
    def __init__(self, violations: list["Violation"]):
        super().__init__(f"definition has {len(violations)} violation(s): "
                         + "; ".join(str(v) for v in violations[:5]))
        self.violations = violations


class SessionNotActiveError(FlowError):
    pass


class SessionAbortedError(FlowError):
    pass


class OptionOutOfRangeError(FlowError):
    pass


class PathExplosionError(FlowError):
    pass


@dataclass(frozen=True)
class Violation:
    """One broken definition invariant, as data rather than an exception."""

    kind: str
    question: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = f" at question {self.question}" if self.question is not None else ""
        tail = f": {self.detail}" if self.detail else ""
        return f"{self.kind}{where}{tail}"


@dataclass(frozen=True)
class Question:
    title: str
    options: tuple[str, ...]
    icons: tuple[str, ...]
    next_question: tuple[int, ...]
    identifier: str


@dataclass(frozen=True)
class SurveyDefinition:
    survey_id: str
    version: int
    questions: tuple[Question, ...]

    def index_of(self, identifier: str) -> int:
        for i, q in enumerate(self.questions):
            if q.identifier == identifier:
                return i
        raise KeyError(identifier)


@dataclass(frozen=True)
class SurveySession:
    survey_id: str
    version: int
    current_index: int
    answer_stack: tuple[tuple[str, int], ...]
    started_at: int
    status: str


# ---------------------------------------------------------------------------
# Validation


def validate_definition(definition: SurveyDefinition) -> list[Violation]:
    """Check every definition invariant; an empty report means valid."""
    violations: list[Violation] = []
    if not isinstance(definition.survey_id, str) or not definition.survey_id:
        violations.append(Violation("badSurveyId"))
    if not isinstance(definition.version, int) or isinstance(definition.version, bool) \
            or definition.version < 1:
        violations.append(Violation("badVersion"))
    n = len(definition.questions)
    if n == 0:
        violations.append(Violation("emptyDefinition"))
        return violations

    seen_identifiers: dict[str, int] = {}
    for i, q in enumerate(definition.questions):
        if not (len(q.options) == len(q.icons) == len(q.next_question)):
            violations.append(Violation(
                "arityMismatch", i,
                f"options={len(q.options)} icons={len(q.icons)} next={len(q.next_question)}"))
        if len(q.options) < 2:
            violations.append(Violation("tooFewOptions", i, f"{len(q.options)} option(s)"))
        if not q.title.strip():
            violations.append(Violation("emptyTitle", i))
        for text in q.options:
            if not text.strip():
                violations.append(Violation("emptyOption", i))
                break
        for icon in q.icons:
            if not icon.strip():
                violations.append(Violation("emptyIcon", i))
                break
        if not IDENTIFIER_RE.match(q.identifier or ""):
            violations.append(Violation("badIdentifier", i, repr(q.identifier)))
        elif q.identifier in seen_identifiers:
            violations.append(Violation(
                "duplicateIdentifier", i,
                f"{q.identifier!r} already used by question {seen_identifiers[q.identifier]}"))
        else:
            seen_identifiers[q.identifier] = i
        for target in q.next_question:
            if target != END and not (0 <= target < n):
                violations.append(Violation("badNextIndex", i, f"target {target}"))

    reachable = reachable_questions(definition)
    for i in range(n):
        if i not in reachable:
            violations.append(Violation("unreachable", i))
    for i in sorted(_questions_on_cycles(definition)):
        violations.append(Violation("cycle", i))
    return violations


def reachable_questions(definition: SurveyDefinition) -> set[int]:
    """Question indices reachable from the entry question along valid edges."""
    n = len(definition.questions)
    if n == 0:
        return set()
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for target in definition.questions[i].next_question:
            if target != END and 0 <= target < n and target not in seen:
                seen.add(target)
                frontier.append(target)
    return seen


def _questions_on_cycles(definition: SurveyDefinition) -> set[int]:
    n = len(definition.questions)
    edges: dict[int, set[int]] = {
        i: {t for t in q.next_question if t != END and 0 <= t < n}
        for i, q in enumerate(definition.questions)
    }
    on_cycle: set[int] = set()
    for start in range(n):
        # start is on a cycle iff it is reachable from one of its successors
        seen: set[int] = set()
        frontier = list(edges[start])
        while frontier:
            i = frontier.pop()
            if i == start:
                on_cycle.add(start)
                break
            if i in seen:
                continue
            seen.add(i)
            frontier.extend(edges[i])
    return on_cycle


def require_valid(definition: SurveyDefinition) -> SurveyDefinition:
    violations = validate_definition(definition)
    if violations:
        raise InvalidDefinitionError(violations)
    return definition


# ---------------------------------------------------------------------------
# Session traversal


def start_session(definition: SurveyDefinition, now_ms: int) -> SurveySession:
    """Open a traversal at the entry question with an empty answer stack."""
    require_valid(definition)
    return SurveySession(
        survey_id=definition.survey_id,
        version=definition.version,
        current_index=0,
        answer_stack=(),
        started_at=now_ms,
        status=ACTIVE,
    )


def step(definition: SurveyDefinition, session: SurveySession,
         option_index: int) -> SurveySession:
    """Answer the current question and advance along its next-question edge."""
    if session.status != ACTIVE:
        raise SessionNotActiveError(f"session is {session.status}")
    question = definition.questions[session.current_index]
    if not (0 <= option_index < len(question.options)):
        raise OptionOutOfRangeError(
            f"option {option_index} out of range for {question.identifier!r} "
            f"({len(question.options)} options)")
    target = question.next_question[option_index]
    stack = session.answer_stack + ((question.identifier, option_index),)
    if target == END:
        return replace(session, current_index=END, answer_stack=stack, status=COMPLETED)
    return replace(session, current_index=target, answer_stack=stack)


def back(definition: SurveyDefinition, session: SurveySession) -> SurveySession:
    """Undo the most recent answer; a no-op at the entry question."""
    if session.status == ABORTED:
        raise SessionAbortedError("cannot go back in an aborted session")
    if not session.answer_stack:
        return session
    identifier, _ = session.answer_stack[-1]
    return replace(
        session,
        current_index=definition.index_of(identifier),
        answer_stack=session.answer_stack[:-1],
        status=ACTIVE,
    )


def abort(session: SurveySession) -> SurveySession:
    """Discard the survey; the answer stack is kept for audit only."""
    if session.status != ACTIVE:
        raise SessionNotActiveError(f"session is {session.status}")
    return replace(session, status=ABORTED)


def replay(definition: SurveyDefinition, option_indexes: Iterable[int],
           started_at: int) -> SurveySession:
    """Rebuild a session by stepping through the given answers from scratch."""
    session = start_session(definition, started_at)
    for option_index in option_indexes:
        session = step(definition, session, option_index)
    return session


# ---------------------------------------------------------------------------
# Path enumeration (test oracle and client conformance tool)


def count_paths(definition: SurveyDefinition) -> int:
    """Number of distinct root-to-END answer sequences."""
    require_valid(definition)
    memo: dict[int, int] = {}

    def paths_from(i: int) -> int:
        if i == END:
            return 1
        if i not in memo:
            memo[i] = sum(paths_from(t) for t in definition.questions[i].next_question)
        return memo[i]

    return paths_from(0)


def enumerate_paths(definition: SurveyDefinition,
                    limit: int = PATH_LIMIT) -> list[tuple[int, ...]]:
    """Every distinct option sequence from the entry question to END."""
    total = count_paths(definition)
    if total > limit:
        raise PathExplosionError(f"{total} paths exceed the {limit} limit")
    paths: list[tuple[int, ...]] = []
    stack: list[int] = []

    def walk(i: int) -> None:
        if i == END:
            paths.append(tuple(stack))
            return
        for option_index, target in enumerate(definition.questions[i].next_question):
            stack.append(option_index)
            walk(target)
            stack.pop()

    walk(0)
    return paths


def max_path_length(definition: SurveyDefinition) -> int:
    """Longest root-to-END path, counted in questions answered."""
    require_valid(definition)
    memo: dict[int, int] = {}

    def depth(i: int) -> int:
        if i == END:
            return 0
        if i not in memo:
            memo[i] = 1 + max(depth(t) for t in definition.questions[i].next_question)
        return memo[i]

    return depth(0)


# ---------------------------------------------------------------------------
# Serialization (the survey-definition document served to clients)


def definition_to_dict(definition: SurveyDefinition) -> dict[str, Any]:
    return {
        "surveyId": definition.survey_id,
        "version": definition.version,
        "questions": [
            {
                "title": q.title,
                "options": list(q.options),
                "icons": list(q.icons),
                "nextQuestion": list(q.next_question),
                "identifier": q.identifier,
            }
            for q in definition.questions
        ],
    }


_DEFINITION_KEYS = {"surveyId", "version", "questions"}
_QUESTION_KEYS = {"title", "options", "icons", "nextQuestion", "identifier"}


def definition_from_dict(doc: Mapping[str, Any]) -> SurveyDefinition:
    """Strict parse of a definition document; semantic checks stay in
    :func:`validate_definition`."""
    if not isinstance(doc, Mapping):
        raise DefinitionFormatError("definition document must be an object")
    unknown = set(doc) - _DEFINITION_KEYS
    if unknown:
        raise DefinitionFormatError(f"unknown definition fields: {sorted(unknown)}")
    missing = _DEFINITION_KEYS - set(doc)
    if missing:
        raise DefinitionFormatError(f"missing definition fields: {sorted(missing)}")
    survey_id = doc["surveyId"]
    version = doc["version"]
    questions_doc = doc["questions"]
    if not isinstance(survey_id, str):
        raise DefinitionFormatError("surveyId must be a string")
    if not isinstance(version, int) or isinstance(version, bool):
        raise DefinitionFormatError("version must be an integer")
    if not isinstance(questions_doc, list):
        raise DefinitionFormatError("questions must be a list")

    questions = []
    for i, qdoc in enumerate(questions_doc):
        if not isinstance(qdoc, Mapping):
            raise DefinitionFormatError(f"question {i} must be an object")
        unknown = set(qdoc) - _QUESTION_KEYS
        if unknown:
            raise DefinitionFormatError(f"question {i} has unknown fields: {sorted(unknown)}")
        missing = _QUESTION_KEYS - set(qdoc)
        if missing:
            raise DefinitionFormatError(f"question {i} is missing fields: {sorted(missing)}")
        title, identifier = qdoc["title"], qdoc["identifier"]
        options, icons, targets = qdoc["options"], qdoc["icons"], qdoc["nextQuestion"]
        if not isinstance(title, str) or not isinstance(identifier, str):
            raise DefinitionFormatError(f"question {i}: title and identifier must be strings")
        for name, values, kind in (("options", options, str), ("icons", icons, str),
                                   ("nextQuestion", targets, int)):
            if not isinstance(values, list) or not all(
                    isinstance(v, kind) and not isinstance(v, bool) for v in values):
                raise DefinitionFormatError(
                    f"question {i}: {name} must be a list of {kind.__name__}")
        questions.append(Question(
            title=title,
            options=tuple(options),
            icons=tuple(icons),
            next_question=tuple(targets),
            identifier=identifier,
        ))
    return SurveyDefinition(survey_id=survey_id, version=version,
                            questions=tuple(questions))


def definition_to_bytes(definition: SurveyDefinition) -> bytes:
    """Canonical document bytes; stable for a fixed definition version."""
    text = json.dumps(definition_to_dict(definition), ensure_ascii=False,
                      indent=2, separators=(",", ": "))
    return (text + "\n").encode("utf-8")


def load_definition_file(path) -> SurveyDefinition:
    with open(path, "rb") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DefinitionFormatError(f"{path}: not valid JSON: {exc}") from exc
    return definition_from_dict(doc)


def session_to_dict(session: SurveySession) -> dict[str, Any]:
    return {
        "surveyId": session.survey_id,
        "version": session.version,
        "currentIndex": session.current_index,
        "answerStack": [[ident, idx] for ident, idx in session.answer_stack],
        "startedAt": format_utc_ms(session.started_at),
        "status": session.status,
    }


def session_from_dict(doc: Mapping[str, Any]) -> SurveySession:
    try:
        stack = tuple((str(ident), int(idx)) for ident, idx in doc["answerStack"])
        return SurveySession(
            survey_id=str(doc["surveyId"]),
            version=int(doc["version"]),
            current_index=int(doc["currentIndex"]),
            answer_stack=stack,
            started_at=parse_utc_ms(doc["startedAt"]),
            status=str(doc["status"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DefinitionFormatError(f"broken session document: {exc}") from exc

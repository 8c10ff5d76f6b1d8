"""Shared fixtures: the shipped definition, random generators for
definitions and payloads, and a ready-to-use service client."""
from __future__ import annotations

import json
import random
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from emahub import defaults, flows
from emahub.config import ServiceConfig
from emahub.service import create_app
from emahub.timeutil import format_utc_ms

API_KEY_ID = "watch"
API_SECRET = "s3cret-for-tests-0001"
API_HEADER = {"X-Api-Key": f"{API_KEY_ID}.{API_SECRET}"}


@pytest.fixture
def definition() -> flows.SurveyDefinition:
    return defaults.example_definition()


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)


# ---------------------------------------------------------------------------
# Random definition generators


def random_valid_definition(rng: random.Random, max_questions: int = 12,
                            survey_id: str = "random-survey") -> flows.SurveyDefinition:
    """Acyclic, fully reachable definition built from a random forward tree
    plus random forward filler edges."""
    n = rng.randint(1, max_questions)
    slot_counts = [rng.randint(2, 4) for _ in range(n)]
    targets: list[list[int | None]] = [[None] * k for k in slot_counts]
    # spanning structure: every question i >= 1 gets one incoming edge from
    # an earlier question with a free slot
    for i in range(1, n):
        parents = [j for j in range(i) if any(t is None for t in targets[j])]
        j = rng.choice(parents)
        free = [s for s, t in enumerate(targets[j]) if t is None]
        targets[j][rng.choice(free)] = i
    # fill the rest with forward edges or END
    for i in range(n):
        for s, t in enumerate(targets[i]):
            if t is None:
                choices = list(range(i + 1, n)) + [flows.END]
                targets[i][s] = rng.choice(choices)
    questions = tuple(
        flows.Question(
            title=f"Question {i}?",
            options=tuple(f"Option {i}.{s}" for s in range(slot_counts[i])),
            icons=tuple(f"icon-{i}-{s}" for s in range(slot_counts[i])),
            next_question=tuple(targets[i]),
            identifier=f"q-{i}",
        )
        for i in range(n)
    )
    return flows.SurveyDefinition(survey_id=survey_id, version=1, questions=questions)


def random_arbitrary_definition(rng: random.Random,
                                max_questions: int = 12) -> flows.SurveyDefinition:
    """Structurally well-formed definition whose edges are unconstrained, so
    unreachable questions and cycles happen freely."""
    n = rng.randint(1, max_questions)
    questions = []
    for i in range(n):
        k = rng.randint(2, 4)
        questions.append(flows.Question(
            title=f"Question {i}?",
            options=tuple(f"Option {i}.{s}" for s in range(k)),
            icons=tuple(f"icon-{i}-{s}" for s in range(k)),
            next_question=tuple(rng.choice(list(range(n)) + [flows.END])
                                for _ in range(k)),
            identifier=f"q-{i}",
        ))
    return flows.SurveyDefinition(survey_id="arbitrary", version=1,
                                  questions=tuple(questions))


def random_walk(rng: random.Random, definition: flows.SurveyDefinition) -> list[int]:
    """Option indices of one random root-to-END traversal."""
    choices = []
    index = 0
    while index != flows.END:
        question = definition.questions[index]
        pick = rng.randrange(len(question.options))
        choices.append(pick)
        index = question.next_question[pick]
    return choices


# ---------------------------------------------------------------------------
# Payload generation


def answers_for_path(definition: flows.SurveyDefinition,
                     path: list[int]) -> dict[str, str]:
    answers = {}
    index = 0
    for pick in path:
        question = definition.questions[index]
        answers[question.identifier] = question.options[pick]
        index = question.next_question[pick]
    assert index == flows.END
    return answers


def random_payload(rng: random.Random, definition: flows.SurveyDefinition,
                   participant_id: str, base_ms: int = 1_614_585_600_000,
                   ) -> dict:
    """One valid response payload on a random path with a random snapshot."""
    path = random_walk(rng, definition)
    submitted = base_ms + rng.randrange(0, 30 * 86_400_000)
    started = submitted - rng.randrange(1_000, 120_000)
    payload = {
        "participantId": participant_id,
        "surveyId": definition.survey_id,
        "surveyVersion": definition.version,
        "startedAt": format_utc_ms(started),
        "submittedAt": format_utc_ms(submitted),
        "answers": answers_for_path(definition, path),
    }
    physio = {}
    if rng.random() < 0.8:
        physio["heartRate"] = round(rng.uniform(40, 180), 1)
    if rng.random() < 0.6:
        physio["stepCount"] = rng.randrange(0, 30_000)
    if rng.random() < 0.5:
        physio["latitude"] = round(rng.uniform(-90, 90), 6)
        physio["longitude"] = round(rng.uniform(-180, 180), 6)
    if rng.random() < 0.3:
        physio["weight"] = round(rng.uniform(45, 110), 1)
        physio["height"] = round(rng.uniform(1.4, 2.1), 2)
    if rng.random() < 0.3:
        physio["basalEnergy"] = round(rng.uniform(800, 3000), 1)
    if physio:
        payload["physiological"] = physio
    if rng.random() < 0.4:
        payload["deviceInfo"] = f"test-watch-{rng.randrange(10)}"
    return payload


# ---------------------------------------------------------------------------
# Service harness


def write_service_files(data_dir: Path, definition: flows.SurveyDefinition,
                        rate_per_hour: int = 60) -> ServiceConfig:
    data_dir.mkdir(parents=True, exist_ok=True)
    surveys = data_dir / "surveys"
    surveys.mkdir(exist_ok=True)
    (surveys / f"{definition.survey_id}.json").write_bytes(
        flows.definition_to_bytes(definition))
    (data_dir / "keys.json").write_text(json.dumps({"keys": [
        {"keyId": API_KEY_ID, "secret": API_SECRET,
         "ratePerHour": rate_per_hour, "enabled": True},
    ]}), "utf-8")
    return ServiceConfig(data_dir=data_dir)


class ServiceHarness:
    """A TestClient plus the backing state, with participant helpers."""

    def __init__(self, tmp_path: Path, definition: flows.SurveyDefinition,
                 rate_per_hour: int = 60, clock_ms=None):
        self.config = write_service_files(tmp_path / "data", definition,
                                          rate_per_hour)
        kwargs = {"eligibility": defaults.example_eligibility()}
        if clock_ms is not None:
            kwargs["clock_ms"] = clock_ms
        self.app = create_app(self.config, **kwargs)
        self.state = self.app.state.hub
        self.client = TestClient(self.app)
        self.definition = definition

    def enroll(self, email: str, signature: str = "Signed Tester",
               password: str = "long-enough-password") -> str:
        """register -> screen eligible -> consent; returns the random id."""
        created = self.client.post("/api/v1/participants", headers=API_HEADER,
                                   json={"email": email, "password": password})
        assert created.status_code == 201, created.text
        pid = created.json()["participantId"]
        screened = self.client.post(
            f"/api/v1/participants/{pid}/screening", headers=API_HEADER,
            json={"answers": {"age": 30, "owns-compatible-watch": "Yes"}})
        assert screened.status_code == 200, screened.text
        assert screened.json()["eligibility"] == "eligible"
        consented = self.client.post(
            f"/api/v1/participants/{pid}/consent", headers=API_HEADER,
            json={"signatureName": signature, "documentVersion": "1"})
        assert consented.status_code == 200, consented.text
        return pid


@pytest.fixture
def harness(tmp_path, definition) -> ServiceHarness:
    return ServiceHarness(tmp_path, definition)

"""Authenticated HTTP surface: serves survey definitions, ingests responses,
and manages participant lifecycle.

Every endpoint authenticates the ``X-Api-Key: <keyId>.<secret>`` header
before anything else touches the store. Error bodies are always
``{"error": <code>, "violations": [...]}``. Response submission order:
auth (401) -> idempotent replay -> rate limit (429) -> payload validation
(422) -> definition version agreement (409) -> path validation (422) ->
durable append (201).
"""
from __future__ import annotations

import logging
import threading
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Header, Request
from fastapi.responses import JSONResponse, Response

from . import flows, responses as responses_mod
from .config import ServiceConfig
from .keys import ApiKey, KeyStore
from .ratelimit import SlidingWindowLimiter
from .registry import ParticipantRegistry, RegistryError
from .store import StreamStore
from .timeutil import format_utc_ms, now_ms, parse_utc_ms

log = logging.getLogger(__name__)

_REGISTRY_STATUS = {
    "duplicateEmail": 409,
    "weakPassword": 422,
    "invalidEmail": 422,
    "unknownParticipant": 404,
    "alreadyScreened": 409,
    "notEligible": 409,
    "alreadyConsented": 409,
    "noConsent": 409,
    "registryError": 400,
}


class ApiError(Exception):
    def __init__(self, status: int, code: str,
                 violations: list[dict[str, str]] | None = None):
        super().__init__(code)
        self.status = status
        self.code = code
        self.violations = violations or []


def load_definitions(surveys_dir: Path) -> dict[str, flows.SurveyDefinition]:
    """Load and validate every definition document under ``surveys_dir``."""
    definitions: dict[str, flows.SurveyDefinition] = {}
    if not surveys_dir.exists():
        return definitions
    for path in sorted(surveys_dir.glob("*.json")):
        definition = flows.load_definition_file(path)
        violations = flows.validate_definition(definition)
        if violations:
            raise flows.InvalidDefinitionError(violations)
        definitions[definition.survey_id] = definition
    return definitions


class ServiceState:
    """Everything the routes need, shared across requests."""

    def __init__(self, config: ServiceConfig, eligibility=None, clock_ms=now_ms):
        self.config = config
        self.clock_ms = clock_ms
        self.store = StreamStore(config.data_dir)
        self.keystore = KeyStore.load(config.resolved_keystore())
        self.registry = ParticipantRegistry(config.data_dir)
        self.limiter = SlidingWindowLimiter()
        self.definitions = load_definitions(config.resolved_surveys_dir())
        self.definition_bytes = {
            survey_id: flows.definition_to_bytes(d)
            for survey_id, d in self.definitions.items()
        }
        self.eligibility = eligibility
        self._idempotency: dict[tuple[str, str], dict[str, Any]] = {}
        self._idempotency_lock = threading.Lock()
        self._reload_idempotency()

    def _reload_idempotency(self) -> None:
        for record in self.store.query_all("responses"):
            token = record.body.get("idempotencyKey")
            if token:
                receipt = {"responseId": record.record_id,
                           "storedAt": record.body.get("storedAt",
                                                       format_utc_ms(record.timestamp))}
                self._idempotency[(record.body.get("_keyId", ""), token)] = receipt

    def replay(self, key_id: str, token: str) -> dict[str, Any] | None:
        with self._idempotency_lock:
            return self._idempotency.get((key_id, token))

    def remember(self, key_id: str, token: str, receipt: dict[str, Any]) -> None:
        with self._idempotency_lock:
            self._idempotency[(key_id, token)] = receipt


def create_app(config: ServiceConfig, eligibility=None, clock_ms=now_ms) -> FastAPI:
    state = ServiceState(config, eligibility=eligibility, clock_ms=clock_ms)

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        yield
        state.store.close()

    app = FastAPI(title="emahub", docs_url=None, redoc_url=None, openapi_url=None,
                  lifespan=lifespan)
    app.state.hub = state

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError) -> JSONResponse:
        return JSONResponse(status_code=exc.status,
                            content={"error": exc.code, "violations": exc.violations})

    def authenticate(header_value: str | None) -> ApiKey:
        key = state.keystore.authenticate(header_value)
        if key is None:
            raise ApiError(401, "unauthorized")
        return key

    async def read_json(request: Request) -> Any:
        try:
            return await request.json()
        except Exception:
            raise ApiError(422, "invalidPayload", [
                {"code": "badJson", "field": "", "message": "body is not valid JSON"}])

    @app.get("/api/v1/surveys/{survey_id}")
    async def get_survey(survey_id: str,
                         x_api_key: str | None = Header(default=None)) -> Response:
        authenticate(x_api_key)
        payload = state.definition_bytes.get(survey_id)
        if payload is None:
            raise ApiError(404, "notFound")
        return Response(content=payload, media_type="application/json")

    @app.post("/api/v1/responses", status_code=201)
    async def post_response(request: Request,
                            x_api_key: str | None = Header(default=None),
                            idempotency_key: str | None = Header(default=None)):
        key = authenticate(x_api_key)

        if idempotency_key:
            replayed = state.replay(key.key_id, idempotency_key)
            if replayed is not None:
                return JSONResponse(status_code=200, content=replayed)

        # Every fresh authenticated submission consumes quota, valid or not;
        # replays above deliberately do not, so retries cannot starve a client.
        if not state.limiter.check(key.key_id, key.rate_per_hour, state.clock_ms()):
            raise ApiError(429, "rateLimited")

        doc = await read_json(request)

        survey_id = doc.get("surveyId") if isinstance(doc, dict) else None
        definition = state.definitions.get(survey_id) if isinstance(survey_id, str) else None
        if definition is None:
            raise ApiError(422, "invalidPayload", [
                {"code": "unknownSurvey", "field": "surveyId",
                 "message": f"no survey {survey_id!r}"}])

        version = doc.get("surveyVersion")
        if isinstance(version, int) and not isinstance(version, bool) \
                and version >= 1 and version != definition.version:
            raise ApiError(409, "versionMismatch")

        checked = responses_mod.validate_payload(doc, definition)
        if not checked.ok:
            raise ApiError(422, "invalidPayload",
                           [v.to_dict() for v in checked.violations])
        body = checked.body

        participant = state.registry.find(body["participantId"])
        if participant is None:
            raise ApiError(422, "invalidPayload", [
                {"code": "unknownParticipant", "field": "participantId",
                 "message": "participant is not registered"}])
        if not participant.consented:
            raise ApiError(422, "invalidPayload", [
                {"code": "noConsent", "field": "participantId",
                 "message": "participant has not recorded consent"}])

        stored_at = format_utc_ms(state.clock_ms())
        body["storedAt"] = stored_at
        body["_keyId"] = key.key_id
        if idempotency_key:
            body["idempotencyKey"] = idempotency_key
        record_id = state.store.append("responses", parse_utc_ms(body["submittedAt"]),
                                       body)
        receipt = {"responseId": record_id, "storedAt": stored_at}
        if idempotency_key:
            state.remember(key.key_id, idempotency_key, receipt)
        return receipt

    # -- participant lifecycle ------------------------------------------------

    def registry_call(fn, *args):
        try:
            return fn(*args)
        except RegistryError as exc:
            raise ApiError(_REGISTRY_STATUS.get(exc.code, 400), exc.code)

    @app.post("/api/v1/participants", status_code=201)
    async def register(request: Request,
                       x_api_key: str | None = Header(default=None)):
        authenticate(x_api_key)
        doc = await read_json(request)
        email = doc.get("email") if isinstance(doc, dict) else None
        password = doc.get("password") if isinstance(doc, dict) else None
        participant = registry_call(state.registry.register, email, password)
        return {"participantId": participant.random_id,
                "eligibility": participant.eligibility}

    @app.post("/api/v1/participants/{participant_id}/screening")
    async def screen(participant_id: str, request: Request,
                     x_api_key: str | None = Header(default=None)):
        authenticate(x_api_key)
        doc = await read_json(request)
        answers = doc.get("answers") if isinstance(doc, dict) else None
        if not isinstance(answers, dict):
            raise ApiError(422, "invalidPayload", [
                {"code": "badAnswers", "field": "answers",
                 "message": "must be an object"}])
        rules = state.eligibility or []
        participant = registry_call(state.registry.screen, participant_id,
                                    answers, rules)
        return {"eligibility": participant.eligibility,
                "failedPredicates": participant.failed_predicates}

    @app.post("/api/v1/participants/{participant_id}/consent")
    async def consent(participant_id: str, request: Request,
                      x_api_key: str | None = Header(default=None)):
        authenticate(x_api_key)
        doc = await read_json(request)
        signature = doc.get("signatureName") if isinstance(doc, dict) else None
        version = doc.get("documentVersion") if isinstance(doc, dict) else None
        if not isinstance(signature, str) or not signature.strip():
            raise ApiError(422, "invalidPayload", [
                {"code": "badSignature", "field": "signatureName",
                 "message": "must be a non-empty string"}])
        participant = registry_call(state.registry.record_consent, participant_id,
                                    signature, str(version or "1"), state.clock_ms())
        _, receipt_hash = state.registry.consent_receipt(participant_id)
        return {"signedAt": participant.consent["signedAt"],
                "receiptHash": receipt_hash}

    @app.post("/api/v1/participants/{participant_id}/onboarding")
    async def onboarding(participant_id: str, request: Request,
                         x_api_key: str | None = Header(default=None)):
        authenticate(x_api_key)
        doc = await read_json(request)
        answers = doc.get("answers") if isinstance(doc, dict) else None
        if not isinstance(answers, dict):
            raise ApiError(422, "invalidPayload", [
                {"code": "badAnswers", "field": "answers",
                 "message": "must be an object"}])
        registry_call(state.registry.record_onboarding, participant_id, answers)
        return {"stored": True}

    @app.post("/api/v1/participants/{participant_id}/push-token")
    async def push_token(participant_id: str, request: Request,
                         x_api_key: str | None = Header(default=None)):
        authenticate(x_api_key)
        doc = await read_json(request)
        token = doc.get("token") if isinstance(doc, dict) else None
        if not isinstance(token, str) or not token.strip():
            raise ApiError(422, "invalidPayload", [
                {"code": "badToken", "field": "token",
                 "message": "must be a non-empty string"}])
        registry_call(state.registry.register_push_token, participant_id, token)
        return {"stored": True}

    return app

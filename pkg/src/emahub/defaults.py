"""Shipped example study: the comfort survey flow, notification rules, and
eligibility predicates used by the docs, demos, and tests.

The thermal-preference and location questions carry the canonical option
sets; the clothing, air-movement, and activity option texts are illustrative
placeholders that a study team is expected to replace.
"""
from __future__ import annotations

from .flows import END, Question, SurveyDefinition
from .notify import NotificationRule, rule_from_dict
from .registry import Predicate

SURVEY_ID = "comfort-study"


def example_definition() -> SurveyDefinition:
    return SurveyDefinition(
        survey_id=SURVEY_ID,
        version=1,
        questions=(
            Question(
                title="How would you prefer to be?",
                options=("Cooler", "No Change", "Warmer"),
                icons=("tp-cooler", "comfortable", "tp-warmer"),
                next_question=(1, 1, 1),
                identifier="tc-preference",
            ),
            Question(
                title="Where are you?",
                options=("Home", "Office", "Vehicle", "Other"),
                icons=("loc-home", "loc-office", "loc-vehicle", "loc-other"),
                next_question=(2, 2, 2, 2),
                identifier="location-place",
            ),
            Question(
                title="Are you?",
                options=("Indoors", "Outdoors"),
                icons=("loc-indoor", "loc-outdoor"),
                next_question=(3, 3),
                identifier="location-inout",
            ),
            Question(
                title="What are you wearing?",
                options=("Light clothing", "Medium clothing", "Heavy clothing"),
                icons=("clo-light", "clo-medium", "clo-heavy"),
                next_question=(4, 4, 4),
                identifier="clothing",
            ),
            Question(
                title="Can you perceive air movement?",
                options=("Yes", "No"),
                icons=("air-yes", "air-no"),
                next_question=(5, 5),
                identifier="air-movement",
            ),
            Question(
                title="What are you doing?",
                options=("Sitting", "Standing", "Walking", "Exercising"),
                icons=("act-sit", "act-stand", "act-walk", "act-exercise"),
                next_question=(END, END, END, END),
                identifier="activity",
            ),
        ),
    )


def example_rules() -> list[NotificationRule]:
    return [
        rule_from_dict({
            "ruleId": "ten-per-day",
            "kind": "scheduled",
            "message": "Quick comfort check: how do you feel right now?",
            "enabled": True,
            "scheduled": {
                "timesPerDay": 10,
                "wakingStart": "08:00",
                "wakingEnd": "22:00",
                "timezone": "America/New_York",
            },
        }),
        rule_from_dict({
            "ruleId": "office-heat",
            "kind": "conditional",
            "message": "Your office is getting warm. How comfortable are you?",
            "enabled": True,
            "conditional": {
                "locationLabel": "Office",
                "tempThresholdC": 28.0,
                "direction": "above",
                "cooldownMinutes": 60,
            },
        }),
    ]


def example_rules_doc() -> dict:
    return {
        "rules": [
            {
                "ruleId": "ten-per-day",
                "kind": "scheduled",
                "message": "Quick comfort check: how do you feel right now?",
                "enabled": True,
                "scheduled": {
                    "timesPerDay": 10,
                    "wakingStart": "08:00",
                    "wakingEnd": "22:00",
                    "timezone": "America/New_York",
                },
            },
            {
                "ruleId": "office-heat",
                "kind": "conditional",
                "message": "Your office is getting warm. How comfortable are you?",
                "enabled": True,
                "conditional": {
                    "locationLabel": "Office",
                    "tempThresholdC": 28.0,
                    "direction": "above",
                    "cooldownMinutes": 60,
                },
            },
        ]
    }


def example_eligibility() -> list[Predicate]:
    # Illustrative defaults; studies swap these without code changes.
    return [
        Predicate(field="age", op="ge", value=21),
        Predicate(field="owns-compatible-watch", op="eq", value="Yes"),
    ]

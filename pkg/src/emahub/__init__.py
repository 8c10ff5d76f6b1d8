"""emahub: self-hostable backend for right-here-right-now comfort surveys.

Serves branching survey flows over an authenticated HTTP API, ingests
timestamped responses with physiological snapshots into append-only streams,
imports environmental logger CSVs, fuses the two by location and time, and
drives scheduled and condition-triggered participant notifications.
"""

from .flows import (
    END,
    InvalidDefinitionError,
    Question,
    SurveyDefinition,
    SurveySession,
    Violation,
    abort,
    back,
    enumerate_paths,
    start_session,
    step,
    validate_definition,
)
from .store import StreamRecord, StreamStore

__version__ = "0.1.0"

__all__ = [
    "END",
    "InvalidDefinitionError",
    "Question",
    "StreamRecord",
    "StreamStore",
    "SurveyDefinition",
    "SurveySession",
    "Violation",
    "abort",
    "back",
    "enumerate_paths",
    "start_session",
    "step",
    "validate_definition",
    "__version__",
]

"""Benchmark evaluation split across a client/server protocol.

Prompts flow out, model outputs flow in; ground truth and evaluation logic
never leave the benchmark server. See README.md for the tour.
"""

__version__ = "0.1.0"

from .protocol import (  # noqa: F401
    DatasetCard,
    EvaluationReport,
    LifecycleState,
    ModelCard,
    PredictionRecord,
    ProtocolError,
    RetryClass,
    SampleEnvelope,
    classify_status,
    decode_message,
    encode_message,
    new_evaluation_id,
    validate_transition,
)

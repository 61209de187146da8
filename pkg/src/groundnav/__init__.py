"""Desk-scale grounded navigation guidance stack."""

from .config import LossWeights, ModelConfig
from .grammar import (
    DistanceEntry,
    GroundedPhrase,
    StructuredResponse,
    ValidationReport,
    parse_response,
    serialize_response,
    validate_response,
)
from .ontology import AccessibilityOntology

__version__ = "0.1.0"

__all__ = [
    "AccessibilityOntology",
    "DistanceEntry",
    "GroundedPhrase",
    "LossWeights",
    "ModelConfig",
    "StructuredResponse",
    "ValidationReport",
    "parse_response",
    "serialize_response",
    "validate_response",
    "__version__",
]

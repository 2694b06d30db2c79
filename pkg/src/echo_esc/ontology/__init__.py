from .core import (
    Ontology,
    OntologySource,
    ValidationReport,
    Violation,
    ViolationCode,
    available_fixtures,
    check_matches,
    load_fixture,
    load_ontology_file,
    relabel,
    save_ontology_file,
    sqrt_heuristic,
    validate_ontology,
)
from .prompt import PromptText, build_prompt, parse_reply
from .provider import API_KEY_ENV, ChatCompletionClient, generate_ontology

__all__ = [
    "API_KEY_ENV",
    "ChatCompletionClient",
    "Ontology",
    "OntologySource",
    "PromptText",
    "ValidationReport",
    "Violation",
    "ViolationCode",
    "available_fixtures",
    "build_prompt",
    "check_matches",
    "generate_ontology",
    "load_fixture",
    "load_ontology_file",
    "parse_reply",
    "relabel",
    "save_ontology_file",
    "sqrt_heuristic",
    "validate_ontology",
]

"""Python access to the circles core: metrics, retrieval and the mock stack."""

import json as _json

from ._circles import (
    ConfigError,
    EmbeddingStore,
    _generate_world,
    _run_mock,
    MissingEmbedding,
    PreconditionError,
    allocate_budget,
    classification_metrics,
    count_demonstrations,
    exact_match,
    method_names,
    mock_embed,
    normalize,
    normalize_answer,
    word_f1,
)


def generate_world(**config):
    """Mock world as {"schema", "train", "queries"}; keys follow the config file."""
    return _json.loads(_generate_world(_json.dumps(config)))


def run_mock(config=None):
    """Evaluate one method on the in-process mock stack.

    `config` uses the same layout as the JSON run config. Returns aggregates
    plus per-query rows.
    """
    config = dict(config or {})
    config.setdefault("mock", {})
    return _json.loads(_run_mock(_json.dumps(config)))


"""Learn single-token labels for binary features by descending over the vocabulary."""

from ._tokenlabel import (
    CapabilityError,
    Corpus,
    Error,
    ParseError,
    TransportError,
    bce,
    entropy,
    kl,
    load_corpus,
    parse_corpus,
    run,
    softmax,
    split_tokens,
    validate,
)

__all__ = [
    "CapabilityError",
    "Corpus",
    "Error",
    "ParseError",
    "TransportError",
    "bce",
    "entropy",
    "kl",
    "load_corpus",
    "parse_corpus",
    "run",
    "softmax",
    "split_tokens",
    "validate",
]

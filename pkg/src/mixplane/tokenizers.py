"""Tiny pluggable tokenizers for the token-level processing mode.

Real trainings bring their own tokenizer; these two exist so the pipeline
can be exercised and tested without external models. Both are pure
functions of the input text, so token streams are reproducible anywhere.
"""

from __future__ import annotations

from typing import Callable, Protocol

from .seeding import stable_hash


class Tokenizer(Protocol):
    name: str

    def encode(self, text: str) -> list[int]: ...


class WhitespaceTokenizer:
    """Splits on whitespace and hashes each token into a fixed id space."""

    name = "whitespace"

    def __init__(self, vocab_size: int = 32768):
        self.vocab_size = int(vocab_size)

    def encode(self, text: str) -> list[int]:
        return [stable_hash("tok", piece) % self.vocab_size for piece in text.split()]


class ByteTokenizer:
    """UTF-8 bytes as token ids (vocabulary of 256)."""

    name = "byte"
    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))


_FACTORIES: dict[str, Callable[[], Tokenizer]] = {
    "whitespace": WhitespaceTokenizer,
    "byte": ByteTokenizer,
}


def get_tokenizer(name: str) -> Tokenizer:
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(
            f"unknown tokenizer {name!r}; available: {sorted(_FACTORIES)}"
        ) from None
    return factory()

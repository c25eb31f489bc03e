"""Whitespace word-level vocabulary over the closed synthetic lexicon."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import lexicon

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>")
DEFAULT_SIZE = 256


@dataclass(frozen=True)
class TokenSeq:
    """Immutable id sequence; the unit all models and parsers exchange."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def content_ids(self) -> tuple[int, ...]:
        """Ids with reserved tokens stripped."""
        return tuple(i for i in self.ids if i > SEP)


class Vocabulary:
    """Bijective token <-> id mapping with fixed reserved ids 0-3."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:4]) != list(RESERVED):
            raise ValueError(f"first four tokens must be {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens break the bijection")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def default(cls, size: int = DEFAULT_SIZE) -> "Vocabulary":
        """Reserved ids, the lexicon, then unused filler up to ``size``."""
        words = lexicon.all_lexicon_words()
        tokens = list(RESERVED) + words
        if len(tokens) > size:
            raise ValueError(f"lexicon has {len(tokens)} tokens, over the {size} budget")
        tokens += [f"<unused-{k}>" for k in range(size - len(tokens))]
        return cls(tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        if token not in self._ids:
            raise KeyError(f"token {token!r} not in vocabulary")
        return self._ids[token]

    def word_of(self, i: int) -> str:
        if not 0 <= i < len(self._tokens):
            raise IndexError(f"id {i} out of range for vocabulary of {len(self._tokens)}")
        return self._tokens[i]

    def encode_words(self, words: list[str]) -> TokenSeq:
        return TokenSeq(tuple(self.id_of(w) for w in words))

    def encode_text(self, text: str) -> TokenSeq:
        return self.encode_words(text.split())

    def decode(self, ids) -> list[str]:
        return [self.word_of(int(i)) for i in ids]

    def decode_text(self, ids) -> str:
        """Content words only, joined by spaces."""
        return " ".join(self.word_of(int(i)) for i in ids if int(i) > SEP)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens)

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from depass_lab.exceptions import InputError, TokenizationError

BOS_ID = 0
BOS_TOKEN = '<bos>'


@dataclass(frozen=True)
class Vocab:
    """Whitespace vocabulary for fixtures: id = position, id 0 is BOS."""
    tokens: tuple

    def __post_init__(self):
        if not self.tokens or self.tokens[BOS_ID] != BOS_TOKEN:
            raise InputError(f"Vocabulary must start with {BOS_TOKEN!r}.")
        seen = set()
        for token in self.tokens:
            if not token or any(ch.isspace() for ch in token):
                raise InputError(f"Vocabulary entry {token!r} is empty or contains whitespace.")
            if token in seen:
                raise InputError(f"Duplicate vocabulary entry {token!r}.")
            seen.add(token)

    def __len__(self):
        return len(self.tokens)

    @cached_property
    def ids(self):
        return {token: index for index, token in enumerate(self.tokens)}

    @classmethod
    def load(cls, path):
        try:
            lines = Path(path).read_text(encoding='utf-8').splitlines()
        except OSError as exc:
            raise InputError(f"Cannot read vocabulary {path}: {exc}") from exc
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                raise InputError(f"Vocabulary {path} line {number} is blank; ids follow line numbers.")
        return cls(tuple(lines))

    def dump(self):
        return '\n'.join(self.tokens) + '\n'


def tokenize(text, vocab):
    """BOS followed by the id of every whitespace-separated word."""
    ids = [BOS_ID]
    for word in text.split():
        try:
            ids.append(vocab.ids[word])
        except KeyError:
            raise TokenizationError(f"Word {word!r} is not in the vocabulary.") from None
    return ids


def detokenize(ids, vocab):
    words = []
    for token_id in ids:
        if token_id == BOS_ID:
            continue
        if not 0 <= token_id < len(vocab):
            raise TokenizationError(f"Token id {token_id} is outside the vocabulary.")
        words.append(vocab.tokens[token_id])
    return ' '.join(words)

"""Lower-case whitespace+punctuation tokenizer and a persisted vocabulary."""
from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from gridslide._io import atomic_write_text
from gridslide.errors import ConfigError, DataError

_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def as_tokens(text: str | Sequence[str]) -> list[str]:
    return tokenize(text) if isinstance(text, str) else list(text)


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the special tokens " + " ".join(SPECIALS))
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("duplicate vocabulary entries")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 512) -> "Vocab":
        counts = Counter(t for text in texts for t in tokenize(text))
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        room = max_size - len(SPECIALS)
        if room < 0:
            raise ConfigError("max_size smaller than the special-token set")
        return cls(list(SPECIALS) + ranked[:room])

    def encode(self, text: str, max_len: int | None = None, add_bos: bool = True, add_eos: bool = True) -> list[int]:
        ids = [self.index.get(t, self.unk_id) for t in tokenize(text)]
        ids = ([self.bos_id] if add_bos else []) + ids + ([self.eos_id] if add_eos else [])
        if max_len is not None and len(ids) > max_len:
            ids = ids[: max_len - 1] + ([self.eos_id] if add_eos else [ids[max_len - 1]])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.tokens[i])
        return " ".join(out)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])

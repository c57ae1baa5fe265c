"""Word-level tokenizer with fixed special-token ids.

Special ids never move: ``<pad>``=0, ``<bos>``=1, ``<eos>``=2, ``<unk>``=3,
``[SCORING]``=4, ``[CRITIQUE]``=5. Ordinary words follow in the order of the
vocabulary file (one token per line, id = line number).
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, UNK, SCORING, CRITIQUE = "<pad>", "<bos>", "<eos>", "<unk>", "[SCORING]", "[CRITIQUE]"
SPECIALS = (PAD, BOS, EOS, UNK, SCORING, CRITIQUE)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, SCORING_ID, CRITIQUE_ID = range(6)

_WORD = re.compile(r"[A-Za-z0-9']+|[^\sA-Za-z0-9']")
_NO_SPACE_BEFORE = {".", ",", ":", ";"}


def split_words(text: str) -> list[str]:
    return _WORD.findall(text)


class Tokenizer:
    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens in their fixed order")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words: set[str] = set()
        for t in texts:
            words.update(split_words(t))
        return cls(list(SPECIALS) + sorted(words - set(SPECIALS)))

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in split_words(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        parts: list[str] = []
        for i in ids:
            i = int(i)
            if skip_special and i < len(SPECIALS):
                continue
            w = self.tokens[i] if 0 <= i < len(self.tokens) else UNK
            if parts and w not in _NO_SPACE_BEFORE:
                parts.append(" ")
            parts.append(w)
        return "".join(parts)

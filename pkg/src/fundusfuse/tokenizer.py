"""Greedy longest-match subword tokenizer over a plain-text vocabulary file."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import MissingFile

PAD, UNK, BOS, EOS = "[PAD]", "[UNK]", "[BOS]", "[EOS]"
SPECIALS = (PAD, UNK, BOS, EOS)
# BERT-style vocabularies name the begin/end markers differently
ALIASES = {PAD: (PAD,), UNK: (UNK,), BOS: (BOS, "[CLS]"), EOS: (EOS, "[SEP]")}
CONTINUATION = "##"
_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class TokenizedText:
    ids: np.ndarray   # (max_tokens,) int64
    mask: np.ndarray  # (max_tokens,) bool, True on real tokens


class Tokenizer:
    def __init__(self, vocab: list[str], max_tokens: int = 128):
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate vocabulary entries")
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.max_tokens = max_tokens
        special_ids = []
        for name in SPECIALS:
            found = [self.index[a] for a in ALIASES[name] if a in self.index]
            if not found:
                raise ValueError(f"vocabulary lacks special token {name}")
            special_ids.append(found[0])
        self.pad_id, self.unk_id, self.bos_id, self.eos_id = special_ids
        self._hidden = {self.pad_id, self.bos_id}

    def __len__(self) -> int:
        return len(self.vocab)

    @classmethod
    def load(cls, path, max_tokens: int = 128) -> "Tokenizer":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"vocabulary file not found: {path}")
        vocab = [line.rstrip("\n") for line in path.read_text().splitlines() if line.strip()]
        return cls(vocab, max_tokens)

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.vocab))

    @classmethod
    def build(cls, corpus: Iterable[str], max_tokens: int = 128) -> "Tokenizer":
        """Whole words of ``corpus`` plus single-character pieces for fallback splitting."""
        words = sorted({w for text in corpus for w in split_words(text)})
        chars = list(string.ascii_lowercase + string.digits)
        pieces = chars + [CONTINUATION + c for c in chars] + list(".,;:-()/")
        vocab = list(SPECIALS)
        for tok in words + pieces:
            if tok not in vocab:
                vocab.append(tok)
        return cls(vocab, max_tokens)

    def word_pieces(self, word: str) -> list[int]:
        if word in self.index:
            return [self.index[word]]
        ids, start = [], 0
        while start < len(word):
            end = len(word)
            found = None
            while end > start:
                piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
                if piece in self.index:
                    found = self.index[piece]
                    break
                end -= 1
            if found is None:
                return [self.unk_id]
            ids.append(found)
            start = end
        return ids

    def encode(self, text: str) -> list[int]:
        """Unpadded ids with begin/end markers, truncated to ``max_tokens``."""
        body = [i for w in split_words(text) for i in self.word_pieces(w)]
        body = body[: self.max_tokens - 2]
        return [self.bos_id] + body + [self.eos_id]

    def __call__(self, text: str) -> TokenizedText:
        ids = self.encode(text)
        padded = np.full(self.max_tokens, self.pad_id, dtype=np.int64)
        padded[: len(ids)] = ids
        return TokenizedText(padded, padded != self.pad_id)

    def decode(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        for i in ids:
            i = int(i)
            if i in self._hidden:
                continue
            if i == self.eos_id:
                break
            tok = self.vocab[i]
            if tok.startswith(CONTINUATION) and words:
                words[-1] += tok[len(CONTINUATION):]
            else:
                words.append(tok)
        return " ".join(words)


def tokenize_text(note: str, tokenizer: Tokenizer) -> TokenizedText:
    return tokenizer(note)

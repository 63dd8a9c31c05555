"""Byte-pair-encoding tokenizer for the paired text tower.

Loads the standard gzip merges vocabulary from the local weight cache. Text is
lowercased and whitespace-normalized; each word is byte-mapped to printable
unicode, merged greedily by rank, and closed with an end-of-word marker.
"""

from __future__ import annotations

import gzip
import html
from functools import lru_cache
from pathlib import Path

import regex as re

from ..errors import WeightsUnavailableError

SOT_TOKEN = "<|startoftext|>"
EOT_TOKEN = "<|endoftext|>"
CONTEXT_LENGTH = 77

_WORD_PATTERN = re.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    re.IGNORECASE,
)


@lru_cache()
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable-unicode map used by the vocabulary."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def _get_pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return set(zip(word[:-1], word[1:]))


def _clean_text(text: str) -> str:
    text = html.unescape(html.unescape(text))
    return " ".join(text.split()).strip().lower()


class BpeTokenizer:
    """Greedy merge-rank BPE over byte-mapped words, with fixed special tokens."""

    def __init__(self, vocab_path: str | Path):
        vocab_path = Path(vocab_path)
        if not vocab_path.is_file():
            raise WeightsUnavailableError(f"BPE vocabulary not found: {vocab_path}")
        with gzip.open(vocab_path, "rt", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        # first line is a version banner; the standard vocab keeps 48894 merges
        merge_lines = [line for line in lines[1:] if line.strip()]
        if len(merge_lines) > 49152 - 256 - 2:
            merge_lines = merge_lines[: 49152 - 256 - 2]
        merges = [tuple(line.split()) for line in merge_lines]

        self.byte_encoder = bytes_to_unicode()
        vocab = list(self.byte_encoder.values())
        vocab = vocab + [v + "</w>" for v in vocab]
        for merge in merges:
            vocab.append("".join(merge))
        vocab.extend([SOT_TOKEN, EOT_TOKEN])
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.bpe_ranks = {merge: i for i, merge in enumerate(merges)}
        self.cache = {SOT_TOKEN: SOT_TOKEN, EOT_TOKEN: EOT_TOKEN}

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    @property
    def sot_id(self) -> int:
        return self.encoder[SOT_TOKEN]

    @property
    def eot_id(self) -> int:
        return self.encoder[EOT_TOKEN]

    def _bpe(self, token: str) -> str:
        if token in self.cache:
            return self.cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _get_pairs(word)
        if not pairs:
            return token + "</w>"

        while True:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            new_word: list[str] = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _get_pairs(word)
        result = " ".join(word)
        self.cache[token] = result
        return result

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for token in re.findall(_WORD_PATTERN, _clean_text(text)):
            mapped = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[part] for part in self._bpe(mapped).split(" "))
        return ids

    def tokenize(self, text: str, context_length: int = CONTEXT_LENGTH):
        """Token-id row [sot, ..., eot] zero-padded to context_length."""
        import torch

        ids = [self.sot_id] + self.encode(text) + [self.eot_id]
        if len(ids) > context_length:
            ids = ids[: context_length - 1] + [self.eot_id]
        row = torch.zeros(context_length, dtype=torch.long)
        row[: len(ids)] = torch.tensor(ids, dtype=torch.long)
        return row

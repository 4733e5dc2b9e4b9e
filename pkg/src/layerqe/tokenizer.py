"""Byte-level tokenizer with optional learned pair merges.

Ids ``0..255`` are raw bytes, followed by two specials (padding and
begin-of-sequence) and then one id per learned merge. Any text encodes without
out-of-vocabulary failures because every byte has an id.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

from layerqe.artifacts import atomic_write_json
from layerqe.errors import ConfigError, DataFormatError

_logger = logging.getLogger(__name__)

N_BYTES = 256
PAD_ID = 256
BOS_ID = 257
FIRST_MERGE_ID = 258
MAX_VOCAB_SIZE = 4096

Pair = Tuple[int, int]


def pair_counts(ids: Sequence[int]) -> Counter:
    return Counter(zip(ids, ids[1:]))


def apply_merge(ids: Sequence[int], pair: Pair, new_id: int) -> List[int]:
    """Replace every non-overlapping occurrence of ``pair`` (left to right) with ``new_id``."""
    out: List[int] = []
    i = 0
    while i < len(ids):
        if i < len(ids) - 1 and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


class ByteTokenizer:
    """Greedy byte-pair tokenizer.

    Encoding repeatedly applies the earliest-learned merge present in the
    sequence until none applies, the usual byte-pair scheme.
    """

    def __init__(self, merges: Sequence[Pair] = ()):
        self.merges: Dict[Pair, int] = {}
        self.vocab: Dict[int, bytes] = {i: bytes([i]) for i in range(N_BYTES)}
        for offset, (a, b) in enumerate(merges):
            new_id = FIRST_MERGE_ID + offset
            if a not in self.vocab or b not in self.vocab:
                raise ConfigError(f"merge ({a}, {b}) refers to an unknown token id")
            self.merges[(a, b)] = new_id
            self.vocab[new_id] = self.vocab[a] + self.vocab[b]
        if self.vocab_size > MAX_VOCAB_SIZE:
            raise ConfigError(f"vocabulary of {self.vocab_size} exceeds the {MAX_VOCAB_SIZE} limit")

    @property
    def vocab_size(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    @classmethod
    def train(cls, corpus: Iterable[str], vocab_size: int) -> "ByteTokenizer":
        """Learn ``vocab_size - 258`` merges from ``corpus`` (most frequent pair first, ties by id)."""
        if not FIRST_MERGE_ID <= vocab_size <= MAX_VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be in [{FIRST_MERGE_ID}, {MAX_VOCAB_SIZE}], got {vocab_size}")
        sequences = [list(text.encode("utf-8")) for text in corpus]
        merges: List[Pair] = []
        for offset in range(vocab_size - FIRST_MERGE_ID):
            counts: Counter = Counter()
            for seq in sequences:
                counts.update(zip(seq, seq[1:]))
            if not counts:
                break
            best = max(counts.items(), key=lambda kv: (kv[1], -kv[0][0], -kv[0][1]))
            if best[1] < 2:
                break
            pair = best[0]
            new_id = FIRST_MERGE_ID + offset
            sequences = [apply_merge(seq, pair, new_id) for seq in sequences]
            merges.append(pair)
        _logger.info("Learned %d merge(s)", len(merges))
        return cls(merges)

    def encode(self, text: str, *, add_bos: bool = True) -> List[int]:
        ids = list(text.encode("utf-8"))
        while len(ids) >= 2 and self.merges:
            pair = min(pair_counts(ids), key=lambda p: self.merges.get(p, float("inf")))
            if pair not in self.merges:
                break
            ids = apply_merge(ids, pair, self.merges[pair])
        return [BOS_ID, *ids] if add_bos else ids

    def decode(self, ids: Iterable[int]) -> str:
        data = b"".join(self.vocab[i] for i in ids if i not in (PAD_ID, BOS_ID))
        return data.decode("utf-8", errors="replace")

    def to_dict(self) -> Dict[str, object]:
        ordered = sorted(self.merges.items(), key=lambda kv: kv[1])
        return {"type": "byte-bpe", "merges": [list(pair) for pair, _ in ordered]}

    def save(self, path: Path) -> Path:
        return atomic_write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "ByteTokenizer":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls([tuple(pair) for pair in data["merges"]])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataFormatError(f"cannot read tokenizer: {exc}", path=path) from exc

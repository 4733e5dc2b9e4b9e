"""Seeded synthetic datasets for smoke runs and recovery tests.

QE data pairs an invented source sentence with a word-for-word "translation"
in which some words have been swapped for wrong ones; the DA-style score falls
with the fraction of swapped words. Planted dumps hide a linear signal in a
single layer of otherwise random embeddings.
"""

from __future__ import annotations

import logging
from typing import List, Sequence, Tuple

import numpy as np

from layerqe.data import DA_SCORE_RANGE, EmbeddingDump, QESample, Sample, TextSample
from layerqe.errors import ConfigError
from layerqe.transformer import resolve_layer

_logger = logging.getLogger(__name__)

DEFAULT_PAIRS: Tuple[Tuple[str, str], ...] = (
    ("en", "de"),
    ("en", "gu"),
    ("en", "mr"),
    ("en", "ta"),
    ("en", "te"),
    ("et", "en"),
    ("ne", "en"),
    ("si", "en"),
)
DEFAULT_LANGUAGES: Tuple[str, ...] = ("en", "es", "hi", "mr")
TEST_PER_TRAIN = 1000 / 7000

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
LEXICON_SIZE = 60


def _lexicon(rng: np.random.Generator, size: int = LEXICON_SIZE) -> List[str]:
    words: set[str] = set()
    while len(words) < size:
        n_syllables = int(rng.integers(1, 4))
        syllables = (
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syllables)
        )
        words.add("".join(syllables))
    return sorted(words)


def generate_qe_samples(
    n: int,
    *,
    seed: int = 0,
    pairs: Sequence[Tuple[str, str]] = DEFAULT_PAIRS,
    noise: float = 5.0,
    min_words: int = 4,
    max_words: int = 10,
) -> List[QESample]:
    """``n`` QE samples spread round-robin over ``pairs``."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if not pairs:
        raise ConfigError("at least one language pair is required")
    rng = np.random.default_rng(seed)
    languages = sorted({lang for pair in pairs for lang in pair})
    lexicons = {lang: _lexicon(rng) for lang in languages}
    lo, hi = DA_SCORE_RANGE
    samples: List[QESample] = []
    for i in range(n):
        src_lang, tgt_lang = pairs[i % len(pairs)]
        length = int(rng.integers(min_words, max_words + 1))
        idx = rng.integers(LEXICON_SIZE, size=length)
        source = [lexicons[src_lang][k] for k in idx]
        target = [lexicons[tgt_lang][k] for k in idx]
        n_bad = int(rng.integers(0, length + 1))
        for pos in rng.choice(length, size=n_bad, replace=False):
            wrong = (idx[pos] + 1 + int(rng.integers(LEXICON_SIZE - 1))) % LEXICON_SIZE
            target[pos] = lexicons[tgt_lang][wrong]
        score = float(np.clip(hi * (1.0 - n_bad / length) + rng.normal(0.0, noise), lo, hi))
        samples.append(
            QESample(src_lang, tgt_lang, " ".join(source), " ".join(target), round(score, 2), f"{src_lang}-{tgt_lang}")
        )
    _logger.info("Generated %d synthetic QE sample(s) over %d pair(s)", n, len(pairs))
    return samples


def generate_intensity_samples(
    n: int, *, seed: int = 0, languages: Sequence[str] = DEFAULT_LANGUAGES
) -> List[TextSample]:
    """Texts whose [0, 1] score is the share of "intense" words they contain."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    samples: List[TextSample] = []
    lexicons = {lang: _lexicon(rng) for lang in languages}
    for i in range(n):
        lang = languages[i % len(languages)]
        words = lexicons[lang]
        length = int(rng.integers(4, 11))
        idx = rng.integers(LEXICON_SIZE, size=length)
        # the upper half of the lexicon carries the emotion
        score = float(np.mean(idx >= LEXICON_SIZE // 2))
        samples.append(TextSample(lang, " ".join(words[k] for k in idx), round(score, 4), lang))
    return samples


def split_train_test(samples: Sequence[Sample], *, seed: int = 0) -> Tuple[List[Sample], List[Sample]]:
    """Shuffle and hold out one test sample for every seven training samples."""
    if len(samples) < 2:
        raise ConfigError("need at least two samples to split")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_test = max(1, int(round(len(samples) * TEST_PER_TRAIN / (1.0 + TEST_PER_TRAIN))))
    test = [samples[i] for i in sorted(order[:n_test])]
    train = [samples[i] for i in sorted(order[n_test:])]
    return train, test


def planted_dump(
    n: int,
    *,
    layer: int,
    n_layers: int = 8,
    hidden: int = 16,
    noise: float = 0.1,
    seed: int = 0,
    pair_ids: Sequence[str] = ("syn-a", "syn-b"),
) -> EmbeddingDump:
    """Random embeddings for every layer; targets are ``u . h_layer + noise * eps``.

    Only ``layer`` carries signal, so a layer sweep should single it out.
    """
    target_layer = resolve_layer(layer, n_layers)
    rng = np.random.default_rng(seed)
    u = rng.normal(0.0, 1.0, size=hidden) / np.sqrt(hidden)
    embeddings = rng.normal(0.0, 1.0, size=(n, n_layers, hidden))
    targets = embeddings[:, target_layer, :] @ u + noise * rng.normal(0.0, 1.0, size=n)
    pairs = tuple(pair_ids[i % len(pair_ids)] for i in range(n))
    _logger.info("Planted signal at layer %d of %d (%d samples)", target_layer, n_layers, n)
    return EmbeddingDump(tuple(range(n_layers)), n_layers, embeddings.astype(np.float32), targets, pairs)


def split_dump(dump: EmbeddingDump, *, seed: int = 0) -> Tuple[EmbeddingDump, EmbeddingDump]:
    """Train/test halves of a dump, with the same seven-to-one ratio as :func:`split_train_test`."""
    if dump.n_samples < 2:
        raise ConfigError("need at least two samples to split")
    order = np.random.default_rng(seed).permutation(dump.n_samples)
    n_test = max(1, int(round(dump.n_samples * TEST_PER_TRAIN / (1.0 + TEST_PER_TRAIN))))
    return dump.subset(np.sort(order[n_test:])), dump.subset(np.sort(order[:n_test]))

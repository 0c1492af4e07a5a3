"""Deterministic text utilities: token counting, keywords, hashed embeddings.

Embeddings are a hashed bag of keywords projected into a fixed 64-dimension
space and L2-normalized, so they are reproducible without any model files.
"""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache

import numpy as np

EMBED_DIM = 64

_TOKEN_RE = re.compile(r"\S+")
_WORD_RE = re.compile(r"[a-z0-9][a-z0-9'\-]*")
_SPACE_RE = re.compile(r"\s+")

STOPWORDS = frozenset(
    """
    a about above after again against all also am an and any are as at be because been
    before being below between both but by can could did do does doing down during each
    few for from further had has have having he her here hers herself him himself his how
    i if in into is it its itself just let me more most my myself no nor not now of off on
    once only or other our ours ourselves out over own same she should so some such than
    that the their theirs them themselves then there these they this those through to too
    under until up very was we were what when where which while who whom why will with
    would you your yours yourself yourselves said says say told tell asked ask
    """.split()
)


def tokenize(text: str) -> list[str]:
    """Whitespace tokens; the unit in which node weights are counted."""
    return _TOKEN_RE.findall(text)


def token_count(text: str) -> int:
    return max(1, len(_TOKEN_RE.findall(text)))


def keywords(text: str) -> list[str]:
    """Content words in order of first appearance, deduplicated."""
    seen: dict[str, None] = {}
    for word in _WORD_RE.findall(text.lower()):
        word = word.strip("'-")
        if len(word) < 3 or word in STOPWORDS or word.isdigit():
            continue
        seen.setdefault(word, None)
    return list(seen)


@lru_cache(maxsize=65536)
def _bucket(word: str) -> tuple[int, float]:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "little")
    return value % EMBED_DIM, (1.0 if (value >> 32) & 1 else -1.0)


def embed_keywords(words) -> np.ndarray:
    vec = np.zeros(EMBED_DIM)
    for word in words:
        idx, sign = _bucket(word)
        vec[idx] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


def embed(text: str) -> np.ndarray:
    """Hashed binary bag-of-keywords embedding, unit length (zero vector if empty)."""
    return embed_keywords(keywords(text))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def canonical_entity(name: str) -> str:
    """Lowercase and collapse whitespace; no coreference resolution."""
    return _SPACE_RE.sub(" ", name.strip().lower())


def content_hash(text: str, length: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]

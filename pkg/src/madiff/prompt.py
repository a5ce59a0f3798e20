"""Prompt handling: tokenization, mask-prompt extraction and embeddings."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ENDPOINT_ENV = "MADIFF_LLM_ENDPOINT"

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


def tokenize(text: str) -> list[str]:
    """Lowercase and strip punctuation; hyphens inside words survive ("t-shirt")."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class PromptText:
    raw: str

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(tokenize(self.raw))

    @property
    def normalized(self) -> str:
        return " ".join(self.tokens)

    def __str__(self):
        return self.raw


@dataclass(frozen=True)
class MaskPrompt:
    tokens: tuple[str, ...]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    """Embedded conditioning. ``key`` is the normalized source text."""

    vector: np.ndarray
    tokens: tuple[str, ...] = ()

    @property
    def key(self) -> str:
        return " ".join(self.tokens)


class ShapeVocabulary(frozenset):
    pass


def load_vocabulary(path=None) -> ShapeVocabulary:
    if path is None:
        text = resources.files("madiff").joinpath("data/shape_vocab.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    terms = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            terms.add(line.lower())
    if not terms:
        raise ValueError("shape vocabulary is empty")
    return ShapeVocabulary(terms)


class LlmClient:
    """Client for an external mask-prompt service.

    Protocol: POST ``{"prompt": str}`` and receive ``{"mask_prompt": str}``.
    """

    def __init__(self, endpoint: str, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    @classmethod
    def from_config(cls, endpoint=None, timeout=5.0):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        return cls(endpoint, timeout) if endpoint else None

    def mask_prompt(self, prompt: str) -> str:
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        answer = payload.get("mask_prompt") if isinstance(payload, dict) else None
        if not isinstance(answer, str):
            raise ValueError("response lacks a string 'mask_prompt'")
        return answer


def _rule_filter(tokens, vocab):
    return tuple(tok for tok in tokens if tok in vocab)


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(tok in it for tok in sub)


def extract_mask_prompt(prompt, vocab: ShapeVocabulary, client: LlmClient | None = None) -> MaskPrompt:
    """Keep only shape words of ``prompt``.

    A configured client is asked first; its answer is accepted only if it is
    a subsequence of the source tokens. Any client failure falls back to the
    vocabulary filter.
    """
    if isinstance(prompt, MaskPrompt):
        tokens = prompt.tokens
    elif isinstance(prompt, PromptText):
        tokens = prompt.tokens
    else:
        tokens = tuple(tokenize(str(prompt)))
    if client is not None:
        try:
            answer = tuple(tokenize(client.mask_prompt(" ".join(tokens))))
        except (OSError, ValueError, urllib.error.URLError) as exc:
            log.warning("mask-prompt service failed (%s); using vocabulary filter", exc)
        else:
            if _is_subsequence(answer, tokens):
                return MaskPrompt(answer)
            log.warning("mask-prompt service returned tokens outside the prompt; rejected")
    return MaskPrompt(_rule_filter(tokens, vocab))


class EmbeddingTable:
    """Token vectors drawn from a generator seeded by a hash of (seed, token)."""

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = int(dim)
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim) / np.sqrt(self.dim)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec


def embed_prompt(tokens, table: EmbeddingTable) -> PromptEmbedding:
    if isinstance(tokens, (PromptText, MaskPrompt)):
        tokens = tokens.tokens
    elif isinstance(tokens, str):
        tokens = tokenize(tokens)
    tokens = tuple(tokens)
    if not tokens:
        return PromptEmbedding(np.zeros(table.dim), tokens)
    vec = np.mean([table.vector(tok) for tok in tokens], axis=0)
    return PromptEmbedding(vec, tokens)

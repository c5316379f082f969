"""Text encoders mapping a report string to a token-vector sequence.

Two backends share one output contract (L x width, finite, width fixed per
run). `deterministic_test` hashes each token into a seeded unit-norm Gaussian
vector so every test runs offline and bit-stably; `pretrained` defers to a
transformer encoder when one is available.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np


class TextEncodeError(ValueError):
    """Empty input or input with no tokens."""


class TextBackendError(RuntimeError):
    """The pretrained backend could not be initialized."""


@dataclass(frozen=True)
class TextEmbedding:
    vectors: np.ndarray  # (token_count, width) float32

    @property
    def token_count(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def width(self) -> int:
        return int(self.vectors.shape[1])


_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Split on whitespace/punctuation; alphanumeric runs survive."""
    return _TOKEN_RE.findall(text)


def _token_vector(token: str, width: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "big"))
    vec = rng.standard_normal(width)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


class DeterministicEncoder:
    """Per-token hash vectors: same token, same seed -> same unit-norm row."""

    backend = "deterministic_test"

    def __init__(self, width: int = 768, seed: int = 7):
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        self.width = int(width)
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, text: str) -> TextEmbedding:
        tokens = tokenize(text)
        if not tokens:
            raise TextEncodeError(f"no tokens in input text {text!r}")
        rows = []
        for token in tokens:
            vec = self._cache.get(token)
            if vec is None:
                vec = _token_vector(token, self.width, self.seed)
                self._cache[token] = vec
            rows.append(vec)
        return TextEmbedding(vectors=np.stack(rows, axis=0))


class PretrainedEncoder:
    """Delegates tokenization and encoding to a pretrained transformer."""

    backend = "pretrained"

    def __init__(self, model_name: str = "roberta-base", width: int = 768):
        try:
            from transformers import AutoModel, AutoTokenizer  # deferred: optional extra
        except ImportError as exc:
            raise TextBackendError(f"transformers is not installed: {exc}") from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_name)
            self._model = AutoModel.from_pretrained(model_name)
        except Exception as exc:  # model files unavailable, offline, etc.
            raise TextBackendError(f"could not load {model_name!r}: {exc}") from exc
        self._model.eval()
        actual = int(self._model.config.hidden_size)
        if actual != width:
            raise TextBackendError(
                f"{model_name!r} emits width {actual}, config expects {width}"
            )
        self.width = actual

    def encode(self, text: str) -> TextEmbedding:
        import torch

        if not text.strip():
            raise TextEncodeError("empty input text")
        inputs = self._tokenizer(text, return_tensors="pt", truncation=True)
        with torch.no_grad():
            hidden = self._model(**inputs).last_hidden_state[0]
        vectors = hidden.numpy().astype(np.float32)
        if vectors.shape[0] < 1:
            raise TextEncodeError(f"encoder produced no tokens for {text!r}")
        return TextEmbedding(vectors=vectors)


def make_encoder(
    backend: str,
    width: int = 768,
    seed: int = 7,
    model_name: str = "roberta-base",
    allow_fallback: bool = False,
):
    """Build the configured encoder; optionally fall back to the hash backend."""
    if backend == "deterministic_test":
        return DeterministicEncoder(width=width, seed=seed)
    if backend == "pretrained":
        try:
            return PretrainedEncoder(model_name=model_name, width=width)
        except TextBackendError:
            if allow_fallback:
                return DeterministicEncoder(width=width, seed=seed)
            raise
    raise ValueError(f"unknown text backend {backend!r}")

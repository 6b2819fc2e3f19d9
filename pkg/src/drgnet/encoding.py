"""Embedding providers and initial node representations.

The language-model side of the pipeline is abstracted behind providers: a
seeded hash provider (pseudo-random unit vectors per token, fully
deterministic, no external assets) and a file provider for precomputed
vectors. The question context vector feeds both the question-node row of the
initial node states and, unprojected, the final scorer.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import DimensionError, EmbeddingLookupError, ParseError
from .kg import RelationalGraph, tokenize
from .matrix import Matrix


@dataclass
class ContextEncoding:
    """Question+candidate context: the summary vector and optional token states."""

    h_cls: np.ndarray
    token_states: np.ndarray | None = None


class EmbeddingProvider(Protocol):
    name: str
    dim: int
    deterministic: bool

    def token_vector(self, token: str) -> np.ndarray: ...


class HashProvider:
    """Token -> seeded pseudo-random unit-norm vector; no external assets."""

    deterministic = True

    def __init__(self, dim: int, seed: int = 0):
        self.name = f"hash-{dim}-seed{seed}"
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.seed}:{token}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            raw = rng.standard_normal(self.dim)
            vec = raw / np.linalg.norm(raw)
            self._cache[token] = vec
        return vec


class FileProvider:
    """Precomputed embeddings: header `dim=<d>`, then `token<TAB>v1 v2 ...` lines."""

    deterministic = True

    def __init__(self, path: str | Path):
        self.name = f"file:{path}"
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("dim="):
            raise ParseError(f"{path}:1: expected header 'dim=<d_lm>'")
        try:
            self.dim = int(lines[0][4:])
        except ValueError as exc:
            raise ParseError(f"{path}:1: bad dimension in header") from exc
        self._vectors: dict[str, np.ndarray] = {}
        for lineno, raw in enumerate(lines[1:], 2):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected token<TAB>values")
            token, values = parts
            try:
                vec = np.array([float(v) for v in values.split()], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad float value") from exc
            if vec.size != self.dim:
                raise ParseError(
                    f"{path}:{lineno}: expected {self.dim} values, got {vec.size}"
                )
            self._vectors[token] = vec

    def token_vector(self, token: str) -> np.ndarray:
        try:
            return self._vectors[token]
        except KeyError:
            raise EmbeddingLookupError(f"no embedding for token {token!r} in {self.name}")


def _pool_tokens(tokens: list[str], provider: EmbeddingProvider) -> np.ndarray:
    if not tokens:
        raise ValueError("cannot pool an empty token list")
    acc = np.zeros(provider.dim, dtype=np.float64)
    for tok in tokens:
        acc = acc + provider.token_vector(tok)
    return acc / len(tokens)


def encode_context(question: str, candidate: str, provider: EmbeddingProvider,
                   with_token_states: bool = False) -> ContextEncoding:
    """Summary vector for a (question, candidate) pair: mean over the tokens of
    the concatenated normalized text, L2-normalized so context vectors carry
    direction only (token repetition must not leak through the norm)."""
    if not question or not candidate:
        raise ValueError("question and candidate must be non-empty")
    tokens = tokenize(question) + tokenize(candidate)
    h_cls = _pool_tokens(tokens, provider)
    norm = np.linalg.norm(h_cls)
    if norm > 0:
        h_cls = h_cls / norm
    states = None
    if with_token_states:
        states = np.stack([provider.token_vector(t) for t in tokens])
    return ContextEncoding(h_cls=h_cls, token_states=states)


def embed_entities(graph: RelationalGraph, provider: EmbeddingProvider) -> Matrix:
    """One row per entity node: mean of its surface-token embeddings."""
    rows = np.zeros((graph.num_entities, provider.dim), dtype=np.float64)
    for i, surface in enumerate(graph.surfaces):
        if not surface:
            raise ValueError(f"entity node {i} has no surface form")
        rows[i] = _pool_tokens(surface.split("_"), provider)
    return Matrix(rows)


def init_node_states(entity_embs: Matrix, h_cls: np.ndarray | None, w_proj: Parameter) -> Node:
    """Initial node states: stacked entity embeddings (plus the context row when a
    question node is used), projected into the graph width. Trainable via w_proj."""
    precision = w_proj.value.precision
    dtype = w_proj.value.data.dtype
    if entity_embs.cols != w_proj.value.rows:
        raise DimensionError(
            f"entity embedding width {entity_embs.cols} != projection input {w_proj.value.rows}"
        )
    parts = [ad.constant(entity_embs.data.astype(dtype))]
    if h_cls is not None:
        if h_cls.shape != (w_proj.value.rows,):
            raise DimensionError(
                f"context width {h_cls.shape} != projection input {w_proj.value.rows}"
            )
        parts.append(ad.constant(h_cls[None, :].astype(dtype)))
    stacked = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
    return ad.mm(stacked, ad.leaf(w_proj))

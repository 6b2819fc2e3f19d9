"""Dataset records and the example-preparation pipeline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .encoding import EmbeddingProvider, embed_entities, encode_context
from .errors import ParseError, ValidationError
from .kg import (
    KnowledgeStore,
    RelationalGraph,
    Subgraph,
    attach_question_node,
    build_candidate_graph,
    graph_from_subgraph,
    match_entities,
    strip_question_node,
)
from .matrix import Matrix
from .model import ModelConfig, PreparedCandidate, prepare_candidate


@dataclass
class QAExample:
    """One multiple-choice question; graphs are per-candidate when present."""

    id: str
    question: str
    choices: list[str]
    answer_idx: int
    graphs: list[RelationalGraph] | None = None

    def __post_init__(self) -> None:
        if len(self.choices) < 2:
            raise ValidationError(f"example {self.id!r}: needs at least 2 choices")
        if not 0 <= self.answer_idx < len(self.choices):
            raise ValidationError(f"example {self.id!r}: answer_idx {self.answer_idx} out of range")
        if self.graphs is not None and len(self.graphs) != len(self.choices):
            raise ValidationError(f"example {self.id!r}: {len(self.graphs)} graphs for {len(self.choices)} choices")


def load_dataset(path: str | Path) -> list[QAExample]:
    """Line-delimited records {id, question, choices, answer_idx, fact?}; an
    optional fact is appended to the question text."""
    out: list[QAExample] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            ex_id = str(rec["id"])
            question = str(rec["question"])
            if rec.get("fact"):
                question = f"{question} {rec['fact']}"
            example = QAExample(
                id=ex_id,
                question=question,
                choices=[str(c) for c in rec["choices"]],
                answer_idx=int(rec["answer_idx"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError, ValidationError) as exc:
            raise ParseError(f"{path}:{lineno}: bad dataset record: {exc}") from exc
        if ex_id in seen:
            raise ParseError(f"{path}:{lineno}: duplicate example id {ex_id!r}")
        seen.add(ex_id)
        out.append(example)
    return out


def write_dataset(path: str | Path, examples: Sequence[QAExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {
                "id": ex.id,
                "question": ex.question,
                "choices": ex.choices,
                "answer_idx": ex.answer_idx,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class PreparedExample:
    id: str
    question: str
    gold: int
    candidates: list[PreparedCandidate]


def prepare_examples(
    examples: Sequence[QAExample],
    provider: EmbeddingProvider,
    config: ModelConfig,
    store: KnowledgeStore | None = None,
    subgraphs: dict[tuple[str, int], Subgraph] | None = None,
    max_ngram: int = 4,
    hops: int = 2,
    max_nodes: int = 200,
) -> list[PreparedExample]:
    """Encode and structure every example for the model.

    Candidate graphs come from, in order of preference: the example record,
    a pre-extracted subgraph dump, or fresh extraction against the store.
    """
    if provider.dim != config.d_lm:
        raise ValidationError(f"provider width {provider.dim} != configured d_lm {config.d_lm}")
    prepared: list[PreparedExample] = []
    for ex in examples:
        candidates: list[PreparedCandidate] = []
        for ci, choice in enumerate(ex.choices):
            graph = _candidate_graph(ex, ci, choice, store, subgraphs, max_ngram, hops, max_nodes, config)
            if config.use_question_node and graph.q_index is None and config.use_subgraph:
                raise ValidationError(f"example {ex.id!r}: graph lacks a question node")
            h_cls = encode_context(ex.question, choice, provider).h_cls
            entity_embs = (
                embed_entities(graph, provider)
                if graph.num_entities
                else Matrix.zeros(0, provider.dim, "f64")
            )
            candidates.append(prepare_candidate(graph, h_cls, entity_embs, config))
        prepared.append(PreparedExample(id=ex.id, question=ex.question, gold=ex.answer_idx, candidates=candidates))
    return prepared


def _candidate_graph(ex, ci, choice, store, subgraphs, max_ngram, hops, max_nodes, config) -> RelationalGraph:
    if not config.use_subgraph:
        return RelationalGraph([], [], [], [], 0, q_index=None)
    if ex.graphs is not None:
        graph = ex.graphs[ci]
    elif subgraphs is not None and (ex.id, ci) in subgraphs:
        if store is None:
            raise ValidationError("a knowledge store is required to attach question nodes to dumped subgraphs")
        sub = subgraphs[(ex.id, ci)]
        q_ents = match_entities(ex.question, store, max_ngram)
        graph = attach_question_node(graph_from_subgraph(sub, store.num_relations), q_ents)
    elif store is not None:
        graph = build_candidate_graph(ex.question, choice, store, max_ngram, hops, max_nodes)
    else:
        raise ValidationError(f"example {ex.id!r}: no graphs, no subgraph dump, and no store")
    if not config.use_question_node:
        graph = strip_question_node(graph)
    return graph

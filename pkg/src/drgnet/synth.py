"""Synthetic missing-edge task: multi-hop chains whose subgraphs lose edges.

Each example asks which candidate entity is reached from the start entity
named in the question. Entity surfaces share a topic token along a chain, so
node embeddings of chain members correlate; when a chain edge is withheld
from extraction, the static subgraph cannot connect question to answer and
only that embedding correlation can.

Example types mix four difficulty axes: plain connectivity, decoy paths with
wrong relation types, paired same-typed chains disambiguated only by the
question's topic marker (drawn from a small reusable pool), and edge-dropped
chains with fresh topics that defeat memorization.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import QAExample
from .errors import GenerationError
from .kg import (
    KnowledgeStore,
    Subgraph,
    Triple,
    attach_question_node,
    extract_subgraph,
    graph_from_subgraph,
)
from .model import ModelConfig

EXAMPLE_TYPES = ("connect", "typed", "pair")


@dataclass
class SyntheticTaskSpec:
    chain_length: int = 2
    vocab_size: int = 100_000    # total distinct surface tokens the generator may mint
    n_relations: int = 3
    distractor_count: int = 2
    p_drop: float = 0.5
    n_examples: int = 1000
    seed: int = 0
    mix: tuple[float, float, float] = (0.35, 0.25, 0.4)  # connect / typed / pair

    def validate(self) -> None:
        if self.chain_length < 2:
            raise GenerationError("chain_length must be >= 2")
        if self.vocab_size < 16:
            raise GenerationError("vocab_size must be >= 16 for a single example")
        if self.n_relations < 2:
            raise GenerationError("n_relations must be >= 2 for decoy paths")
        if self.distractor_count < 1:
            raise GenerationError("distractor_count must be >= 1")
        if not 0.0 <= self.p_drop <= 1.0:
            raise GenerationError("p_drop must be in [0, 1]")
        if self.n_examples < 1:
            raise GenerationError("n_examples must be >= 1")
        if abs(sum(self.mix) - 1.0) > 1e-9 or any(m < 0 for m in self.mix):
            raise GenerationError("mix must be non-negative and sum to 1")


def relation_names(spec: SyntheticTaskSpec) -> list[str]:
    return [f"rel{i}" for i in range(spec.n_relations)]


class _Minter:
    """Deterministic fresh-surface factory with a hard token budget."""

    def __init__(self, budget: int) -> None:
        self._uid = itertools.count()
        self._topic = itertools.count()
        self._budget = budget
        self._spent = 0

    def _mint(self, token: str) -> str:
        self._spent += 1
        if self._spent > self._budget:
            raise GenerationError(
                f"vocab_size {self._budget} too small for the requested examples"
            )
        return token

    def fresh_topic(self) -> str:
        return self._mint(f"q{next(self._topic)}")

    def entity(self, topic: str) -> str:
        # the topic token appears twice so same-chain entities stay strongly
        # correlated after mean pooling (the uid token keeps surfaces unique)
        return f"{topic}_{topic}_{self._mint(f'x{next(self._uid)}')}"


def _words(surface: str) -> str:
    return surface.replace("_", " ")


def gen_synthetic(spec: SyntheticTaskSpec) -> tuple[list[QAExample], KnowledgeStore]:
    """Generate the dataset plus the full KG (withheld edges included)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    minter = _Minter(spec.vocab_size)
    rels = relation_names(spec)
    all_triples: list[tuple[str, str, str]] = []
    raw_examples = []

    for idx in range(spec.n_examples):
        ex_type = EXAMPLE_TYPES[rng.choice(len(EXAMPLE_TYPES), p=list(spec.mix))]
        triples: list[tuple[str, str, str]] = []
        dropped: list[tuple[str, str, str]] = []

        def chain(topic: str, relation: str, start: str | None = None) -> list[str]:
            nodes = [start if start is not None else minter.entity(topic)]
            for _ in range(spec.chain_length):
                nodes.append(minter.entity(topic))
            edges = [(nodes[i], relation, nodes[i + 1]) for i in range(spec.chain_length)]
            triples.extend(edges)
            if rng.random() < spec.p_drop:
                dropped.append(edges[int(rng.integers(0, len(edges)))])
            return nodes

        def unconnected() -> str:
            ent = minter.entity(minter.fresh_topic())
            triples.append((ent, rels[-1], minter.entity(minter.fresh_topic())))
            return ent

        if ex_type == "pair":
            topic_a = minter.fresh_topic()
            topic_b = minter.fresh_topic()
            chain_a = chain(topic_a, rels[0])
            chain_b = chain(topic_b, rels[0])
            starts = [chain_a[0], chain_b[0]]
            gold_entity = chain_a[-1]
            others = [chain_b[-1]] + [unconnected() for _ in range(spec.distractor_count - 1)]
            marker = topic_a  # names the intended start; the other end is a trap
        else:
            topic = minter.fresh_topic()
            gold_chain = chain(topic, rels[0])
            starts = [gold_chain[0]]
            gold_entity = gold_chain[-1]
            others = []
            if ex_type == "typed":
                decoy = chain(minter.fresh_topic(), rels[1], start=gold_chain[0])
                others.append(decoy[-1])
            others += [unconnected() for _ in range(spec.distractor_count - len(others))]
            marker = None

        question = "which is reached from " + " or ".join(_words(s) for s in starts)
        if marker is not None:
            question += f" about {marker}"
        candidates = [gold_entity] + others
        order = rng.permutation(len(candidates))
        choices = [candidates[int(i)] for i in order]
        gold_idx = int(np.argwhere(order == 0)[0][0])
        all_triples.extend(triples)
        entities = sorted({s for t in triples for s in (t[0], t[2])})
        raw_examples.append({
            "id": f"syn{idx}",
            "type": ex_type,
            "question": question,
            "choices": choices,
            "gold": gold_idx,
            "starts": starts,
            "view": [t for t in triples if t not in dropped],
            "entities": entities,
        })

    store = KnowledgeStore(all_triples, rels)
    examples: list[QAExample] = []
    for raw in raw_examples:
        view = KnowledgeStore(raw["view"], rels, extra_entities=raw["entities"])
        q_local = {view.entity_id(s) for s in raw["starts"]}
        graphs = []
        for choice in raw["choices"]:
            a_local = {view.entity_id(choice)}
            sub_local = extract_subgraph(q_local, a_local, view, hops=spec.chain_length,
                                         max_nodes=200)
            sub = _remap(sub_local, view, store)
            graph = attach_question_node(
                graph_from_subgraph(sub, store.num_relations),
                {store.entity_id(view.surface(e)) for e in q_local},
            )
            graphs.append(graph)
        examples.append(QAExample(
            id=raw["id"],
            question=raw["question"],
            choices=[_words(c) for c in raw["choices"]],
            answer_idx=raw["gold"],
            graphs=graphs,
        ))
    return examples, store


def _remap(sub: Subgraph, view: KnowledgeStore, store: KnowledgeStore) -> Subgraph:
    """Translate a subgraph extracted against a per-example view into global ids."""
    to_global = {n: store.entity_id(view.surface(n)) for n in sub.nodes}
    return Subgraph(
        nodes=[to_global[n] for n in sub.nodes],
        roles={to_global[n]: r for n, r in sub.roles.items()},
        edges=[Triple(to_global[t.head], t.relation, to_global[t.tail]) for t in sub.edges],
        surfaces={to_global[n]: s for n, s in sub.surfaces.items()},
    )


def synthetic_model_config(spec: SyntheticTaskSpec, d: int = 16, d_lm: int = 24,
                           layers: int = 2, precision: str = "f64") -> ModelConfig:
    """Desk-scale model settings for the synthetic task."""
    return ModelConfig(
        n_semantic_relations=spec.n_relations,
        d=d,
        d_lm=d_lm,
        layers=layers,
        activation="gelu",
        scaled_relevance=True,
        precision=precision,
        dropout=0.0,
    )

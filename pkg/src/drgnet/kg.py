"""ConceptNet-style triple store, entity matching, and subgraph extraction.

The extraction pipeline: match question/answer text to entities by exact
n-gram lookup, pull in every entity on a short connecting path between the
two sides, induce the edges, then attach a question node linked to the
question entities by a dedicated relation type.
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ExtractionError, ParseError, SchemaError

# Merged ConceptNet relation set used by this pipeline; file-configurable.
CONCEPTNET_RELATIONS = (
    "antonym", "atlocation", "capableof", "causes", "createdby", "isa",
    "desires", "hassubevent", "partof", "hascontext", "hasproperty",
    "madeof", "notcapableof", "notdesires", "receivesaction", "relatedto",
    "usedfor",
)

QLINK_NAME = "qlink"

_NON_ALNUM = re.compile(r"[^a-z0-9_\s]+")


def normalize_surface(text: str) -> str:
    """Lowercase, strip punctuation, join words with underscores."""
    cleaned = _NON_ALNUM.sub(" ", text.lower())
    return "_".join(cleaned.replace("_", " ").split())


def tokenize(text: str) -> list[str]:
    """Normalized word tokens of free text (underscores split multi-word forms)."""
    cleaned = _NON_ALNUM.sub(" ", text.lower())
    return cleaned.replace("_", " ").split()


@dataclass(frozen=True)
class Relation:
    id: int
    name: str


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    relation: int
    tail: int


def load_relations(path: str | Path) -> list[str]:
    """Relation-set file: one name per line, order defines ids; # comments skipped."""
    names: list[str] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name = normalize_surface(line)
        if name in names:
            raise SchemaError(f"{path}:{lineno}: duplicate relation {name!r}")
        names.append(name)
    if not names:
        raise SchemaError(f"{path}: no relations defined")
    return names


class KnowledgeStore:
    """Immutable triple store with a sorted-vocabulary entity index.

    Entity ids are ranks in the lexicographically sorted vocabulary, so the
    store's content (and everything extracted from it) is independent of
    triple insertion order.
    """

    def __init__(
        self,
        triples: Iterable[tuple[str, str, str]],
        relations: Sequence[str] = CONCEPTNET_RELATIONS,
        extra_entities: Iterable[str] = (),
    ):
        self.relation_names = list(relations)
        self._rel_ids = {name: i for i, name in enumerate(self.relation_names)}
        raw = set()
        surfaces = {normalize_surface(e) for e in extra_entities}
        for head, rel, tail in triples:
            if rel not in self._rel_ids:
                raise SchemaError(f"unknown relation {rel!r}; configured: {self.relation_names}")
            if head == tail:
                continue  # self-loops are not representable; drop on ingest
            surfaces.add(head)
            surfaces.add(tail)
            raw.add((head, self._rel_ids[rel], tail))
        self._surfaces = sorted(surfaces)
        self._ids = {s: i for i, s in enumerate(self._surfaces)}
        self.triples = sorted(
            Triple(self._ids[h], r, self._ids[t]) for h, r, t in raw
        )
        self._out: dict[tuple[int, int], list[int]] = {}
        self._undirected: dict[int, set[int]] = {}
        for t in self.triples:
            self._out.setdefault((t.head, t.relation), []).append(t.tail)
            self._undirected.setdefault(t.head, set()).add(t.tail)
            self._undirected.setdefault(t.tail, set()).add(t.head)
        for key in self._out:
            self._out[key] = sorted(set(self._out[key]))

    @property
    def num_entities(self) -> int:
        return len(self._surfaces)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def entity_id(self, surface: str) -> int | None:
        return self._ids.get(normalize_surface(surface))

    def surface(self, entity: int) -> str:
        return self._surfaces[entity]

    def has_surface(self, form: str) -> bool:
        return form in self._ids

    def neighbors(self, entity: int, relation: int) -> list[int]:
        """Out-neighbors of entity under relation, sorted ascending."""
        return list(self._out.get((entity, relation), ()))

    def undirected_neighbors(self, entity: int) -> list[int]:
        return sorted(self._undirected.get(entity, ()))


def load_triples(path: str | Path, relations: Sequence[str] = CONCEPTNET_RELATIONS) -> KnowledgeStore:
    """Load a TSV triple file: head<TAB>relation<TAB>tail, # comments skipped."""
    rows: list[tuple[str, str, str]] = []
    known = set(relations)
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        head, rel, tail = (p.strip() for p in parts)
        if not head or not rel or not tail:
            raise ParseError(f"{path}:{lineno}: empty field")
        rel_norm = normalize_surface(rel)
        if rel_norm not in known:
            raise SchemaError(f"{path}:{lineno}: unknown relation {rel!r}")
        rows.append((normalize_surface(head), rel_norm, normalize_surface(tail)))
    return KnowledgeStore(rows, relations)


def match_entities(text: str, store: KnowledgeStore, max_ngram: int) -> set[int]:
    """Entity ids whose surface form equals a normalized n-gram of the text.

    A matched n-gram suppresses matches on its strict token-subspans, so
    "play baseball" resolves to play_baseball rather than {play, baseball}.
    """
    if not text:
        raise ValueError("text must be non-empty")
    if max_ngram < 1:
        raise ValueError("max_ngram must be >= 1")
    tokens = tokenize(text)
    spans: list[tuple[int, int, int]] = []
    for n in range(1, max_ngram + 1):
        for i in range(len(tokens) - n + 1):
            form = "_".join(tokens[i:i + n])
            if store.has_surface(form):
                eid = store.entity_id(form)
                assert eid is not None
                spans.append((i, i + n - 1, eid))
    kept: set[int] = set()
    for s1, e1, eid in spans:
        suppressed = any(
            (s2 <= s1 and e1 <= e2 and (s2, e2) != (s1, e1))
            for s2, e2, _ in spans
        )
        if not suppressed:
            kept.add(eid)
    return kept


ROLE_QUESTION = "question-entity"
ROLE_ANSWER = "answer-entity"
ROLE_INTERMEDIATE = "intermediate"


@dataclass
class Subgraph:
    """Extraction result: entity nodes (global ids) with roles, induced edges."""

    nodes: list[int]
    roles: dict[int, str]
    edges: list[Triple]
    surfaces: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        node_set = set(self.nodes)
        if len(self.nodes) != len(node_set):
            raise ValueError("duplicate nodes in subgraph")
        for e in self.edges:
            if e.head not in node_set or e.tail not in node_set:
                raise ValueError(f"edge {e} has endpoint outside the node set")


def _bounded_bfs(store: KnowledgeStore, seeds: set[int], limit: int) -> dict[int, int]:
    dist = {s: 0 for s in seeds}
    frontier = deque(sorted(seeds))
    while frontier:
        node = frontier.popleft()
        d = dist[node]
        if d == limit:
            continue
        for nb in store.undirected_neighbors(node):
            if nb not in dist:
                dist[nb] = d + 1
                frontier.append(nb)
    return dist


def extract_subgraph(
    q_entities: set[int],
    a_entities: set[int],
    store: KnowledgeStore,
    hops: int = 2,
    max_nodes: int = 200,
) -> Subgraph:
    """Question/answer entities plus every entity on a connecting path of <= hops edges.

    Paths are taken over the undirected view of the store. Intermediates on
    longer paths are dropped, which is exactly the truncation that can break
    a reasoning chain. Edges are all stored triples with both endpoints kept.
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    if not q_entities and not a_entities:
        raise ExtractionError("no question or answer entities to extract around")
    dq = _bounded_bfs(store, q_entities, hops) if q_entities else {}
    da = _bounded_bfs(store, a_entities, hops) if a_entities else {}
    on_path = {
        node for node, d1 in dq.items()
        if node in da and d1 + da[node] <= hops
    }
    q_sorted = sorted(q_entities)
    a_sorted = sorted(a_entities - q_entities)
    inter = sorted(on_path - q_entities - a_entities)
    nodes = q_sorted + a_sorted + inter

    node_set = set(nodes)
    edges = [t for t in store.triples if t.head in node_set and t.tail in node_set]

    if len(nodes) > max_nodes:
        degree: dict[int, int] = {n: 0 for n in nodes}
        for t in edges:
            degree[t.head] += 1
            degree[t.tail] += 1
        drop_order = sorted(inter, key=lambda n: (degree[n], n))
        to_drop = set(drop_order[: len(nodes) - max_nodes])
        nodes = [n for n in nodes if n not in to_drop]
        node_set = set(nodes)
        edges = [t for t in edges if t.head in node_set and t.tail in node_set]

    roles = {n: ROLE_INTERMEDIATE for n in nodes}
    for n in a_sorted:
        roles[n] = ROLE_ANSWER
    for n in q_sorted:
        roles[n] = ROLE_QUESTION
    surfaces = {n: store.surface(n) for n in nodes}
    return Subgraph(nodes=nodes, roles=roles, edges=edges, surfaces=surfaces)


@dataclass
class RelationalGraph:
    """Model-facing graph: local node indices, typed edges, optional question node.

    Entity nodes occupy local indices 0..|V|-1 in subgraph order; the question
    node, when present, sits at index |V| and carries only question-link edges
    to the question entities. The question-link relation id equals
    n_semantic_relations.
    """

    entity_ids: list[int]
    surfaces: list[str]
    roles: list[str]
    edges: list[tuple[int, int, int]]
    n_semantic_relations: int
    q_index: int | None = None

    def __post_init__(self) -> None:
        n = self.num_nodes
        qlink = self.qlink_relation
        for h, r, t in self.edges:
            if not (0 <= h < n and 0 <= t < n):
                raise ValueError(f"edge ({h},{r},{t}) endpoint outside node range {n}")
            touches_q = self.q_index is not None and (h == self.q_index or t == self.q_index)
            if touches_q and r != qlink:
                raise ValueError(f"question node carries a non-question-link edge ({h},{r},{t})")
            if not touches_q and r == qlink:
                raise ValueError(f"question-link edge ({h},{r},{t}) must touch the question node")

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_nodes(self) -> int:
        return self.num_entities + (1 if self.q_index is not None else 0)

    @property
    def qlink_relation(self) -> int:
        return self.n_semantic_relations

    @property
    def num_relations(self) -> int:
        """Relation types including the question link."""
        return self.n_semantic_relations + 1

    def question_entity_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == ROLE_QUESTION]


def graph_from_subgraph(sub: Subgraph, n_semantic_relations: int) -> RelationalGraph:
    local = {eid: i for i, eid in enumerate(sub.nodes)}
    return RelationalGraph(
        entity_ids=list(sub.nodes),
        surfaces=[sub.surfaces.get(n, "") for n in sub.nodes],
        roles=[sub.roles[n] for n in sub.nodes],
        edges=[(local[t.head], t.relation, local[t.tail]) for t in sub.edges],
        n_semantic_relations=n_semantic_relations,
    )


def attach_question_node(sub: Subgraph | RelationalGraph, q_entities: set[int], n_semantic_relations: int | None = None) -> RelationalGraph:
    """Append the question node and link it to the question entities present.

    Entities are matched by global id; a graph with no question entities gets
    an isolated question node (degenerate but allowed).
    """
    if isinstance(sub, Subgraph):
        if n_semantic_relations is None:
            raise ValueError("n_semantic_relations required when attaching to a Subgraph")
        base = graph_from_subgraph(sub, n_semantic_relations)
    else:
        if sub.q_index is not None:
            raise ValueError("graph already has a question node")
        base = sub
    q_local = base.num_entities
    qlink = base.qlink_relation
    linked = sorted(
        i for i, eid in enumerate(base.entity_ids)
        if eid in q_entities
    )
    edges = list(base.edges) + [(q_local, qlink, i) for i in linked]
    return RelationalGraph(
        entity_ids=list(base.entity_ids),
        surfaces=list(base.surfaces),
        roles=list(base.roles),
        edges=edges,
        n_semantic_relations=base.n_semantic_relations,
        q_index=q_local,
    )


def strip_question_node(graph: RelationalGraph) -> RelationalGraph:
    """Drop the question node and its link edges (ablation support)."""
    if graph.q_index is None:
        return graph
    return RelationalGraph(
        entity_ids=list(graph.entity_ids),
        surfaces=list(graph.surfaces),
        roles=list(graph.roles),
        edges=[e for e in graph.edges if graph.q_index not in (e[0], e[2])],
        n_semantic_relations=graph.n_semantic_relations,
    )


def build_candidate_graph(
    question: str,
    candidate: str,
    store: KnowledgeStore,
    max_ngram: int = 4,
    hops: int = 2,
    max_nodes: int = 200,
    attach_question: bool = True,
) -> RelationalGraph:
    """Full per-candidate pipeline: match, extract, attach; falls back to a
    question-node-only graph when neither side matches any entity."""
    q_ents = match_entities(question, store, max_ngram)
    a_ents = match_entities(candidate, store, max_ngram)
    try:
        sub = extract_subgraph(q_ents, a_ents, store, hops=hops, max_nodes=max_nodes)
    except ExtractionError:
        sub = Subgraph(nodes=[], roles={}, edges=[], surfaces={})
    graph = graph_from_subgraph(sub, store.num_relations)
    if attach_question:
        graph = attach_question_node(graph, q_ents)
    return graph


def dump_subgraphs(records: Iterable[tuple[str, int, Subgraph]], path: str | Path) -> None:
    """Write extraction results as line-delimited JSON records."""
    with open(path, "w", encoding="utf-8") as fh:
        for example_id, candidate_idx, sub in records:
            rec = {
                "example_id": example_id,
                "candidate_idx": candidate_idx,
                "nodes": [
                    {"id": n, "surface": sub.surfaces.get(n, ""), "role": sub.roles[n]}
                    for n in sub.nodes
                ],
                "edges": [{"h": t.head, "r": t.relation, "t": t.tail} for t in sub.edges],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_subgraphs(path: str | Path) -> dict[tuple[str, int], Subgraph]:
    """Read a subgraph dump back into extraction results keyed by (example, candidate)."""
    out: dict[tuple[str, int], Subgraph] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            nodes = [int(n["id"]) for n in rec["nodes"]]
            roles = {int(n["id"]): str(n["role"]) for n in rec["nodes"]}
            surfaces = {int(n["id"]): str(n["surface"]) for n in rec["nodes"]}
            edges = [Triple(int(e["h"]), int(e["r"]), int(e["t"])) for e in rec["edges"]]
            key = (str(rec["example_id"]), int(rec["candidate_idx"]))
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}:{lineno}: bad subgraph record: {exc}") from exc
        out[key] = Subgraph(nodes=nodes, roles=roles, edges=edges, surfaces=surfaces)
    return out

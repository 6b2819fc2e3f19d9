"""Relevance-weighted relational message passing and candidate scoring.

Each layer recomputes pairwise inner products of the current node states and
uses them twice: as per-edge weights inside the typed message passing, and as
a dense mixing matrix over the freshly updated states, which lets any two
nodes exchange information even without a static edge. Backward passes run on
the reverse-mode tape, so gradients include both relevance uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore
from .errors import NumericError, ValidationError
from .kg import RelationalGraph
from .matrix import Matrix, dtype_of, gram
from .encoding import init_node_states


@dataclass
class ModelConfig:
    n_semantic_relations: int
    d: int = 200
    d_lm: int = 100
    layers: int = 3
    activation: str = "gelu"
    hidden: int | None = None
    scaled_relevance: bool = False
    precision: str = "f32"
    dropout: float = 0.0
    # structural switches (ablation ladder)
    use_subgraph: bool = True
    use_relation_types: bool = True
    use_question_node: bool = True
    use_relevance: bool = True

    @property
    def mlp_hidden(self) -> int:
        return self.hidden if self.hidden is not None else self.d

    @property
    def n_rel_weights(self) -> int:
        base = self.n_semantic_relations if self.use_relation_types else 1
        return base + (1 if self.use_question_node else 0)


@dataclass
class PreparedCandidate:
    """Per-candidate inputs with precomputed graph structure.

    rel_masks[w] holds, for relation-weight index w, an n x n array whose
    (i, j) entry is 1/|N_i^w| when j is an i-neighbor under w and 0 otherwise;
    masks cover all graph nodes, but the question-node row is recomputed by
    the dedicated question update.
    """

    graph: RelationalGraph
    h_cls: np.ndarray
    entity_embs: Matrix
    rel_masks: list[tuple[int, np.ndarray]]
    q_neighbors: np.ndarray
    n_nodes: int


@dataclass
class CandidateScore:
    score: float
    h_cls: np.ndarray
    h_q: np.ndarray
    pooled: np.ndarray
    relevance: list[np.ndarray] = field(default_factory=list)


def relevance_matrix(h: Matrix, scaled: bool = False) -> Matrix:
    """Pairwise inner products of node states; optionally divided by the width."""
    m = gram(h)
    out = Matrix(m.data / h.data.dtype.type(h.cols)) if scaled else m
    _check_relevance(out.data)
    return out


def _check_relevance(m: np.ndarray) -> None:
    if not np.array_equal(m, m.T):
        raise NumericError("relevance matrix is not exactly symmetric")
    if m.shape[0] and np.diagonal(m).min() < 0.0:
        raise NumericError("relevance matrix has a negative diagonal entry")


def pool_graph(h: Matrix, num_entities: int | None = None) -> Matrix:
    """Mean over entity rows; the question-node row (last) is excluded."""
    v = h.rows if num_entities is None else num_entities
    if v < 1:
        raise ValueError("pooling requires at least one entity node")
    return Matrix(h.data[:v].sum(axis=0, keepdims=True) / h.data.dtype.type(v))


def predict(scores: Sequence[float]) -> int:
    """Highest-scoring candidate; ties break toward the lowest index."""
    if len(scores) < 2:
        raise ValueError("prediction needs at least two candidate scores")
    best = 0
    for i, s in enumerate(scores):
        if not math.isfinite(s):
            raise NumericError(f"candidate {i} has non-finite score {s}")
        if s > scores[best]:
            best = i
    return best


def cross_entropy_loss(scores: Sequence[float], gold: int) -> float:
    """Stable -log softmax(scores)[gold]."""
    node = ad.cross_entropy(ad.constant(np.asarray(scores, dtype=np.float64)[None, :]), gold)
    return float(node.value[0, 0])


def prepare_candidate(
    graph: RelationalGraph,
    h_cls: np.ndarray,
    entity_embs: Matrix,
    config: ModelConfig,
) -> PreparedCandidate:
    """Precompute the per-relation neighbor masks for one candidate graph."""
    if config.use_subgraph and (graph.q_index is not None) != config.use_question_node:
        raise ValidationError(
            "graph question node does not match the model config; "
            "strip or attach the question node before preparing"
        )
    dtype = dtype_of(config.precision)
    n = graph.num_nodes
    neighbor_sets: dict[int, dict[int, set[int]]] = {}
    for h, r, t in graph.edges:
        w = _weight_index(r, graph, config)
        per_rel = neighbor_sets.setdefault(w, {})
        per_rel.setdefault(h, set()).add(t)
        per_rel.setdefault(t, set()).add(h)  # edges act bidirectionally
    rel_masks: list[tuple[int, np.ndarray]] = []
    for w in sorted(neighbor_sets):
        mask = np.zeros((n, n), dtype=dtype)
        for i, nbrs in neighbor_sets[w].items():
            inv = dtype.type(1.0) / dtype.type(len(nbrs))
            for j in sorted(nbrs):
                mask[i, j] = inv
        rel_masks.append((w, mask))
    q_neighbors = np.array(
        sorted(neighbor_sets.get(_qlink_weight_index(graph, config), {}).get(graph.q_index, ())),
        dtype=np.intp,
    ) if graph.q_index is not None else np.array([], dtype=np.intp)
    return PreparedCandidate(
        graph=graph,
        h_cls=np.asarray(h_cls, dtype=np.float64),
        entity_embs=entity_embs,
        rel_masks=rel_masks,
        q_neighbors=q_neighbors,
        n_nodes=n,
    )


def _weight_index(rel: int, graph: RelationalGraph, config: ModelConfig) -> int:
    if rel == graph.qlink_relation:
        return _qlink_weight_index(graph, config)
    return rel if config.use_relation_types else 0


def _qlink_weight_index(graph: RelationalGraph, config: ModelConfig) -> int:
    return config.n_semantic_relations if config.use_relation_types else 1


class DrgnModel:
    """The graph network plus scorer, parameterized by a ParamStore."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        c = config
        p = c.precision

        def w(name: str, rows: int, cols: int, group: str = "graph") -> None:
            self.params.add(name, ad.glorot_init(rng, rows, cols, p), group)

        def b(name: str, cols: int) -> None:
            self.params.add(name, Matrix.zeros(1, cols, p), "graph")

        w("input_proj", c.d_lm, c.d, group="encoder")
        if c.use_subgraph:
            for li in range(c.layers):
                for ri in range(c.n_rel_weights):
                    w(f"layer{li}.rel{ri}", c.d, c.d)
                w(f"layer{li}.self", c.d, c.d)
                if c.use_question_node:
                    w(f"layer{li}.question", c.d, c.d)
                    w(f"layer{li}.combine.w1", 2 * c.d, c.mlp_hidden)
                    b(f"layer{li}.combine.b1", c.mlp_hidden)
                    w(f"layer{li}.combine.w2", c.mlp_hidden, c.d)
                    b(f"layer{li}.combine.b2", c.d)
                if c.use_relevance:
                    w(f"layer{li}.mix", c.d, c.d)
        w("scorer.w1", 2 * c.d + c.d_lm, c.mlp_hidden)
        b("scorer.b1", c.mlp_hidden)
        w("scorer.w2", c.mlp_hidden, 1)
        b("scorer.b2", 1)

    # ---- tape-level pieces -------------------------------------------------

    def _leaf(self, name: str) -> Node:
        return ad.leaf(self.params[name])

    def _relevance_node(self, h: Node) -> Node:
        m = ad.gram_op(h)
        if self.config.scaled_relevance:
            m = ad.scale(m, 1.0 / self.config.d)
        _check_relevance(m.value)
        return m

    def _mlp(self, x: Node, prefix: str) -> Node:
        h1 = ad.act(ad.add(ad.mm(x, self._leaf(f"{prefix}.w1")), self._leaf(f"{prefix}.b1")),
                    self.config.activation)
        return ad.add(ad.mm(h1, self._leaf(f"{prefix}.w2")), self._leaf(f"{prefix}.b2"))

    def _entity_update_node(self, h: Node, m: Node | None, prep: PreparedCandidate, li: int) -> Node:
        """Typed neighbor aggregation re-weighted by relevance, plus the self term.

        Computes pre-activations for every row; the caller slices off the
        question-node row, which has its own update.
        """
        pre: Node | None = None
        for w_idx, mask in prep.rel_masks:
            weights = ad.constant(mask) if m is None else ad.mul(m, ad.constant(mask))
            term = ad.mm(ad.mm(weights, h), self._leaf(f"layer{li}.rel{w_idx}"))
            pre = term if pre is None else ad.add(pre, term)
        if m is None:
            self_term = ad.mm(h, self._leaf(f"layer{li}.self"))
        else:
            eye = ad.constant(np.eye(prep.n_nodes, dtype=h.value.dtype))
            self_term = ad.mm(ad.mm(ad.mul(m, eye), h), self._leaf(f"layer{li}.self"))
        return self_term if pre is None else ad.add(pre, self_term)

    def _question_update_node(self, h: Node, m: Node | None, prep: PreparedCandidate, li: int) -> Node:
        q = prep.graph.q_index
        assert q is not None
        hq = ad.take_rows(h, [q])
        self_term = ad.mm(hq, self._leaf(f"layer{li}.self"))
        if m is not None:
            m_qq = ad.take_cols(ad.take_rows(m, [q]), [q])
            self_term = ad.mul(m_qq, self_term)
        if prep.q_neighbors.size == 0:
            return ad.act(self_term, self.config.activation)
        nb = ad.take_rows(h, prep.q_neighbors)
        if m is not None:
            rel_row = ad.transpose(ad.take_cols(ad.take_rows(m, [q]), prep.q_neighbors))
            nb = ad.mul(nb, rel_row)
        ones = ad.constant(np.ones((prep.q_neighbors.size, 1), dtype=h.value.dtype))
        paired = ad.concat_cols([ad.mul(ones, hq), nb])
        combined = self._mlp(paired, f"layer{li}.combine")
        msg = ad.mm(ad.sum_rows(combined), self._leaf(f"layer{li}.question"))
        return ad.act(ad.add(msg, self_term), self.config.activation)

    def _global_mix_node(self, h_prime: Node, li: int) -> Node:
        m2 = self._relevance_node(h_prime)
        return ad.act(ad.mm(ad.mm(m2, h_prime), self._leaf(f"layer{li}.mix")), self.config.activation)

    def _layer_node(self, h: Node, prep: PreparedCandidate, li: int) -> Node:
        cfg = self.config
        has_q = prep.graph.q_index is not None
        n_entities = prep.graph.num_entities
        m = self._relevance_node(h) if cfg.use_relevance else None
        pre = self._entity_update_node(h, m, prep, li)
        if has_q:
            parts = []
            if n_entities:
                parts.append(ad.act(ad.take_rows(pre, np.arange(n_entities)), cfg.activation))
            parts.append(self._question_update_node(h, m, prep, li))
            h_prime = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
        else:
            h_prime = ad.act(pre, cfg.activation)
        if cfg.use_relevance:
            return self._global_mix_node(h_prime, li)
        return h_prime

    def _zeros(self, cols: int) -> Node:
        return ad.constant(np.zeros((1, cols), dtype=dtype_of(self.config.precision)))

    def candidate_score_node(
        self,
        prep: PreparedCandidate,
        dropout_rng: np.random.Generator | None = None,
        collect_relevance: list[np.ndarray] | None = None,
    ) -> Node:
        cfg = self.config
        dtype = dtype_of(cfg.precision)
        cls_row = ad.constant(prep.h_cls[None, :].astype(dtype))
        if not cfg.use_subgraph or prep.n_nodes == 0:
            feats = ad.concat_cols([cls_row, self._zeros(cfg.d), self._zeros(cfg.d)])
            return self._mlp(feats, "scorer")

        h = init_node_states(
            prep.entity_embs.astype(cfg.precision),
            prep.h_cls.astype(dtype) if cfg.use_question_node else None,
            self.params["input_proj"],
        )
        for li in range(cfg.layers):
            h = self._layer_node(h, prep, li)
            if collect_relevance is not None and cfg.use_relevance:
                collect_relevance.append(self._relevance_node(h).value.copy())
            if dropout_rng is not None and cfg.dropout > 0.0 and li < cfg.layers - 1:
                keep = 1.0 - cfg.dropout
                mask = (dropout_rng.random(h.shape) < keep).astype(dtype) / dtype.type(keep)
                h = ad.mul(h, ad.constant(mask))

        v = prep.graph.num_entities
        if v > 0:
            pooled = ad.scale(ad.sum_rows(ad.take_rows(h, np.arange(v))), 1.0 / v)
        else:
            pooled = self._zeros(cfg.d)
        if cfg.use_question_node:
            hq = ad.take_rows(h, [prep.graph.q_index])
        else:
            hq = self._zeros(cfg.d)
        feats = ad.concat_cols([cls_row, hq, pooled])
        return self._mlp(feats, "scorer")

    def loss_node(
        self,
        candidates: Sequence[PreparedCandidate],
        gold: int,
        dropout_rng: np.random.Generator | None = None,
    ) -> Node:
        if not 0 <= gold < len(candidates):
            raise ValueError(f"gold index {gold} out of range for {len(candidates)} candidates")
        scores = [self.candidate_score_node(c, dropout_rng) for c in candidates]
        return ad.cross_entropy(ad.concat_cols(scores), gold)

    # ---- plain Matrix-level wrappers (contract surface) ---------------------

    def forward_scores(self, candidates: Sequence[PreparedCandidate]) -> list[float]:
        return [float(self.candidate_score_node(c).value[0, 0]) for c in candidates]

    def score_candidate_detail(self, prep: PreparedCandidate) -> CandidateScore:
        collect: list[np.ndarray] = []
        node = self.candidate_score_node(prep, collect_relevance=collect)
        h_q, pooled = self._final_components(prep)
        return CandidateScore(
            score=float(node.value[0, 0]),
            h_cls=prep.h_cls.copy(),
            h_q=h_q,
            pooled=pooled,
            relevance=collect,
        )

    def _final_components(self, prep: PreparedCandidate) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        if not cfg.use_subgraph or prep.n_nodes == 0:
            return np.zeros(cfg.d), np.zeros(cfg.d)
        h = self.node_states(prep)
        v = prep.graph.num_entities
        pooled = pool_graph(h, v).data[0] if v > 0 else np.zeros(cfg.d)
        hq = h.data[prep.graph.q_index] if cfg.use_question_node else np.zeros(cfg.d)
        return hq, pooled

    def states_node(self, prep: PreparedCandidate, upto_layer: int | None = None) -> Node:
        """Tape node for the (final or intermediate) node-state matrix."""
        cfg = self.config
        h = init_node_states(
            prep.entity_embs.astype(cfg.precision),
            prep.h_cls.astype(dtype_of(cfg.precision)) if cfg.use_question_node else None,
            self.params["input_proj"],
        )
        layers = cfg.layers if upto_layer is None else upto_layer
        for li in range(layers):
            h = self._layer_node(h, prep, li)
        return h

    def node_states(self, prep: PreparedCandidate, upto_layer: int | None = None) -> Matrix:
        """Final (or intermediate) node states for one candidate graph."""
        return Matrix(self.states_node(prep, upto_layer).value.copy())

    def entity_update(self, prep: PreparedCandidate, h: Matrix, m: Matrix | None, layer: int) -> Matrix:
        """Entity rows of the typed update; excludes the question-node row."""
        hn = ad.constant(h.data)
        mn = ad.constant(m.data) if m is not None else None
        pre = self._entity_update_node(hn, mn, prep, layer)
        v = prep.graph.num_entities
        ent = ad.act(ad.take_rows(pre, np.arange(v)), self.config.activation)
        return Matrix(ent.value.copy())

    def question_update(self, prep: PreparedCandidate, h: Matrix, m: Matrix | None, layer: int) -> Matrix:
        node = self._question_update_node(ad.constant(h.data), ad.constant(m.data) if m is not None else None, prep, layer)
        return Matrix(node.value.copy())

    def global_mix(self, h_prime: Matrix, layer: int) -> Matrix:
        return Matrix(self._global_mix_node(ad.constant(h_prime.data), layer).value.copy())

    def layer_forward(self, prep: PreparedCandidate, h: Matrix, layer: int) -> Matrix:
        return Matrix(self._layer_node(ad.constant(h.data), prep, layer).value.copy())

    def score_from_components(self, h_cls: np.ndarray, h_q: np.ndarray, pooled: np.ndarray) -> float:
        dtype = dtype_of(self.config.precision)
        feats = ad.concat_cols([
            ad.constant(np.asarray(h_cls, dtype=dtype)[None, :]),
            ad.constant(np.asarray(h_q, dtype=dtype)[None, :]),
            ad.constant(np.asarray(pooled, dtype=dtype)[None, :]),
        ])
        return float(self._mlp(feats, "scorer").value[0, 0])


def config_for_ablation(base: ModelConfig, *, drop_subgraph: bool = False,
                        drop_relational_edges: bool = False,
                        drop_question_node: bool = False,
                        drop_relevance: bool = False) -> ModelConfig:
    """Model switches for the ablation ladder; drop_subgraph overrides the rest."""
    if drop_subgraph:
        return replace(base, use_subgraph=False, use_relation_types=False,
                       use_question_node=False, use_relevance=False)
    return replace(
        base,
        use_relation_types=base.use_relation_types and not drop_relational_edges,
        use_question_node=base.use_question_node and not drop_question_node,
        use_relevance=base.use_relevance and not drop_relevance,
    )

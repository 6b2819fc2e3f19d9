"""Shared constructors for model-level tests."""
import numpy as np

from drgnet.kg import ROLE_ANSWER, ROLE_INTERMEDIATE, ROLE_QUESTION, RelationalGraph
from drgnet.matrix import Matrix
from drgnet.model import DrgnModel, ModelConfig, prepare_candidate


def make_graph(n_entities, edges, n_relations, q_links=None, question_idx=(0,)):
    """Small graph with entities 0..n-1; q_links attaches a question node."""
    roles = [ROLE_INTERMEDIATE] * n_entities
    for i in question_idx:
        if i < n_entities:
            roles[i] = ROLE_QUESTION
    if n_entities > 1 and roles[n_entities - 1] == ROLE_INTERMEDIATE:
        roles[n_entities - 1] = ROLE_ANSWER
    all_edges = list(edges)
    q_index = None
    if q_links is not None:
        q_index = n_entities
        all_edges += [(q_index, n_relations, j) for j in q_links]
    return RelationalGraph(
        entity_ids=list(range(n_entities)),
        surfaces=[f"e{i}" for i in range(n_entities)],
        roles=roles,
        edges=all_edges,
        n_semantic_relations=n_relations,
        q_index=q_index,
    )


def make_model(graph, d=6, d_lm=8, layers=2, activation="gelu", seed=0,
               precision="f64", **cfg_kwargs):
    cfg = ModelConfig(
        n_semantic_relations=graph.n_semantic_relations,
        d=d, d_lm=d_lm, layers=layers, activation=activation,
        precision=precision,
        use_question_node=graph.q_index is not None,
        **cfg_kwargs,
    )
    return DrgnModel(cfg, seed=seed)


def unit_rows(arr):
    return arr / np.linalg.norm(arr, axis=-1, keepdims=True)


def make_prep(graph, model, seed=0, entity_embs=None, h_cls=None, scale=1.0):
    """Random candidate inputs at provider-like scale (unit-norm rows)."""
    rng = np.random.default_rng(seed)
    if entity_embs is None:
        entity_embs = Matrix(scale * unit_rows(rng.standard_normal((graph.num_entities, model.config.d_lm))))
    if h_cls is None:
        h_cls = scale * unit_rows(rng.standard_normal(model.config.d_lm))
    return prepare_candidate(graph, h_cls, entity_embs, model.config)


def random_states(model, n_nodes, seed=1, unit_rows=False):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((n_nodes, model.config.d))
    if unit_rows:
        h = h / np.linalg.norm(h, axis=1, keepdims=True)
    return Matrix(h)


def set_param(model, name, value):
    arr = np.asarray(value, dtype=model.params[name].value.data.dtype)
    assert arr.shape == model.params[name].value.shape
    model.params[name].value.data[:] = arr

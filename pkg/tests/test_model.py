import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drgnet import autodiff as ad
from drgnet.errors import NumericError
from drgnet.matrix import Matrix
from drgnet.model import (
    cross_entropy_loss,
    pool_graph,
    predict,
    relevance_matrix,
)

from helpers import make_graph, make_model, make_prep, random_states, set_param, unit_rows
from rgcn_reference import PlainRgcn, neighbor_table


# --- relevance matrix -------------------------------------------------------

def test_relevance_orthonormal_rows_give_identity():
    h = Matrix(np.eye(4)[:3])
    assert np.array_equal(relevance_matrix(h).data, np.eye(3)[:3, :3])


def test_relevance_identical_unit_rows():
    v = np.zeros(5)
    v[2] = 1.0
    m = relevance_matrix(Matrix(np.stack([v, v])))
    assert np.array_equal(m.data, np.ones((2, 2)))


def test_relevance_matches_double_loop_oracle():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((5, 8))
    m = relevance_matrix(Matrix(h)).data
    for i in range(5):
        for j in range(5):
            s = np.float64(0.0)
            for k in range(8):
                s = s + h[i, k] * h[j, k]
            assert m[i, j] == s


def test_relevance_symmetry_and_diagonal():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((7, 4))
    m = relevance_matrix(Matrix(h))
    assert np.array_equal(m.data, m.data.T)
    norms = np.array([np.dot(h[i], h[i]) for i in range(7)])
    assert np.allclose(np.diagonal(m.data), norms, atol=1e-12)
    assert np.diagonal(m.data).min() >= 0.0


def test_relevance_scale_sensitivity_exact():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((6, 5))
    m1 = relevance_matrix(Matrix(h)).data
    m2 = relevance_matrix(Matrix(2.0 * h)).data
    assert np.array_equal(m2, 4.0 * m1)


def test_relevance_scaled_flag_divides_by_width():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((4, 8))
    base = relevance_matrix(Matrix(h)).data
    scaled = relevance_matrix(Matrix(h), scaled=True).data
    assert np.allclose(scaled, base / 8.0, atol=1e-15)


# --- entity update ----------------------------------------------------------

def test_entity_update_isolated_node_identity():
    g = make_graph(1, [], n_relations=2)
    model = make_model(g, d=4, activation="identity")
    set_param(model, "layer0.self", np.eye(4))
    h = random_states(model, 1, unit_rows=True)
    m = relevance_matrix(h)
    out = model.entity_update(make_prep(g, model), h, m, layer=0)
    assert np.allclose(out.data, h.data, atol=1e-12)


def test_entity_update_two_node_hand_expansion():
    g = make_graph(2, [(0, 0, 1)], n_relations=1)
    model = make_model(g, d=2, activation="identity")
    w_rel = np.array([[0.5, -1.0], [2.0, 0.25]])
    w_self = np.array([[1.0, 1.0], [0.0, -0.5]])
    set_param(model, "layer0.rel0", w_rel)
    set_param(model, "layer0.self", w_self)
    h = np.array([[1.0, 2.0], [-3.0, 0.5]])
    m = relevance_matrix(Matrix(h))
    out = model.entity_update(make_prep(g, model), Matrix(h), m, layer=0)
    # fully expanded by hand: m01 = 1*-3 + 2*0.5 = -2, m00 = 5, m11 = 9.25
    assert m.data[0, 1] == -2.0 and m.data[0, 0] == 5.0 and m.data[1, 1] == 9.25
    row0 = (-2.0 * h[1]) @ w_rel + (5.0 * h[0]) @ w_self
    row1 = (-2.0 * h[0]) @ w_rel + (9.25 * h[1]) @ w_self
    assert np.allclose(out.data, np.stack([row0, row1]), atol=1e-12)


def test_entity_update_all_ones_relevance_equals_plain_rgcn():
    rng = np.random.default_rng(7)
    g = make_graph(5, [(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 4), (0, 1, 4)], n_relations=2)
    model = make_model(g, d=3, activation="gelu", seed=3)
    prep = make_prep(g, model)
    h = random_states(model, 5, seed=11)
    ones = Matrix(np.ones((5, 5)))
    out = model.entity_update(prep, h, ones, layer=0)

    ref = PlainRgcn(layers=1, n_relations=2, activation="gelu")
    ref.weights[(0, "self")] = model.params["layer0.self"].value.data
    for r in range(2):
        ref.weights[(0, "rel", r)] = model.params[f"layer0.rel{r}"].value.data
    want = ref.forward(neighbor_table(g.edges, 5, 2), h.data)
    assert np.abs(out.data - want).max() < 1e-6


def test_entity_update_no_neighbors_under_relation_contribute_nothing():
    g = make_graph(3, [(0, 0, 1)], n_relations=3)
    model = make_model(g, d=4, activation="identity", seed=5)
    prep = make_prep(g, model)
    # relation 1 and 2 have no edges: their weights must not enter the output
    h = random_states(model, 3)
    m = relevance_matrix(h)
    before = model.entity_update(prep, h, m, 0).data.copy()
    set_param(model, "layer0.rel1", np.full((4, 4), 123.0))
    set_param(model, "layer0.rel2", np.full((4, 4), -55.0))
    after = model.entity_update(prep, h, m, 0).data
    assert np.array_equal(before, after)


# --- question update ----------------------------------------------------------

def test_question_update_no_neighbors_only_self_term():
    g = make_graph(1, [], n_relations=2, q_links=[])
    model = make_model(g, d=3, activation="identity", seed=2)
    prep = make_prep(g, model)
    h = random_states(model, 2, unit_rows=True)
    m = relevance_matrix(h)
    out = model.question_update(prep, h, m, 0)
    want = m.data[1, 1] * (h.data[1] @ model.params["layer0.self"].value.data)
    assert np.allclose(out.data[0], want, atol=1e-12)


def test_question_update_constructed_identity_fixture_doubles_hq():
    d = 3
    g = make_graph(1, [], n_relations=1, q_links=[0])
    model = make_model(g, d=d, activation="identity", seed=0, hidden=2 * d)
    set_param(model, "layer0.self", np.eye(d))
    set_param(model, "layer0.question", np.eye(d))
    set_param(model, "layer0.combine.w1", np.eye(2 * d))
    set_param(model, "layer0.combine.b1", np.zeros((1, 2 * d)))
    set_param(model, "layer0.combine.w2", np.vstack([np.eye(d), np.zeros((d, d))]))
    set_param(model, "layer0.combine.b2", np.zeros((1, d)))
    prep = make_prep(g, model)
    hq = np.zeros(d)
    hq[1] = 1.0  # unit norm
    h = Matrix(np.stack([np.zeros(d), hq]))  # neighbor row is zero
    m = relevance_matrix(h)
    out = model.question_update(prep, h, m, 0)
    assert np.allclose(out.data[0], 2.0 * hq, atol=1e-12)


def test_question_update_matches_term_by_term_oracle():
    d = 4
    g = make_graph(3, [(0, 0, 1)], n_relations=1, q_links=[0, 2])
    model = make_model(g, d=d, activation="gelu", seed=8)
    prep = make_prep(g, model)
    h = random_states(model, 4, seed=9)
    m = relevance_matrix(h)
    out = model.question_update(prep, h, m, 0)

    from scipy.special import erf

    def gelu(x):
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

    p = model.params
    q = 3
    acc = m.data[q, q] * (h.data[q] @ p["layer0.self"].value.data)
    for j in (0, 2):
        paired = np.concatenate([h.data[q], m.data[q, j] * h.data[j]])
        hid = gelu(paired @ p["layer0.combine.w1"].value.data + p["layer0.combine.b1"].value.data[0])
        fc = hid @ p["layer0.combine.w2"].value.data + p["layer0.combine.b2"].value.data[0]
        acc = acc + fc @ p["layer0.question"].value.data
    assert np.abs(out.data[0] - gelu(acc)).max() < 1e-9


# --- global mix ----------------------------------------------------------

def test_global_mix_single_unit_node_identity():
    g = make_graph(1, [], n_relations=1, q_links=[0])
    model = make_model(g, d=4, activation="identity", seed=1)
    set_param(model, "layer0.mix", np.eye(4))
    h = random_states(model, 1, unit_rows=True)
    out = model.global_mix(h, 0)
    assert np.allclose(out.data, h.data, atol=1e-12)


def test_global_mix_orthonormal_rows_identity():
    d = 5
    g = make_graph(4, [], n_relations=1, q_links=[0])
    model = make_model(g, d=d, activation="identity", seed=1)
    set_param(model, "layer0.mix", np.eye(d))
    h = Matrix(np.eye(d)[:5])
    out = model.global_mix(h, 0)
    assert np.allclose(out.data, h.data, atol=1e-12)


def test_global_mix_matches_composed_matmul_oracle():
    g = make_graph(3, [], n_relations=1, q_links=[0])
    model = make_model(g, d=6, activation="gelu", seed=4)
    h = random_states(model, 4, seed=12)
    out = model.global_mix(h, 0)
    from scipy.special import erf

    m = h.data @ h.data.T
    want = m @ h.data @ model.params["layer0.mix"].value.data
    want = 0.5 * want * (1.0 + erf(want / np.sqrt(2.0)))
    assert np.abs(out.data - want).max() < 1e-9


# --- layer / full model ----------------------------------------------------------

def test_zero_layers_returns_initial_states():
    g = make_graph(3, [(0, 0, 1)], n_relations=2, q_links=[0])
    model = make_model(g, d=4, layers=0)
    prep = make_prep(g, model)
    h0 = model.node_states(prep)
    stacked = np.vstack([prep.entity_embs.data, prep.h_cls[None, :]])
    want = stacked @ model.params["input_proj"].value.data
    assert np.abs(h0.data - want).max() < 1e-9


def test_relevance_ablated_layer_equals_plain_rgcn():
    rng = np.random.default_rng(21)
    for trial in range(5):
        n = int(rng.integers(3, 7))
        edges = []
        for _ in range(n * 2):
            a, b = rng.integers(0, n, 2)
            if a != b:
                edges.append((int(a), int(rng.integers(0, 3)), int(b)))
        g = make_graph(n, edges, n_relations=3)
        model = make_model(g, d=5, layers=2, activation="gelu", seed=trial,
                           use_relevance=False)
        prep = make_prep(g, model, seed=trial)
        got = model.node_states(prep)

        ref = PlainRgcn(layers=2, n_relations=3, activation="gelu")
        for li in range(2):
            ref.weights[(li, "self")] = model.params[f"layer{li}.self"].value.data
            for r in range(3):
                ref.weights[(li, "rel", r)] = model.params[f"layer{li}.rel{r}"].value.data
        h0 = model.node_states(prep, upto_layer=0).data
        want = ref.forward(neighbor_table(g.edges, n, 3), h0)
        assert np.abs(got.data - want).max() < 1e-6


def test_relevance_ablated_grads_equal_plain_rgcn_backward():
    rng = np.random.default_rng(33)
    n = 5
    edges = [(0, 0, 1), (1, 1, 2), (2, 2, 3), (3, 0, 4), (1, 2, 4)]
    g = make_graph(n, edges, n_relations=3)
    model = make_model(g, d=4, layers=2, activation="gelu", seed=5, use_relevance=False)
    prep = make_prep(g, model, seed=6)
    c = rng.standard_normal((n, 4))

    model.params.zero_grads()
    h_node = model.states_node(prep)
    loss = ad.mm(ad.sum_rows(ad.mul(h_node, ad.constant(c))), ad.constant(np.ones((4, 1))))
    ad.backward(loss)

    ref = PlainRgcn(layers=2, n_relations=3, activation="gelu")
    for li in range(2):
        ref.weights[(li, "self")] = model.params[f"layer{li}.self"].value.data
        for r in range(3):
            ref.weights[(li, "rel", r)] = model.params[f"layer{li}.rel{r}"].value.data
    table = neighbor_table(g.edges, n, 3)
    h0 = model.node_states(prep, upto_layer=0).data
    ref.forward(table, h0)
    grads, dh0 = ref.backward(table, c)

    for li in range(2):
        assert np.abs(model.params[f"layer{li}.self"].grad.data - grads[(li, "self")]).max() < 1e-6
        for r in range(3):
            assert np.abs(model.params[f"layer{li}.rel{r}"].grad.data - grads[(li, "rel", r)]).max() < 1e-6
    want_proj = prep.entity_embs.data.T @ dh0
    assert np.abs(model.params["input_proj"].grad.data - want_proj).max() < 1e-6


def test_permutation_equivariance():
    rng = np.random.default_rng(17)
    for trial in range(5):
        n = 5
        edges = [(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 4), (0, 1, 4)]
        g = make_graph(n, edges, n_relations=2, q_links=[0, 2])
        model = make_model(g, d=6, layers=2, seed=trial)
        embs = Matrix(unit_rows(rng.standard_normal((n, model.config.d_lm))))
        h_cls = unit_rows(rng.standard_normal(model.config.d_lm))
        prep = make_prep(g, model, entity_embs=embs, h_cls=h_cls)
        base_states = model.node_states(prep).data
        base_score = float(model.candidate_score_node(prep).value[0, 0])

        perm = rng.permutation(n)
        p_edges = [(int(perm[h]), r, int(perm[t])) for h, r, t in edges]
        p_qlinks = [int(perm[j]) for j in (0, 2)]
        pg = make_graph(n, p_edges, n_relations=2, q_links=p_qlinks)
        p_embs = np.empty_like(embs.data)
        p_embs[perm, :] = embs.data
        p_prep = make_prep(pg, model, entity_embs=Matrix(p_embs), h_cls=h_cls)
        p_states = model.node_states(p_prep).data
        p_score = float(model.candidate_score_node(p_prep).value[0, 0])

        assert np.abs(p_states[perm, :] - base_states[:n]).max() < 1e-6
        assert np.abs(p_states[n] - base_states[n]).max() < 1e-6
        assert abs(p_score - base_score) < 1e-6


def test_relevance_invariants_hold_after_every_layer():
    g = make_graph(4, [(0, 0, 1), (1, 1, 2), (2, 0, 3)], n_relations=2, q_links=[0])
    model = make_model(g, d=5, layers=3, seed=9)
    prep = make_prep(g, model)
    for li in range(4):
        h = model.node_states(prep, upto_layer=li)
        m = relevance_matrix(h)  # raises on violated invariants
        assert np.array_equal(m.data, m.data.T)


# --- pooling and scoring ----------------------------------------------------------

def test_pool_single_entity_row():
    h = Matrix(np.array([[1.0, -2.0, 3.0], [9.0, 9.0, 9.0]]))
    assert np.array_equal(pool_graph(h, 1).data, [[1.0, -2.0, 3.0]])


def test_pool_symmetric_rows_cancel():
    v = np.array([1.0, -4.0, 0.5])
    h = Matrix(np.stack([v, -v]))
    assert np.array_equal(pool_graph(h, 2).data, np.zeros((1, 3)))


def test_pool_matches_column_mean_oracle():
    rng = np.random.default_rng(5)
    h = rng.standard_normal((7, 4))
    got = pool_graph(Matrix(h), 7).data[0]
    assert np.allclose(got, np.mean(h, axis=0), atol=1e-15)


def test_pool_excludes_question_row():
    rng = np.random.default_rng(6)
    h = rng.standard_normal((4, 3))
    got = pool_graph(Matrix(h), 3).data[0]
    assert np.allclose(got, np.mean(h[:3], axis=0), atol=1e-15)


def test_score_zero_weights_zero_everywhere():
    g = make_graph(2, [(0, 0, 1)], n_relations=1, q_links=[0])
    model = make_model(g, d=3)
    for name in ("scorer.w1", "scorer.b1", "scorer.w2", "scorer.b2"):
        model.params[name].value.data.fill(0.0)
    rng = np.random.default_rng(0)
    for _ in range(4):
        s = model.score_from_components(
            rng.standard_normal(model.config.d_lm),
            rng.standard_normal(3),
            rng.standard_normal(3),
        )
        assert s == 0.0


def test_score_hand_fixture_sum_of_hidden():
    g = make_graph(1, [], n_relations=1, q_links=[0])
    model = make_model(g, d=2, d_lm=3, activation="identity", hidden=4, seed=2)
    rng = np.random.default_rng(7)
    w1 = rng.standard_normal((3 + 2 + 2, 4))
    set_param(model, "scorer.w1", w1)
    set_param(model, "scorer.b1", np.zeros((1, 4)))
    set_param(model, "scorer.w2", np.ones((4, 1)))
    set_param(model, "scorer.b2", np.zeros((1, 1)))
    h_cls, h_q, pooled = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
    got = model.score_from_components(h_cls, h_q, pooled)
    want = float(np.sum(np.concatenate([h_cls, h_q, pooled]) @ w1))
    assert abs(got - want) < 1e-9


def test_score_order_sensitivity():
    g = make_graph(1, [], n_relations=1, q_links=[0])
    model = make_model(g, d=4, d_lm=4, seed=3)
    rng = np.random.default_rng(8)
    h_cls, h_q, pooled = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)
    a = model.score_from_components(h_cls, h_q, pooled)
    b = model.score_from_components(h_cls, pooled, h_q)
    assert abs(a - b) > 1e-9


# --- predict and loss ----------------------------------------------------------

def test_predict_basic_and_ties():
    assert predict([0.1, 0.9, 0.3]) == 1
    assert predict([0.5, 0.5]) == 0


def test_predict_rejects_nonfinite():
    with pytest.raises(NumericError):
        predict([0.0, float("nan")])
    with pytest.raises(ValueError):
        predict([1.0])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(-10000, 10000).map(lambda i: i / 100.0), min_size=2, max_size=8),
    st.integers(-5000, 5000).map(lambda i: i / 100.0),
)
def test_predict_invariant_under_constant_shift(scores, c):
    # quantized grid keeps the shift order-preserving in float arithmetic
    assert predict(scores) == predict([s + c for s in scores])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000).map(lambda i: i / 100.0), min_size=2, max_size=6))
def test_predict_invariant_under_increasing_transform(scores):
    # quantized scores keep the transforms strictly increasing in float arithmetic
    assert predict(scores) == predict([2.0 * s + 1.0 for s in scores])
    assert predict(scores) == predict([s ** 3 for s in scores])


def test_loss_uniform_scores():
    assert abs(cross_entropy_loss([0.0] * 5, 2) - np.log(5.0)) < 1e-12


def test_loss_confident_gold_approaches_zero():
    assert cross_entropy_loss([50.0, 0.0, 0.0, 0.0, 0.0], 0) < 1e-20


def test_loss_matches_high_precision_softmax_oracle():
    import mpmath

    mpmath.mp.dps = 60
    rng = np.random.default_rng(10)
    for _ in range(10):
        scores = rng.standard_normal(5) * 3
        gold = int(rng.integers(0, 5))
        got = cross_entropy_loss(scores.tolist(), gold)
        exps = [mpmath.exp(mpmath.mpf(float(s))) for s in scores]
        want = float(-mpmath.log(exps[gold] / mpmath.fsum(exps)))
        assert abs(got - want) < 1e-12


def test_loss_gold_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy_loss([0.0, 1.0], 5)


# --- backward ----------------------------------------------------------

def test_saturated_gold_score_gives_vanishing_loss_and_grads():
    # score = first context feature, so the gold candidate wins by 50 and the
    # softmax saturates: loss < 1e-20 and every gradient is negligibly small
    g = make_graph(1, [], n_relations=1, q_links=[0])
    model = make_model(g, d=2, d_lm=3, activation="identity", seed=0)
    for p in model.params:
        p.value.data.fill(0.0)
    model.params["scorer.w1"].value.data[0, 0] = 1.0
    model.params["scorer.w2"].value.data[0, 0] = 1.0
    embs = Matrix(np.zeros((1, 3)))
    prep_gold = make_prep(g, model, entity_embs=embs, h_cls=np.array([50.0, 0.0, 0.0]))
    prep_other = make_prep(g, model, entity_embs=embs, h_cls=np.zeros(3))
    model.params.zero_grads()
    loss = model.loss_node([prep_gold, prep_other], gold=0)
    assert float(loss.value[0, 0]) < 1e-20
    ad.backward(loss)
    for p in model.params:
        assert np.abs(p.grad.data).max() < 1e-18, p.name


def test_full_model_grad_check_small():
    # unit-norm provider-scale inputs keep the relevance recursion near its
    # fixed point; collapsed or exploded branches make finite differences blind
    g = make_graph(4, [(0, 0, 1), (1, 1, 2), (2, 0, 3)], n_relations=2, q_links=[0, 2])
    model = make_model(g, d=4, d_lm=5, layers=2, seed=101)
    g2 = make_graph(3, [(0, 1, 1), (1, 0, 2)], n_relations=2, q_links=[1])
    prep_a = make_prep(g, model, seed=102)
    prep_b = make_prep(g2, model, seed=103)

    def loss_fn(params):
        return model.loss_node([prep_a, prep_b], gold=1)

    err = ad.grad_check(loss_fn, model.params, epsilon=1e-4)
    assert err < 1e-3


def test_every_parameter_receives_gradient():
    g = make_graph(4, [(0, 0, 1), (1, 1, 2), (2, 0, 3)], n_relations=2, q_links=[0])
    model = make_model(g, d=4, layers=2, seed=20)
    g2 = make_graph(2, [(0, 1, 1)], n_relations=2, q_links=[0])
    prep_a = make_prep(g, model, seed=21, scale=0.5)
    prep_b = make_prep(g2, model, seed=22, scale=0.5)
    model.params.zero_grads()
    ad.backward(model.loss_node([prep_a, prep_b], gold=0))
    for p in model.params:
        if p.name == "scorer.b2":
            continue  # shifts all candidate scores equally; dead under softmax
        assert np.abs(p.grad.data).max() > 0.0, f"dead parameter {p.name}"

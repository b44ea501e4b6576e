import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecpr.cascade_sim import CascadeConfig, CascadeData, LabelError, label_domains
from ecpr.gates import hc_expected_l0
from ecpr.metrics import auc
from ecpr.models import (
    SUB1,
    SUB2,
    Ecmm,
    Heads,
    SharedMlp3Heads,
    build_model,
    ecm_loss,
    ecmm_loss,
    rank_by_head,
    route,
    route_weights,
    two_tower_score,
)
from ecpr.numerics import AdamState, ParameterSet, adam_step, sigmoid

CFG = CascadeConfig(n_users=50, n_items=300, pool_size=100)


def _batch(n, seed=0, cfg=CFG):
    rng = np.random.default_rng(seed)
    vocab = cfg.vocab_sizes()
    feats = np.stack([rng.integers(0, v, n) for v in vocab], axis=1)
    stage = rng.integers(2, 6, n)
    y5 = (stage == 5).astype(np.int64)
    y6 = y5 * rng.integers(0, 2, n)
    z = np.zeros(n, np.int64)
    data = CascadeData(z, feats[:, 0], np.arange(n), feats, stage + y6, y5, y6, z, np.ones(n))
    return label_domains(data)


def _model(kind, **kw):
    return build_model(kind, CFG.vocab_sizes(), list(range(CFG.n_fields)), user_fields=CFG.user_fields(), item_fields=CFG.item_fields(), **kw)


# two tower


def test_two_tower_score_examples():
    assert two_tower_score([1.0, 0.0], [1.0, 0.0]) == (1.0, sigmoid(1.0))
    assert two_tower_score([1.0, 0.0], [0.0, 1.0]) == (0.0, 0.5)
    assert two_tower_score([1.0, 2.0], [3.0, 4.0])[0] == 11.0


# deep baseline


def test_zero_weight_baseline_outputs_half():
    m = _model("deep_baseline")
    p = m.init_params(np.random.default_rng(0))
    zero = ParameterSet({k: np.zeros_like(v) for k, v in p.items()})
    assert np.all(m.predict(zero, _batch(20).features).t1 == 0.5)


def test_softmax_variant_sums_to_one():
    m = _model("deep_baseline_softmax")
    h = m.predict(m.init_params(np.random.default_rng(1)), _batch(50).features)
    assert np.allclose(h.t1 + h.t2 + h.t3, 1.0, atol=1e-15)


def test_baseline_learns_separable_toy_data():
    data = _batch(600, seed=2)
    # click iff the item attribute in field 7 is in the lower half
    y6 = (data.features[:, 7] < CFG.vocab_sizes()[7] // 2).astype(np.int64)
    data = label_domains(CascadeData(data.request_id, data.user_id, data.item_id, data.features, np.where(y6 == 1, 6, 5), np.ones(600, np.int64), y6, data.domain_tag, data.weight))
    m = _model("deep_baseline")
    p = m.init_params(np.random.default_rng(0))
    st_ = AdamState(lr=1e-2)
    for _ in range(150):
        _, g = m.loss_and_grad(p, data)
        adam_step(p, g, st_)
    assert auc(m.predict(p, data.features).t1, y6) > 0.95


# ECM


def test_ecm_heads_arithmetic():
    h = Heads(np.array([0.02]), np.array([0.08]), np.array([0.90]))
    assert h.p_etr[0] == pytest.approx(0.1, abs=1e-15)
    assert h.p_etctr[0] == 0.02
    assert h.p_ctr[0] == pytest.approx(0.2, abs=1e-15)
    u = Heads(np.array([1 / 3]), np.array([1 / 3]), np.array([1 / 3]))
    assert u.p_ctr[0] == 0.5


@pytest.mark.parametrize("kind", ["ecm", "esmm"])
def test_ctr_identity_on_random_samples(kind):
    m = _model(kind)
    h = m.predict(m.init_params(np.random.default_rng(3)), _batch(10**4, seed=3).features)
    assert np.max(np.abs(h.p_etctr - h.p_etr * h.p_ctr)) < 1e-12


def test_ecm_loss_examples():
    assert ecm_loss([0.0, 0.0, 0.0], 1) == pytest.approx(math.log(3), abs=1e-15)
    assert ecm_loss([50.0, 0.0, 0.0], 1) < 1e-20
    logits = np.random.default_rng(0).normal(size=(5, 3))
    tags = np.array([1, 2, 3, 1, 2])
    assert ecm_loss(logits, tags) == pytest.approx(np.mean([ecm_loss(l, t) for l, t in zip(logits, tags)]), abs=1e-15)
    with pytest.raises(LabelError):
        ecm_loss([0.0, 0.0, 0.0], 4)


# ESMM


def test_esmm_product_heads():
    m = _model("esmm")
    p = m.init_params(np.random.default_rng(4))
    # towers saturated to (sigmoid -> 0.1, 0.2) via zero weights and chosen output biases
    for k in p:
        if not k.startswith("emb"):
            p[k][:] = 0.0
    p["etr.b3"][:] = math.log(0.1 / 0.9)
    p["ctr.b3"][:] = math.log(0.2 / 0.8)
    h = m.predict(p, _batch(4).features)
    assert np.allclose(h.p_etctr, 0.02, atol=1e-15)
    p["ctr.b3"][:] = 800.0  # CTR tower saturates to exactly 1
    h = m.predict(p, _batch(4).features)
    assert np.array_equal(h.p_etctr, h.p_etr)


def test_esmm_forward_is_product_of_towers():
    m = _model("esmm")
    h = m.predict(m.init_params(np.random.default_rng(5)), _batch(64).features)
    assert np.array_equal(h.t1, h.etr * h.ctr)


# ECMM routing


def test_routing_selection_limit():
    rng = np.random.default_rng(0)
    outputs = rng.normal(size=(SUB1, 5, 4))
    z = np.zeros((SUB1, SUB2))
    pick = [3, 0, 7, 5]
    for j, i in enumerate(pick):
        z[i, j] = 1.0
    w, _, _ = route_weights(np.ones((SUB1, SUB2)), z)
    routed = route(w, outputs)
    for j, i in enumerate(pick):
        assert np.array_equal(routed[j], outputs[i])


def test_routing_uniform_average():
    outputs = np.random.default_rng(1).normal(size=(SUB1, 3, 2))
    w, _, _ = route_weights(np.full((SUB1, SUB2), 2.5), np.ones((SUB1, SUB2)))
    assert np.allclose(route(w, outputs), outputs.mean(axis=0)[None], atol=1e-15)


def test_routing_all_closed_gives_zero_not_nan():
    w, _, _ = route_weights(np.ones((SUB1, SUB2)), np.zeros((SUB1, SUB2)))
    assert np.all(w == 0.0)


def test_ecmm_etr_never_exceeds_one():
    m = _model("ecmm")
    p = m.init_params(np.random.default_rng(0))
    p["tower.0.b1"][:] = 5.0
    p["tower.1.b1"][:] = 5.0
    h = m.predict(p, _batch(32).features)
    assert np.all(h.p_etr <= 1.0) and np.all(h.p_etctr <= h.p_etr + 1e-7)


# ECMM loss


def test_ecmm_loss_example():
    assert ecmm_loss([0.2], [0.3], [0.5], [1], [0]) == pytest.approx(1.6094379124341003, abs=1e-15)
    assert ecmm_loss([0.2], [0.3], [0.5], [1], [0]) == pytest.approx(-math.log(0.8) - 2 * math.log(0.5), abs=1e-15)


def test_ecmm_loss_perfect_click():
    assert ecmm_loss([1.0 - 1e-12], [0.0], [1e-12], [1], [1]) < 1e-6


def test_ecmm_loss_label_inconsistency():
    with pytest.raises(LabelError):
        ecmm_loss([0.2], [0.3], [0.5], [0], [1])


def test_ecmm_l0_term_is_additive():
    m0, m1 = _model("ecmm", l0_lambda=0.0), _model("ecmm", l0_lambda=0.01)
    p = m0.init_params(np.random.default_rng(2))
    batch = _batch(16)
    noise = m0.draw_noise(np.random.default_rng(3))
    expected = sum(hc_expected_l0(p[n], m1.hc).sum() for n in ("route1.log_alpha", "route2.log_alpha"))
    assert m1.loss(p, batch, noise) - m0.loss(p, batch, noise) == pytest.approx(0.01 * expected, abs=1e-12)


# degeneracy


def test_open_ecmm_equals_plain_shared_mlp_bitwise():
    ecmm = _model("ecmm")
    ref = SharedMlp3Heads(ecmm)
    p = ref.init_params(np.random.default_rng(7))
    features = _batch(64).features
    expected = ref.forward(p, features)
    heads = ecmm.predict(ref.to_ecmm_params(p), features, mode="open")
    for got, want in zip((heads.t1, heads.t2, heads.t3), expected):
        assert np.array_equal(got, want)


# ranking


def test_rank_by_head_examples():
    assert rank_by_head([0.3], [42]).tolist() == [42]
    assert rank_by_head([0.5, 0.5], [9, 4]).tolist() == [4, 9]
    with pytest.raises(ValueError):
        rank_by_head([], [])


def test_rank_by_head_matches_full_sort():
    rng = np.random.default_rng(11)
    items = rng.permutation(1000)[:100]
    scores = rng.integers(0, 30, 100) / 10.0
    brute = [i for _, i in sorted(zip((-scores).tolist(), items.tolist()))]
    assert rank_by_head(scores, items).tolist() == brute


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40))
def test_rank_by_head_invariant_under_increasing_transform(scores):
    scores = np.array(scores)
    items = np.arange(len(scores))
    # doubling is strictly increasing and exact, so it cannot merge distinct scores
    assert np.array_equal(rank_by_head(scores, items), rank_by_head(scores * 2.0, items))


def test_unknown_kind_and_head():
    with pytest.raises(ValueError):
        build_model("nope", CFG.vocab_sizes(), [0])
    with pytest.raises(ValueError):
        Heads(np.zeros(1)).select("t2")
    with pytest.raises(ValueError):
        Ecmm(CFG.vocab_sizes(), [0], towers=5)

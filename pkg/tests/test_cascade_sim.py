import math
from fractions import Fraction

import numpy as np
import pytest

from ecpr.cascade_sim import (
    TAG_CLICK,
    TAG_EXPOSE,
    TAG_IMPLY,
    CascadeConfig,
    CascadeData,
    ConfigError,
    LabelError,
    chi_square_shift,
    empirical_rate_check,
    generate_world,
    label_domains,
    read_dataset,
    simulate,
    simulate_request,
    subsample_domains,
    write_dataset,
)
from ecpr.numerics import RngStream, sigmoid


def _records(y5, y6, stage):
    n = len(y5)
    z = np.zeros(n, dtype=np.int64)
    return CascadeData(
        z, z, np.arange(n), np.zeros((n, 4), np.int64), np.asarray(stage), np.asarray(y5), np.asarray(y6), z, np.ones(n)
    )


def test_world_is_deterministic(small_cfg):
    a, b = generate_world(9, small_cfg), generate_world(9, small_cfg)
    assert np.array_equal(a.user_vec, b.user_vec) and np.array_equal(a.item_feats, b.item_feats)
    c = generate_world(10, small_cfg)
    assert not np.array_equal(a.item_vec, c.item_vec)


def test_zero_latent_dim_gives_constant_propensity():
    cfg = CascadeConfig(n_users=5, n_items=300, latent_dim=0, relevance_bias=-1.3)
    w = generate_world(0, cfg)
    p = w.propensity(np.arange(5).repeat(3), np.arange(15))
    assert np.allclose(p, sigmoid(-1.3), atol=0, rtol=0)


def test_mean_propensity_matches_independent_monte_carlo(small_cfg):
    world = generate_world(4, small_cfg)
    rng = np.random.default_rng(0)
    users = rng.integers(0, small_cfg.n_users, 10**4)
    items = rng.integers(0, small_cfg.n_items, 10**4)
    p = world.propensity(users, items)
    # oracle: draw fresh latent vectors from the generator's distribution
    d = small_cfg.latent_dim
    scale = math.sqrt(1.0 / math.sqrt(d))
    u = rng.normal(size=(10**6, d)) * scale
    v = rng.normal(size=(10**6, d)) * scale
    oracle = sigmoid(small_cfg.relevance_scale * np.einsum("ij,ij->i", u, v) + small_cfg.relevance_bias)
    se = p.std() / math.sqrt(len(p))
    # finite world: the pair population is itself a sample, allow both errors
    assert abs(p.mean() - oracle.mean()) < 3 * se + 3 * oracle.std() * math.sqrt(1 / small_cfg.n_users + 1 / small_cfg.n_items)


def test_request_sizes_forced_by_config(small_cfg):
    world = generate_world(1, small_cfg)
    recs = simulate_request(world, small_cfg, 0, 3, RngStream(1, "r").generator())
    assert len(recs) == 50
    assert recs.y5.sum() == 5
    assert np.all(recs.y6 <= recs.y5)
    counts = [(recs.deepest_stage >= k).sum() for k in (2, 3, 4, 5)]
    assert counts == [50, 20, 10, 5]


def test_noise_free_cascade_exposes_top_items_by_propensity():
    cfg = CascadeConfig(n_users=20, n_items=400, stage_noise=(0, 0, 0, 0), stage_bias=(0, 0, 0, 0))
    world = generate_world(2, cfg)
    rng = RngStream(2, "r").generator()
    pool_rng = RngStream(2, "r").generator()
    recs = simulate_request(world, cfg, 0, 7, rng)
    pool = pool_rng.choice(cfg.n_items, cfg.pool_size, replace=False)
    brute = pool[np.argsort(-world.propensity(7, pool), kind="stable")[:5]]
    assert set(recs.item_id[recs.y5 == 1].tolist()) == set(brute.tolist())


def test_pool_too_small_is_config_error():
    cfg = CascadeConfig(n_items=100, pool_size=40)
    with pytest.raises(ConfigError):
        cfg.validate()
    world = generate_world(0, CascadeConfig(n_items=100, pool_size=60))
    with pytest.raises(ConfigError):
        simulate_request(world, cfg, 0, 0, RngStream(0, "x").generator())


def test_chain_containment_and_labels(small_sim):
    for s in small_sim.eval.request_slices():
        stage = small_sim.eval.deepest_stage[s]
        counts = [(stage >= k).sum() for k in (2, 3, 4, 5)] + [small_sim.eval.y6[s].sum()]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
    d = small_sim.eval
    assert np.all(d.y6 <= d.y5)
    assert np.array_equal(d.y5 == 1, d.deepest_stage >= 5)
    assert np.array_equal(d.domain_tag == TAG_CLICK, d.y6 == 1)
    assert np.array_equal(d.domain_tag == TAG_EXPOSE, (d.y5 == 1) & (d.y6 == 0))
    assert np.array_equal(d.domain_tag == TAG_IMPLY, d.y5 == 0)


@pytest.mark.parametrize(
    "y5,y6,stage,tag",
    [(1, 1, 6, TAG_CLICK), (1, 0, 5, TAG_EXPOSE), (0, 0, 2, TAG_IMPLY), (0, 0, 3, TAG_IMPLY), (0, 0, 4, TAG_IMPLY)],
)
def test_label_domains_table(y5, y6, stage, tag):
    assert label_domains(_records([y5], [y6], [stage])).domain_tag[0] == tag


def test_label_domains_rejects_click_without_exposure():
    with pytest.raises(LabelError):
        label_domains(_records([0], [1], [3]))


def test_subsample_identity_at_full_rate(small_sim):
    out = subsample_domains(small_sim.eval, (1.0, 1.0, 1.0, 1.0), np.random.default_rng(0))
    assert len(out) == len(small_sim.eval) and np.all(out.weight == 1.0)


def test_subsample_binomial_bound():
    n = 10**6
    recs = label_domains(_records(np.ones(n, np.int64), np.zeros(n, np.int64), np.full(n, 5)))
    kept = len(subsample_domains(recs, (1.0, 0.4, 0.05, 0.01), np.random.default_rng(1)))
    assert abs(kept - 0.4 * n) < 3 * math.sqrt(n * 0.4 * 0.6)


def test_subsample_records_rates_and_preserves_domain_ordering(small_sim):
    full = np.bincount(small_sim.train_full.domain_tag, minlength=4)
    assert full[TAG_CLICK] < full[TAG_EXPOSE] < full[TAG_IMPLY]
    train = small_sim.train
    counts = np.bincount(train.domain_tag, minlength=4)
    # kept implication records per request are capped at 0.05*15 + 0.01*30 = 1.05,
    # below the ~1.6 kept non-click exposures, so only t1 < t2 survives subsampling
    assert counts[TAG_CLICK] < counts[TAG_EXPOSE]
    expected = np.select(
        [train.domain_tag == 1, train.domain_tag == 2, train.deepest_stage >= 3], [1.0, 0.4, 0.05], 0.01
    )
    assert np.array_equal(train.weight, expected)


def test_rate_check_counts():
    y5 = np.r_[np.ones(100, np.int64), np.zeros(900, np.int64)]
    y6 = np.r_[np.ones(10, np.int64), np.zeros(990, np.int64)]
    rc = empirical_rate_check(_records(y5, y6, np.where(y5 == 1, 5, 2)))
    assert (rc.etr, rc.ctr, rc.etctr) == (Fraction(1, 10), Fraction(1, 10), Fraction(1, 100))
    rc = empirical_rate_check(_records(y5, np.zeros(1000, np.int64), np.where(y5 == 1, 5, 2)))
    assert rc.ctr == 0 and rc.etctr == 0
    rc = empirical_rate_check(_records(np.zeros(3, np.int64), np.zeros(3, np.int64), [2, 2, 3]))
    assert rc.ctr is None


def test_rate_identity_on_generated_split(small_sim):
    rc = empirical_rate_check(small_sim.eval)
    assert rc.etr * rc.ctr == rc.etctr
    assert rc.etctr == Fraction(int(small_sim.eval.y6.sum()), len(small_sim.eval))


def test_selection_bias_shifts_bid_histogram():
    cfg = CascadeConfig(n_users=200, n_items=2000, n_train_requests=0, n_eval_requests=400)
    bid_field = cfg.n_fields - 2
    biased = chi_square_shift(simulate(0, cfg).eval, bid_field, 8)
    null = [
        chi_square_shift(simulate(s, CascadeConfig(**{**cfg.__dict__, "stage_bias": (0, 0, 0, 0)})).eval, bid_field, 8)
        for s in range(10)
    ]
    assert biased > np.quantile(null, 0.99)
    # 99th percentile of chi-square with 7 degrees of freedom
    assert biased > 18.475


def test_dataset_roundtrip_and_determinism(small_cfg, tmp_path):
    a, b = simulate(5, small_cfg), simulate(5, small_cfg)
    write_dataset(tmp_path / "a.tsv", a.train, small_cfg.n_fields)
    write_dataset(tmp_path / "b.tsv", b.train, small_cfg.n_fields)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    back = read_dataset(tmp_path / "a.tsv")
    for col in ("request_id", "item_id", "features", "deepest_stage", "y5", "y6", "domain_tag", "weight"):
        assert np.array_equal(getattr(back, col), getattr(a.train, col))
    header = (tmp_path / "a.tsv").read_text().splitlines()[0]
    assert header == "#ecpr-dataset v1 fields=12"


def test_records_view(small_sim):
    rec = next(small_sim.eval.records())
    assert len(rec.features) == 12 and rec.domain_tag in (1, 2, 3)

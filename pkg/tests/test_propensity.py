import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax
from scipy.stats import spearmanr
from sklearn.metrics import roc_auc_score

from cfeval import core, propensity as P, sim

from conftest import make_instance


def _policy_on_ad_value():
    """d = q = 1 policy whose score is the ad feature itself."""
    return sim.SoftmaxPolicy(1, 1, [0.0, 1.0, 0.0])


def test_equal_scores_split_evenly():
    pol = _policy_on_ad_value()
    cands = [(1, [0.7]), (2, [0.7])]
    assert P.oracle_propensity(pol, [0.3], cands, 1) == pytest.approx(0.5, abs=1e-15)


def test_log3_scores():
    pol = _policy_on_ad_value()
    cands = [core.Ad(1, (0.0,)), core.Ad(2, (np.log(3.0),))]
    assert P.oracle_propensity(pol, [0.0], cands, 1) == pytest.approx(0.25, abs=1e-12)
    assert P.oracle_propensity(pol, [0.0], cands, 2) == pytest.approx(0.75, abs=1e-12)


def test_high_temperature_is_uniform():
    pol = sim.SoftmaxPolicy(1, 1, [0.0, 1.0, 0.0], temperature=1e6)
    feats = [[-3.0], [0.0], [2.0], [5.0]]
    cands = list(zip(range(4), feats))
    probs = [P.oracle_propensity(pol, [0.0], cands, i) for i in range(4)]
    # direct limit: softmax(s / T) for T = 1e6
    expected = softmax(np.array([-3.0, 0.0, 2.0, 5.0]) / 1e6)
    np.testing.assert_allclose(probs, expected, atol=1e-15)
    assert max(abs(p - 0.25) for p in probs) < 1e-4


def test_ad_outside_candidates():
    with pytest.raises(P.CandidateError):
        P.oracle_propensity(_policy_on_ad_value(), [0.0], [(1, [0.0]), (2, [1.0])], 3)


def test_candidate_probabilities_sum_to_one(small):
    _, _, source, targets, bundle = small
    for pol in [source] + targets:
        probs = pol.probabilities(bundle.source.contexts, bundle.ad_features(bundle.candidates))
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12


def test_identity_target_weights_are_one(small):
    _, _, source, _, bundle = small
    table = P.oracle_weights(bundle, source, [source, source])
    np.testing.assert_array_equal(table.weights, 1.0)


def test_two_candidate_weights():
    from test_sim import two_candidate_instance

    truth, source, target, bundle = two_candidate_instance()
    table = P.oracle_weights(bundle, source, [target])
    # logged ad id 1 has target probability 0.9, source 0.5
    assert table.weights[0, 0] == pytest.approx(1.8, abs=1e-12)
    other = core.EvalBundle(
        bundle.meta, core.SourceData([11], [[0.0]], [0], [0.2], [0.5]), bundle.targets,
        bundle.candidates, bundle.inventory_ids, bundle.inventory,
    )
    assert P.oracle_weights(other, source, [target]).weights[0, 0] == pytest.approx(0.2, abs=1e-12)


def test_oracle_ratio_identity(small):
    _, _, source, targets, bundle = small
    table = P.oracle_weights(bundle, source, targets)
    feats = lambda i: list(zip(bundle.candidates[i].tolist(), bundle.ad_features(bundle.candidates[i])))
    for i in range(0, bundle.n, 97):
        x, a = bundle.source.contexts[i], int(bundle.source.ad_ids[i])
        p_s = P.oracle_propensity(source, x, feats(i), a)
        assert p_s == pytest.approx(bundle.source.propensities[i], rel=1e-12)
        for k, t in enumerate(targets):
            assert table.weights[i, k] == pytest.approx(P.oracle_propensity(t, x, feats(i), a) / p_s, rel=1e-12)


def test_weight_mean_near_one(default_instance):
    _, _, source, targets, bundle = default_instance
    w = P.oracle_weights(bundle, source, targets).weights
    assert np.all(np.abs(w.mean(axis=0) - 1.0) < 0.05)


def test_self_normalization_shrinks_with_n():
    tolerances = {2_000: 0.15, 10_000: 0.08, 50_000: 0.05}
    for n, tol in tolerances.items():
        _, _, source, targets, bundle = make_instance(5, n=n, inventory_size=200, candidates_per_request=20)
        w = P.oracle_weights(bundle, source, targets).weights
        assert np.all(np.abs(w.mean(axis=0) - 1.0) < tol), (n, w.mean(axis=0))


def _fit_pair(bundle, k, **kw):
    src, tgt = bundle.source, bundle.target(k)
    return P.fit_density_ratio(
        src.contexts, bundle.ad_features(src.ad_ids), tgt.contexts, bundle.ad_features(tgt.ad_ids), k=k, **kw
    )


def test_identical_policies_give_chance_auc():
    cfg, truth, source, _, _ = make_instance(0, n=10_000, inventory_size=200, candidates_per_request=20)
    bundle = sim.simulate(cfg, truth, source, [source] * 3)
    model = _fit_pair(bundle, 1)
    src, tgt = bundle.source, bundle.target(1)
    qs = model.probability(src.contexts, bundle.ad_features(src.ad_ids))
    qt = model.probability(tgt.contexts, bundle.ad_features(tgt.ad_ids))
    auc = roc_auc_score(np.r_[np.zeros(len(qs)), np.ones(len(qt))], np.r_[qs, qt])
    assert abs(auc - 0.5) < 0.02
    w, _ = P.odds_weights(qs)
    assert abs(np.median(w) - 1.0) < 0.05


def test_density_ratio_deterministic(small):
    bundle = small[-1]
    a = _fit_pair(bundle, 2, seed=3, epochs=20)
    b = _fit_pair(bundle, 2, seed=3, epochs=20)
    assert a.theta.tobytes() == b.theta.tobytes()


def test_separable_sets_saturate_and_need_clipping():
    x = np.zeros((200, 1))
    a_s = np.full((200, 1), -3.0)
    a_t = np.full((200, 1), 3.0)
    model = P.fit_density_ratio(x, a_s, x, a_t, epochs=500, l2=0.0)
    w, _ = P.odds_weights(model.probability(x, a_t))
    assert w.min() > 100
    table = P.WeightTable(np.arange(200), w[:, None], P.ESTIMATED)
    clipped = P.clip_weights(table, 20.0)
    assert clipped.weights.max() == 20.0 and clipped.clipped_fraction == (1.0,)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    x = np.zeros((50, 1))
    with pytest.raises(P.DivergenceError, match="smaller learning rate"):
        P.fit_density_ratio(x, np.full((50, 1), -1.0), x, np.full((50, 1), 1.0), learning_rate=1e308, epochs=3)


def test_odds_arithmetic():
    w, guarded = P.odds_weights([0.5, 0.75])
    np.testing.assert_allclose(w, [1.0, 3.0])
    assert guarded == 0
    w, guarded = P.odds_weights([1.0])
    assert guarded == 1 and w[0] == pytest.approx((1 - 1e-6) / 1e-6)


def test_estimate_weights_constant_classifier(small):
    bundle = small[-1]
    zero = [P.DensityRatioModel(k, 8, 8, np.zeros(25)) for k in (1, 2, 3)]
    table = P.estimate_weights(zero, bundle)
    assert table.mode == P.ESTIMATED
    np.testing.assert_allclose(table.weights, 1.0)


def test_classifier_odds_recover_discrete_ratios():
    """Two-point toy: p_S = (0.5, 0.5), p_T = (0.8, 0.2) -> ratios 1.6 and 0.4."""
    rng = np.random.default_rng(0)
    n = 10_000
    pts = np.array([[-1.0], [1.0]])
    s_idx = rng.random(n) < 0.5
    t_idx = rng.random(n) < 0.8
    x = np.zeros((n, 1))
    model = P.fit_density_ratio(x, pts[s_idx.astype(int)], x, pts[t_idx.astype(int)])
    w, _ = P.odds_weights(model.probability(np.zeros((2, 1)), pts[::-1]))
    # empirical frequencies are the best any fit can do; compare against the population ratios
    np.testing.assert_allclose(w, [1.6, 0.4], rtol=0.05)


def test_estimated_weights_track_oracle():
    _, _, source, targets, bundle = make_instance(0, n=10_000, inventory_size=200, candidates_per_request=20)
    est = P.estimate_weights(P.fit_density_ratios(bundle, seed=0), bundle)
    orc = P.oracle_weights(bundle, source, targets)
    for k in range(3):
        assert spearmanr(est.weights[:, k], orc.weights[:, k])[0] > 0.9


def test_clip_identity_and_constant():
    t = P.WeightTable(np.arange(4), np.full((4, 2), 5.0))
    same = P.clip_weights(t, np.inf)
    np.testing.assert_array_equal(same.weights, t.weights)
    assert same.clipped_fraction == (0.0, 0.0)
    two = P.clip_weights(t, 2.0)
    np.testing.assert_array_equal(two.weights, 2.0)
    assert two.clipped_fraction == (1.0, 1.0)
    assert P.weight_diagnostics(two)["targets"][0]["clipped_fraction"] == 1.0


def test_default_estimated_run_rarely_clips(default_instance):
    bundle = default_instance[-1]
    table = P.clip_weights(P.estimate_weights(P.fit_density_ratios(bundle, seed=0), bundle), 20.0)
    assert max(table.clipped_fraction) < 0.01


def test_clip_rejects_nonpositive_cap():
    with pytest.raises(ValueError):
        P.clip_weights(P.WeightTable(np.arange(1), [[1.0]]), 0.0)


@settings(max_examples=50, deadline=None)
@given(
    w=st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=30),
    cap=st.floats(1e-3, 1e3),
)
def test_clip_monotone_and_idempotent(w, cap):
    t = P.WeightTable(np.arange(len(w)), np.array(w)[:, None])
    c1 = P.clip_weights(t, cap)
    c2 = P.clip_weights(c1, cap)
    assert np.all(c1.weights <= t.weights)
    assert c1.weights.max() <= cap
    np.testing.assert_array_equal(c1.weights, c2.weights)


def test_ess_equal_and_degenerate():
    n = 10
    eq = P.weight_diagnostics(P.WeightTable(np.arange(n), np.full((n, 1), 3.0)))
    assert eq["targets"][0]["ess"] == pytest.approx(n)
    w = np.zeros((n, 1))
    w[0] = n
    one = P.weight_diagnostics(P.WeightTable(np.arange(n), w))
    assert one["targets"][0]["ess"] == pytest.approx(1.0)


def test_default_diagnostics_report_ess(default_instance):
    _, _, source, targets, bundle = default_instance
    diag = P.weight_diagnostics(P.oracle_weights(bundle, source, targets))
    for t in diag["targets"]:
        assert 0 < t["ess"] <= bundle.n
    print({t["k"]: round(t["ess"]) for t in diag["targets"]})


def test_weights_file_round_trip(tmp_path, small):
    _, _, source, targets, bundle = small
    table = P.oracle_weights(bundle, source, targets)
    table.save(tmp_path / "weights.jsonl")
    back = P.WeightTable.load(tmp_path / "weights.jsonl")
    np.testing.assert_array_equal(back.weights, table.weights)
    np.testing.assert_array_equal(back.request_ids, table.request_ids)
    assert back.mode == P.ORACLE
    first = (tmp_path / "weights.jsonl").read_text().splitlines()[0]
    assert set(__import__("json").loads(first)) == {"request_id", "k", "w", "mode"}


def test_table_rejects_negative():
    with pytest.raises(ValueError):
        P.WeightTable(np.arange(2), [[1.0], [-0.1]])

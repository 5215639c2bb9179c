import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from cfeval import core, propensity as P
from cfeval.features import DimensionError, featurize
from cfeval.reward_model import (
    BASELINE, IDENTITY, LOG_LOSS, PROPOSED, SIGMOID, SQUARED,
    RewardModel, TrainConfig, loss_and_grad, n_params, predict, sample_weight, train,
)


def finite_difference(f, theta, eps=1e-5):
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def max_rel_error(analytic, numeric):
    """Componentwise error relative to the gradient's scale."""
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


def test_featurize_zero_inputs():
    np.testing.assert_array_equal(featurize(np.zeros(3), np.zeros(2)), [0, 0, 0, 0, 0, 0, 0, 1])


def test_featurize_layout():
    np.testing.assert_array_equal(featurize([1.0, 2.0], [3.0, 4.0]), [1, 2, 3, 4, 3, 8, 1])


def test_featurize_pure_and_batched():
    rng = np.random.default_rng(0)
    x, a = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    batch = featurize(x, a)
    assert batch.shape == (5, 3 + 4 + 3 + 1)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], featurize(x[i], a[i]))
        np.testing.assert_array_equal(featurize(x[i], a[i]), featurize(x[i], a[i]))


def test_sample_weight_full_overlap_is_zero():
    for beta in (0.0, 1.0, 7.5):
        assert sample_weight([1.0, 1.0, 1.0], beta) == 0.0


def test_sample_weight_two_targets():
    # |2 - 1| + |0.5 - 1| + 1 * |2 - 0.5|
    assert sample_weight([2.0, 0.5], 1.0) == pytest.approx(3.0, abs=1e-15)


@pytest.mark.parametrize("c", [0.0, 0.3, 1.0, 4.2])
@pytest.mark.parametrize("beta", [0.0, 1.0, 3.0])
def test_sample_weight_equal_targets(c, beta):
    assert sample_weight([c, c, c], beta) == pytest.approx(3 * abs(c - 1))


@settings(max_examples=100, deadline=None)
@given(w=st.floats(0, 1e4), beta=st.floats(0, 10))
def test_single_target_reduction(w, beta):
    assert sample_weight([w], beta) == abs(w - 1.0)


@settings(max_examples=100, deadline=None)
@given(
    w=st.lists(st.floats(0, 100), min_size=1, max_size=6),
    beta=st.floats(0, 10),
)
def test_sample_weight_matches_definition(w, beta):
    direct = sum(abs(v - 1) for v in w) + beta * sum(
        abs(w[i] - w[j]) for i in range(len(w)) for j in range(i + 1, len(w))
    )
    assert sample_weight(w, beta) == pytest.approx(direct, rel=1e-12, abs=1e-12)
    assert sample_weight(np.array([w, w]), beta) == pytest.approx([direct, direct], rel=1e-12, abs=1e-12)


def test_overlap_floor_adds_constant():
    assert sample_weight([1.0, 1.0], 1.0, overlap_floor=0.25) == 0.25


def test_zero_sample_weights_leave_ridge_only():
    rng = np.random.default_rng(0)
    model = RewardModel(2, 2, rng.normal(size=7))
    phi = rng.normal(size=(10, 7))
    loss, grad = loss_and_grad(model, phi, rng.integers(0, 2, 10), np.zeros(10), l2=0.3)
    assert loss == pytest.approx(0.15 * model.theta @ model.theta)
    np.testing.assert_allclose(grad, 0.3 * model.theta)


def test_squared_loss_hand_gradient():
    # d/dtheta [2 * (theta * 1 - 1)^2] at theta = 0 is -4
    model = RewardModel.zeros(0, 0, core.CONTINUOUS)
    assert model.theta.shape == (1,)
    loss, grad = loss_and_grad(model, [[1.0]], [1.0], [2.0], l2=0.0)
    assert loss == 2.0
    np.testing.assert_array_equal(grad, [-4.0])


@pytest.mark.parametrize("hidden", [0, 4])
@pytest.mark.parametrize("kind", [LOG_LOSS, SQUARED])
@pytest.mark.parametrize("weighted", [False, True])
def test_gradient_matches_finite_differences(kind, weighted, hidden):
    rng = np.random.default_rng([0 if kind == LOG_LOSS else 1, int(weighted), hidden])
    link = SIGMOID if kind == LOG_LOSS else IDENTITY
    worst = 0.0
    for _ in range(100 if hidden == 0 else 20):
        d, q = 3, 2
        model = RewardModel(d, q, rng.normal(size=n_params(d, q, hidden)), link, kind, hidden)
        phi = featurize(rng.normal(size=(20, d)), rng.normal(size=(20, q)))
        y = rng.integers(0, 2, 20).astype(float) if kind == LOG_LOSS else rng.normal(size=20)
        sw = rng.exponential(size=20) if weighted else np.ones(20)
        l2 = 0.1
        _, g = loss_and_grad(model, phi, y, sw, l2)
        num = finite_difference(lambda th: loss_and_grad(model, phi, y, sw, l2, th)[0], model.theta.copy())
        worst = max(worst, max_rel_error(g, num))
    assert worst < 1e-5


def test_predict_zero_theta():
    model = RewardModel.zeros(2, 3)
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(predict(model, rng.normal(size=(6, 2)), rng.normal(size=(6, 3))), 0.5)


def test_predict_bias_log3():
    theta = np.zeros(8)
    theta[-1] = np.log(3.0)
    assert float(predict(RewardModel(2, 3, theta), [0.4, -1.0], [1.0, 2.0, 3.0])) == pytest.approx(0.75, abs=1e-12)


def test_predict_dimension_mismatch():
    with pytest.raises(DimensionError):
        predict(RewardModel.zeros(2, 3), np.zeros(3), np.zeros(3))


def test_model_file_round_trip(tmp_path):
    m = RewardModel(2, 2, np.arange(7.0), metadata={"final_loss": 0.1})
    m.save(tmp_path / "reward_model.json")
    back = RewardModel.load(tmp_path / "reward_model.json")
    np.testing.assert_array_equal(back.theta, m.theta)
    assert back.metadata == {"final_loss": 0.1}
    assert back.to_dict()["layout"]["blocks"] == ["context", "ad", "interaction", "bias"]


def _table(bundle, w):
    return P.WeightTable(bundle.source.request_ids, w)


def test_all_overlap_training_never_moves(small):
    bundle = small[-1]
    table = _table(bundle, np.ones((bundle.n, 3)))
    model = train(bundle, table, TrainConfig(weight_mode=PROPOSED, epochs=5, l2=1e-3))
    assert np.all(model.theta == 0.0)
    assert all(v == 0.0 for v in model.metadata["loss_history"])


def test_baseline_loss_decreases_each_epoch():
    rng = np.random.default_rng(0)
    n = 2000
    x = rng.normal(size=(n, 2))
    a = rng.normal(size=(n, 2))
    y = (x[:, 0] + a[:, 1] > 0).astype(float)
    bundle = core.EvalBundle(
        core.BundleMeta(2, 2, 1, n),
        core.SourceData(np.arange(n), x, np.arange(n), y),
        (core.TargetData(1, np.arange(n), x, np.arange(n)),),
        np.arange(n)[:, None],
        np.arange(n),
        a,
    )
    model = train(bundle, None, TrainConfig(weight_mode=BASELINE, epochs=15, learning_rate=0.05, decay=0.0))
    hist = model.metadata["loss_history"]
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_training_deterministic(small):
    _, _, source, targets, bundle = small
    table = P.oracle_weights(bundle, source, targets)
    cfg = TrainConfig(seed=5, epochs=5)
    assert train(bundle, table, cfg).theta.tobytes() == train(bundle, table, cfg).theta.tobytes()


def test_hidden_variant_trains(small):
    _, _, source, targets, bundle = small
    model = train(bundle, None, TrainConfig(weight_mode=BASELINE, hidden=8, epochs=3))
    assert model.theta.shape == (n_params(8, 8, 8),)
    p = predict(model, bundle.source.contexts[:5], bundle.ad_features(bundle.source.ad_ids[:5]))
    assert np.all((p > 0) & (p < 1))


def test_train_takes_a_table_not_policies():
    import inspect

    assert list(inspect.signature(train).parameters) == ["bundle", "weight_table", "config"]


def test_divergence_names_epoch_and_batch(small):
    _, _, source, targets, bundle = small
    with pytest.raises(P.DivergenceError, match=r"epoch 0, batch \d+"):
        with np.errstate(all="ignore"):
            train(bundle, None, TrainConfig(weight_mode=BASELINE, learning_rate=1e300, epochs=2))


def two_region_instance(seed, n=4000):
    """Overlap region (|x| = 0.5, all w = 1) and non-overlap region (|x| = 2, w != 1).

    The true click logit is +2a in the overlap region and -2a outside it. The
    feature map [x, a, x*a, 1] is odd in x for the x*a term, so no single
    linear model fits both regions.
    """
    rng = np.random.default_rng(seed)
    region = rng.random(n) < 0.5  # True: non-overlap
    sign = rng.choice([-1.0, 1.0], n)
    x = np.where(region, 2.0, 0.5) * sign
    a = rng.normal(size=n)
    mu = expit(np.where(region, -2.0, 2.0) * a)
    y = (rng.random(n) < mu).astype(float)
    w = np.ones((n, 2))
    w[region] = [2.5, 0.3]
    bundle = core.EvalBundle(
        core.BundleMeta(1, 1, 2, n),
        core.SourceData(np.arange(n), x[:, None], np.arange(n), y),
        tuple(core.TargetData(k, np.arange(n), x[:, None], np.arange(n)) for k in (1, 2)),
        np.arange(n)[:, None],
        np.arange(n),
        a[:, None],
    )
    return bundle, P.WeightTable(np.arange(n), w), region, mu


def region_errors(seed):
    bundle, table, region, mu = two_region_instance(seed)
    out = {}
    for mode in (PROPOSED, BASELINE):
        model = train(bundle, table, TrainConfig(weight_mode=mode, seed=seed))
        pred = predict(model, bundle.source.contexts, bundle.inventory)
        out[mode] = float(np.abs(pred - mu)[region].mean())
    return out


def test_weighted_trainer_fits_non_overlap_region_better():
    errs = [region_errors(s) for s in range(10)]
    wins = sum(e[PROPOSED] < e[BASELINE] for e in errs)
    assert wins >= 9

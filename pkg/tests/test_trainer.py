import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmoe.core import Rng
from hetmoe.datagen import DatasetSpec, generate, skill_rows_for
from hetmoe.experts import Registry, default_profiles, expert_forward
from hetmoe.fusion import ModelSettings, zero_model
from hetmoe.trainer import (TrainingConfig, TrainingError, auc, backward, cross_entropy, dispatch_fractions,
                            finite_diff_check, init_model, predict, prepare, sgd_step, split_indices, split_of,
                            total_loss, train)

SMALL_DIMS = (6, 7, 8)


def small_setup(strategy="hard", fusion="concat", n=16, seed=1, **kw):
    spec = DatasetSpec(n_samples=n, seed=seed)
    samples = generate(spec)
    reg = Registry(default_profiles(skill_rows_for(spec), SMALL_DIMS))
    s = ModelSettings(strategy=strategy, fusion=fusion, d=8, m=8, f_text=32, **kw)
    return samples, reg, s, prepare(samples, reg, s)


def test_cross_entropy_examples():
    assert cross_entropy(0.0, 1) == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy(50.0, 1) < 1e-20
    assert cross_entropy(1.0, 0) == pytest.approx(-math.log(1 - 1 / (1 + math.exp(-1))), abs=1e-12)
    assert cross_entropy(1.0, 0) == pytest.approx(1.3133, abs=1e-4)
    assert cross_entropy(-800.0, 1) == pytest.approx(800.0)


@given(st.floats(-500, 500), st.sampled_from([0, 1]))
def test_cross_entropy_nonnegative_and_symmetric(z, y):
    assert cross_entropy(z, y) >= 0.0
    assert cross_entropy(z, y) == pytest.approx(cross_entropy(-z, 1 - y), rel=1e-12, abs=1e-300)


def test_total_loss_examples():
    cfg = TrainingConfig(lambda_lb=0.01, lambda_entropy=0.0)
    assert total_loss(0.7, 1.2, 0.0, cfg) == pytest.approx(0.712, abs=1e-15)
    assert total_loss(0.7, 1.2, 5.0, TrainingConfig(lambda_lb=0.0, lambda_entropy=0.0)) == 0.7
    cfg = TrainingConfig(lambda_lb=0.0, lambda_entropy=0.1)
    assert total_loss(0.5, 0.0, 1.0986, cfg) == pytest.approx(0.60986, abs=1e-12)


def test_config_validation():
    for bad in (dict(lambda_lb=-1.0), dict(lambda_entropy=-0.1), dict(batch_size=0), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)


def test_zero_head_balanced_bias_gradient():
    samples, reg, s, data = small_setup(n=60)
    pos = np.flatnonzero(data.y == 1)[:10]
    neg = np.flatnonzero(data.y == 0)[:10]
    batch = data.take(np.r_[pos, neg])
    model = zero_model(s, reg.hidden_dims)
    _, grads, _ = backward(model, batch, TrainingConfig())
    assert abs(grads["head.bc"][0]) < 1e-12


def test_single_forced_expert_router_gradient_zero():
    spec = DatasetSpec(n_samples=16, seed=2)
    reg = Registry(default_profiles(skill_rows_for(spec, 1), (6,), ((100, 1),)))
    s = ModelSettings(strategy="hard", k=1, d=8, m=8, f_text=32)
    data = prepare(generate(spec), reg, s)
    model = init_model(s, reg.hidden_dims, seed=3)
    _, grads, _ = backward(model, data, TrainingConfig(lambda_lb=0.0))
    assert not grads["router.W"].any() and not grads["router.b"].any()


@pytest.mark.parametrize("strategy", ["hard", "soft"])
@pytest.mark.parametrize("fusion", ["concat", "weighted"])
@pytest.mark.parametrize("l2", [False, True])
def test_finite_differences(strategy, fusion, l2):
    samples, reg, s, data = small_setup(strategy, fusion, l2_normalize=l2)
    model = init_model(s, reg.hidden_dims, seed=1)
    rep = finite_diff_check(model, data, TrainingConfig(lambda_lb=0.05, lambda_entropy=0.05, lb_in_soft=True))
    assert rep.max_rel_error < 1e-4, rep
    assert rep.checked > 0.9 * (rep.checked + rep.skipped)


def test_finite_differences_zero_params():
    samples, reg, s, data = small_setup()
    rep = finite_diff_check(zero_model(s, reg.hidden_dims), data, TrainingConfig())
    assert rep.max_rel_error < 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_backward_rejects_non_finite():
    samples, reg, s, data = small_setup()
    model = init_model(s, reg.hidden_dims, seed=1)
    model.head.Wp[0, 0] = np.inf
    with pytest.raises(TrainingError, match="head"):
        backward(model, data, TrainingConfig())


def test_sgd_examples():
    samples, reg, s, data = small_setup()
    model = zero_model(s, reg.hidden_dims)
    model.head.bc[:] = 1.0
    grads = {n: np.zeros_like(a) for n, a in model.arrays()}
    grads["head.bc"][:] = 2.0
    sgd_step(model, grads, 0.1)
    assert model.head.bc[0] == pytest.approx(0.8, abs=1e-15)
    before = [a.copy() for _, a in model.arrays()]
    sgd_step(model, {n: np.zeros_like(a) for n, a in model.arrays()}, 0.1)
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, model.arrays()))


def test_sgd_deterministic_100_steps():
    samples, reg, s, data = small_setup(n=64)
    cfg = TrainingConfig()

    def run():
        model = init_model(s, reg.hidden_dims, seed=5)
        for _ in range(100):
            _, g, _ = backward(model, data, cfg)
            sgd_step(model, g, 0.05)
        return model

    a, b = run(), run()
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.arrays(), b.arrays()))


def test_auc_examples():
    assert auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.4] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def brute_auc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


labelled = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 8), min_size=n, max_size=n),
    st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


@given(labelled)
def test_auc_matches_brute_force(case):
    s, y = case
    assert auc(np.array(s, float), np.array(y)) == brute_auc(s, y)


@given(labelled, st.floats(0.1, 5.0), st.floats(-10, 10))
def test_auc_monotone_invariance(case, a, b):
    s, y = np.array(case[0], float), np.array(case[1])
    assert auc(np.exp(a * s) + b, y) == auc(s, y)
    assert auc(np.tanh(s / 3.0) * 7 - 1, y) == auc(s, y)


def test_split_fractions():
    counts = {"train": 0, "val": 0, "test": 0}
    for i in range(20_000):
        counts[split_of(i)] += 1
    assert abs(counts["train"] / 20_000 - 0.8) < 0.02
    assert abs(counts["val"] / 20_000 - 0.1) < 0.01
    assert split_of(123) == split_of(123)


def test_train_rule_leaves_router_untouched():
    samples, reg, s, data = small_setup("rule", n=300, rule_table={"ID": 0, "MY": 0, "PH": 1, "SG": 1, "TH": 2,
                                                                   "VN": 2})
    res = train(samples, TrainingConfig(epochs=2), reg, s, prepared=data)
    fresh = init_model(s, reg.hidden_dims, TrainingConfig().seed)
    assert np.array_equal(res.model.router.W, fresh.router.W)
    assert np.array_equal(res.model.router.b, fresh.router.b)
    assert not np.array_equal(res.model.head.Wp, fresh.head.Wp)


def test_train_deterministic_and_experts_frozen():
    samples, reg, s, data = small_setup("hard", n=400)
    probe = samples[0].request
    before = [expert_forward(p, probe).hidden.copy() for p in reg]
    a = train(samples, TrainingConfig(epochs=2), reg, s)
    b = train(samples, TrainingConfig(epochs=2), reg, s)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.model.arrays(), b.model.arrays()))
    assert a.metrics_csv() == b.metrics_csv()
    assert all(np.array_equal(h, expert_forward(p, probe).hidden) for h, p in zip(before, reg))


def test_metrics_csv_layout():
    samples, reg, s, data = small_setup("soft", n=300)
    res = train(samples, TrainingConfig(epochs=2), reg, s, prepared=data)
    lines = res.metrics_csv().splitlines()
    assert lines[0] == "epoch,split,loss,auc,dispatch_0,dispatch_1,dispatch_2"
    assert len(lines) == 1 + 2 * 2


def test_pseudo_training_produces_labels():
    samples, reg, s, data = small_setup("pseudo", n=400)
    res = train(samples, TrainingConfig(epochs=1, probe_epochs=1, router_epochs=1), reg, s, prepared=data)
    n_train = len(split_indices(data)["train"])
    assert res.pseudo_labels.shape == (n_train,)
    assert set(np.unique(res.pseudo_labels)) <= {0, 1, 2}
    assert len(res.probe_auc) == 3
    assert np.isclose(dispatch_fractions(res.model, data).sum(), 1.0)


def test_train_errors():
    samples, reg, s, data = small_setup()
    with pytest.raises(TrainingError):
        train([], TrainingConfig(), reg, s)
    with pytest.raises(ValueError):
        train(samples, TrainingConfig(), reg, ModelSettings(strategy="bogus", d=8, m=8, f_text=32))
    with pytest.raises(ValueError):
        train(samples, TrainingConfig(), reg, ModelSettings(k=4, d=8, m=8, f_text=32))


def test_predict_in_unit_interval():
    samples, reg, s, data = small_setup(n=100)
    p = predict(init_model(s, reg.hidden_dims, 2), data)
    assert ((p > 0) & (p < 1)).all()

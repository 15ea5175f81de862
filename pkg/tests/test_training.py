import math

import numpy as np
import pytest

from optmsm.data import Dataset, FeatureSchema, FieldDef, GeneratorConfig, Splits, default_schema, generate
from optmsm.metrics import UndefinedMetricError, auc, logloss, mean_auc, per_scenario
from optmsm.model import ModelConfig, OptMSM
from optmsm.tensor import Tensor
from optmsm.training import (TrainConfig, TrainingDivergedError, adam_state, adam_step, bce_loss,
                             compare, final_metrics, loss_and_grads, measure_overhead, read_metrics,
                             train, write_comparison)

SMALL = ModelConfig(transfer_dims=(8, 4), tower_dims=(8, 4))


@pytest.fixture(scope="module")
def small_data():
    schema = default_schema(embed_dim=4)
    return generate(GeneratorConfig(samples=3000, seed=2), schema).splits, schema


# ---------------------------------------------------------------- loss, optimiser, metrics


def test_bce_examples(rng):
    y = np.array([0, 1, 1, 0])
    assert bce_loss(Tensor(np.full(4, 0.5)), y).item() == pytest.approx(math.log(2), abs=1e-15)
    edge = bce_loss(Tensor(np.array([1.0, 0.0])), np.array([0, 1])).item()
    assert edge == pytest.approx(-math.log(1e-12), rel=1e-6)
    p = rng.uniform(0.01, 0.99, 9)
    yy = rng.integers(0, 2, 9)
    ref = sum(-(yy[i] * math.log(p[i]) + (1 - yy[i]) * math.log(1 - p[i])) for i in range(9)) / 9
    assert bce_loss(Tensor(p), yy).item() == pytest.approx(ref, rel=1e-13)


def test_adam_examples():
    theta = {"w": np.array([0.0])}
    state = adam_state(theta)
    adam_step(theta, {"w": np.array([1.0])}, state, lr=0.1, l2_weight=0.0, t=1)
    assert theta["w"][0] == pytest.approx(-0.1, rel=1e-6)
    theta = {"w": np.array([0.3, -2.0])}
    state = adam_state(theta)
    adam_step(theta, {"w": np.zeros(2)}, state, lr=0.1, l2_weight=0.0, t=1)
    np.testing.assert_array_equal(theta["w"], [0.3, -2.0])


def test_adam_l2_adds_to_gradient():
    a, b = {"w": np.array([2.0])}, {"w": np.array([2.0])}
    sa, sb = adam_state(a), adam_state(b)
    for t in range(1, 4):
        adam_step(a, {"w": np.array([0.5])}, sa, 0.01, 0.1, t)
        adam_step(b, {"w": np.array([0.5]) + 0.1 * b["w"]}, sb, 0.01, 0.0, t)
    assert a["w"][0] == b["w"][0]


def test_adam_matches_recurrence_by_hand():
    theta, g = 1.0, [0.3, -0.7, 0.2]
    m = v = 0.0
    p = {"w": np.array([theta])}
    s = adam_state(p)
    for t, gt in enumerate(g, 1):
        m = 0.9 * m + 0.1 * gt
        v = 0.999 * v + 0.001 * gt * gt
        theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(p, {"w": np.array([gt])}, s, 0.01, 0.0, t)
    assert p["w"][0] == pytest.approx(theta, rel=1e-14)


def test_adam_rejects_non_finite_gradient():
    p = {"w": np.zeros(2)}
    with pytest.raises(TrainingDivergedError, match="'w'"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, adam_state(p), 0.1, 0.0, 1)


def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    tot = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return tot / (len(pos) * len(neg))


def test_auc_examples_and_errors():
    assert auc([0.2, 0.8], [0, 1]) == 1.0
    assert auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_with_ties(rng):
    for _ in range(20):
        n = int(rng.integers(2, 300))
        s = rng.integers(0, 10, n) / 10.0
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        assert abs(auc(s, y) - brute_auc(s, y)) <= 1e-12


def test_per_scenario_marks_single_class_na():
    probs = np.array([0.2, 0.7, 0.4, 0.6])
    rep = per_scenario(probs, np.array([0, 1, 1, 1]), np.array([1, 1, 2, 2]), 3)
    assert rep[1]["auc"] == 1.0 and rep[2]["auc"] is None and rep[2]["logloss"] is not None
    assert rep[3] == {"n": 0, "auc": None, "logloss": None}
    assert mean_auc(rep) == 1.0
    assert logloss([0.5], [1]) == pytest.approx(math.log(2))


# ---------------------------------------------------------------- train loop


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(ablations=("no_tower",))
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    tc = TrainConfig(ablations=("no_constraint", "no_priors"))
    assert tc.effective_lambda == 0.0
    mc = tc.model_config()
    assert not mc.use_priors and mc.use_hypernet
    assert TrainConfig(mode="mix").effective_lambda == 0.0


def test_loss_is_msm_plus_lambda_orth(small_data):
    splits, schema = small_data
    model = OptMSM(schema, SMALL)
    p = model.init_params(0)
    batch = splits.train.subset(np.arange(64))
    step = loss_and_grads(model, p, batch, 0.37)
    assert step.loss == step.l_msm + 0.37 * step.l_orth
    zero = loss_and_grads(model, p, batch, 0.0)
    assert zero.l_orth == step.l_orth and zero.loss == zero.l_msm


def test_separable_toy_reaches_high_train_auc():
    rng = np.random.default_rng(0)
    schema = FeatureSchema((FieldDef("a", "shared", 20, 4), FieldDef("b", "shared", 20, 4)), 1)
    x = rng.integers(1, 20, size=(800, 2))
    y = ((x[:, 0] + x[:, 1]) % 2).astype(int)  # parity of two categorical fields
    d = Dataset(x, y, np.ones(800, dtype=int))
    splits = Splits(d, d.subset(np.arange(200)), d.subset(np.arange(200)))
    cfg = TrainConfig(mode="mix", lam=0.0, epochs=20, learning_rate=1e-2, batch_size=64,
                      ablations=("no_hypernetwork",), patience=20)
    res = train(splits, schema, cfg, SMALL)
    assert final_metrics(res.history, "train")[1]["auc"] > 0.99


def test_zero_epochs_returns_init(small_data):
    splits, schema = small_data
    res = train(splits, schema, TrainConfig(epochs=0), SMALL)
    init = OptMSM(schema, TrainConfig().model_config(SMALL)).init_params(0)
    assert res.best_epoch == 0
    for k in init:
        assert np.array_equal(res.params[k], init[k])
    assert {r["epoch"] for r in res.history} == {0, "final"}


def test_training_is_deterministic_and_improves(small_data, tmp_path):
    splits, schema = small_data
    cfg = TrainConfig(epochs=3, batch_size=128)
    a = train(splits, schema, cfg, SMALL, metrics_path=tmp_path / "a.jsonl")
    b = train(splits, schema, cfg, SMALL, metrics_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(read_metrics(tmp_path / "a.timing.jsonl")) == 4  # epochs 0..3
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    valid = {r["epoch"]: r for r in a.history if r["split"] == "valid" and r["scenario"] == 3}
    assert valid[a.best_epoch]["auc"] > valid[0]["auc"]


def test_early_stopping_returns_best_not_last(small_data):
    splits, schema = small_data
    res = train(splits, schema, TrainConfig(epochs=12, learning_rate=5e-2, patience=2), SMALL)
    scores = {}
    for r in res.history:
        if r["split"] == "valid" and r["epoch"] != "final":
            scores.setdefault(r["epoch"], []).append(r["auc"])
    means = {e: np.mean(v) for e, v in scores.items()}
    assert res.best_epoch == max(means, key=means.get)
    last = max(means)
    assert last - res.best_epoch <= 2
    final_valid = np.mean([r["auc"] for r in res.history if r["epoch"] == "final" and r["split"] == "valid"])
    assert final_valid == pytest.approx(means[res.best_epoch], abs=1e-15)


def test_dropout_only_during_training(small_data):
    splits, schema = small_data
    res = train(splits, schema, TrainConfig(epochs=1, dropout_rate=0.3), SMALL)
    a = res.model.predict(res.params, splits.test)
    b = res.model.predict(res.params, splits.test)
    assert np.array_equal(a, b)
    nodrop = train(splits, schema, TrainConfig(epochs=1), SMALL)
    assert not np.array_equal(nodrop.params["tower.W0"], res.params["tower.W0"])


def test_divergence_aborts_with_last_good(small_data):
    splits, schema = small_data
    model = OptMSM(schema, SMALL)
    import optmsm.training as tr

    original = tr.loss_and_grads
    calls = {"n": 0}

    def poisoned(*args, **kw):
        out = original(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            out.grads["tower.W1"][0, 0, 0] = np.inf
        return out

    tr.loss_and_grads = poisoned
    try:
        with pytest.raises(TrainingDivergedError, match="tower.W1") as exc:
            train(splits, schema, TrainConfig(epochs=1), SMALL)
    finally:
        tr.loss_and_grads = original
    assert exc.value.last_good is not None and "tower.W1" in exc.value.last_good


def test_lambda_zero_keeps_orth_logged_but_inert(small_data):
    splits, schema = small_data
    res = train(splits, schema, TrainConfig(epochs=1, lam=0.0), SMALL)
    rec = [r for r in res.history if r["epoch"] == 1][0]
    assert rec["l_orth"] > 0 and rec["loss"] == rec["l_msm"] and rec["lambda"] == 0.0


# ---------------------------------------------------------------- comparison and overhead


def test_compare_self_has_zero_decrement(small_data, tmp_path):
    splits, schema = small_data
    cfg = TrainConfig(epochs=1)
    rows = compare(splits, schema, [("a", cfg, SMALL), ("b", cfg, SMALL)], seeds=[0, 1])
    for r in rows:
        assert r.decrement_pct == 0.0 and len(r.aucs) == 2
    write_comparison(tmp_path / "c.csv", rows)
    text = (tmp_path / "c.csv").read_text()
    assert text.splitlines()[0].startswith("config,scenario,auc_mean") and "(+0.00%)" in text
    with pytest.raises(ValueError):
        compare(splits, schema, [("a", cfg, SMALL)], seeds=[])


def test_measure_overhead_identical_configs(small_data):
    splits, schema = small_data
    cfg = (TrainConfig(), SMALL)
    res = measure_overhead(splits, schema, cfg, cfg, epochs=1, repeats=3)
    assert abs(res["ratio"]) < 0.5  # identical work; only timer noise
    with pytest.raises(ValueError):
        measure_overhead(splits, schema, cfg, (TrainConfig(batch_size=7), SMALL))

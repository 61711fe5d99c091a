import math

import numpy as np
import pytest

import numcore as nc


# small step: float64 central differences stay well inside the 1e-4 tolerance
EPS = 1e-5


def _rand(rng, *shape):
    return rng.normal(size=shape)


def _away_from_zero(rng, *shape):
    """Random values with |x| >= 0.2 so relu kinks stay outside the eps ball."""
    x = rng.uniform(0.2, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def test_required_ops_inventory():
    ops = nc.required_ops()
    for name in ("matmul", "add", "tanh", "sigmoid", "relu", "softmax", "pool_mean", "pool_max",
                 "embedding", "conv1d", "depthwise_conv1d", "layer_norm", "concat", "masked_fill"):
        assert callable(ops[name])


def test_small_op_examples():
    np.testing.assert_allclose(nc.softmax(nc.tensor([0.0, 0.0])).data, [0.5, 0.5])
    x = nc.tensor(np.array([1.0, 3.0]).reshape(1, 2, 1))
    np.testing.assert_allclose(nc.pool_mean(x, 2).data.reshape(-1), [2.0])
    np.testing.assert_allclose(nc.pool_max(x, 2).data.reshape(-1), [3.0])


def test_softmax_rows_sum_to_one_and_masked_get_zero():
    rng = np.random.default_rng(0)
    logits = nc.tensor(rng.normal(size=(4, 7)))
    mask = np.zeros((4, 7), dtype=bool)
    mask[:, 5:] = True
    probs = nc.softmax(nc.masked_fill(logits, mask), axis=-1).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
    assert (probs[:, 5:] == 0).all()


def test_no_grad_records_nothing():
    w = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.no_grad():
        y = (w * 2.0).sum()
    assert not y.requires_grad


def test_broadcast_add_reduces_gradient():
    a = nc.Tensor(np.ones((2, 3)), requires_grad=True)
    b = nc.Tensor(np.ones(3), requires_grad=True)
    (a + b).sum().backward()
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


# ---------------------------------------------------------------------------
# gradient checks, one function per layer family over 20 seeds
# ---------------------------------------------------------------------------
SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_and_matmul(seed):
    rng = np.random.default_rng(seed)
    params = {"x": _away_from_zero(rng, 3, 4), "w": _rand(rng, 4, 5), "b": _rand(rng, 5)}

    def fn(p):
        h = nc.linear(p["x"], p["w"], p["b"])
        return (nc.tanh(h) * nc.sigmoid(h) + nc.relu(p["x"]).sum() * 0.1).sum()

    report = nc.grad_check(fn, params, eps=EPS, seed=seed)
    assert report.passed, report.errors


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_logsoftmax_layer_norm(seed):
    rng = np.random.default_rng(seed)
    params = {"x": _rand(rng, 2, 3, 6), "g": _rand(rng, 6), "b": _rand(rng, 6), "t": _rand(rng, 2, 3, 6)}

    def fn(p):
        h = nc.layer_norm(p["x"], p["g"], p["b"])
        return (nc.softmax(h, axis=-1) * p["t"]).sum() + nc.log_softmax(h, axis=-1).mean()

    assert nc.grad_check(fn, params, eps=EPS, seed=seed).passed


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_pooling_and_masked_fill(seed):
    rng = np.random.default_rng(seed)
    # distinct values keep the max away from ties
    x = rng.permutation(24).astype(float).reshape(1, 8, 3) * 0.3 + rng.uniform(0, 0.01, size=(1, 8, 3))
    params = {"x": x, "t": _rand(rng, 1, 4, 3)}
    mask = rng.random((1, 8, 3)) < 0.3

    def fn(p):
        pooled = nc.pool_mean(p["x"], 2) + nc.pool_max(p["x"], 2)
        masked = nc.masked_fill(p["x"], mask, 0.0)
        return (pooled * p["t"]).sum() + (masked * masked).sum() * 0.01

    assert nc.grad_check(fn, params, eps=EPS, seed=seed).passed


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_convolutions(seed):
    rng = np.random.default_rng(seed)
    params = {"x": _rand(rng, 2, 6, 3), "w": _rand(rng, 3, 3, 4), "bias": _rand(rng, 4), "k": _rand(rng, 3, 3)}

    def fn(p):
        causal = nc.conv1d(p["x"], p["w"], p["bias"], padding="causal")
        centered = nc.conv1d(p["x"], p["w"], padding="centered")
        depth = nc.depthwise_conv1d(p["x"], p["k"], padding="centered")
        return nc.tanh(causal).sum() + (centered * centered).mean() + (depth * p["x"]).sum()

    assert nc.grad_check(fn, params, eps=EPS, seed=seed).passed


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_embedding_concat_stack_getitem(seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 5, size=(2, 4))
    params = {"table": _rand(rng, 5, 3), "other": _rand(rng, 2, 4, 2)}

    def fn(p):
        e = nc.embedding(p["table"], ids)
        joined = nc.concat([e, p["other"]], axis=-1)
        stacked = nc.stack([joined[:, 0], joined[:, 3]], axis=1)
        picked = joined[:, np.array([0, 0, 2])]
        return nc.tanh(stacked).sum() + (picked * picked).sum() + nc.exp(p["other"] * 0.1).sum()

    assert nc.grad_check(fn, params, eps=EPS, seed=seed).passed


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_smoothed_ce(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 6, size=(2, 5))
    targets[0, -1] = nc.PAD_ID
    params = {"logits": _rand(rng, 2, 5, 6)}
    report = nc.grad_check(lambda p: nc.smoothed_ce(p["logits"], targets, 0.1), params, eps=EPS, seed=seed)
    assert report.passed


def test_grad_check_flags_corrupted_gradient():
    def broken_square(a):
        out = nc.Tensor(a.data ** 2, (a,), "broken")
        if out.requires_grad:
            out._backprop = lambda g: a._accumulate(g * 3.0 * a.data)
        return out

    report = nc.grad_check(lambda p: broken_square(p["x"]).sum(), {"x": np.array([0.5, -1.0, 2.0])})
    assert not report.passed
    assert report.max_error > 1e-4


def test_grad_check_reports_non_finite_as_failure():
    report = nc.grad_check(lambda p: nc.log(p["x"]).sum(), {"x": np.array([1e-300, 1.0])})
    assert not report.passed


def test_grad_check_subsamples_large_params():
    rng = np.random.default_rng(0)
    report = nc.grad_check(lambda p: (p["w"] * p["w"]).sum(), {"w": rng.normal(size=(20, 20))}, max_elements=16)
    assert report.passed


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------
def _store(value):
    store = nc.ParamStore()
    store.add("w", np.array(value, dtype=float))
    return store


def test_param_store_rejects_duplicates():
    store = _store([1.0])
    with pytest.raises(ValueError):
        store.add("w", np.zeros(1))
    assert store.m["w"].tolist() == [0.0] and store.v["w"].tolist() == [0.0]


def test_adam_zero_grad_leaves_params():
    store = _store([1.0, -2.0])
    nc.optimizer_step(store, {"w": np.zeros(2)}, nc.TrainHyper(), step=1)
    np.testing.assert_array_equal(store["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    store = _store([0.5])
    nc.optimizer_step(store, {"w": np.ones(1)}, nc.TrainHyper(learning_rate=1e-4), step=1)
    np.testing.assert_allclose(store["w"], [0.5 - 1e-4], rtol=0, atol=1e-7)


def test_adamw_decay_shrinks_params():
    store = _store([1.0, -1.0])
    hyper = nc.TrainHyper(optimizer="adamw", learning_rate=1e-2, weight_decay=0.1)
    nc.optimizer_step(store, {"w": np.zeros(2)}, hyper, step=1)
    assert np.all(np.abs(store["w"]) < 1.0)


def test_optimizer_step_is_deterministic_and_checks_shapes():
    grads = {"w": np.array([0.3, -0.7])}
    a, b = _store([1.0, 2.0]), _store([1.0, 2.0])
    nc.optimizer_step(a, grads, nc.TrainHyper(), step=1)
    nc.optimizer_step(b, grads, nc.TrainHyper(), step=1)
    np.testing.assert_array_equal(a["w"], b["w"])
    with pytest.raises(ValueError):
        nc.optimizer_step(a, {"w": np.zeros(3)}, nc.TrainHyper(), step=2)


def test_lr_schedule():
    hyper = nc.TrainHyper(warmup_steps=4000)
    assert nc.lr_schedule(0, hyper) == 0.0
    assert nc.lr_schedule(2000, hyper) == 0.5
    assert nc.lr_schedule(4000, hyper) == 1.0
    assert nc.lr_schedule(10000, hyper) == 1.0
    decayed = nc.TrainHyper(warmup_steps=4000, schedule="inverse_sqrt")
    assert nc.lr_schedule(16000, decayed) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        nc.lr_schedule(-1, hyper)


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0.0}, {"label_smoothing": 1.0}, {"optimizer": "sgd"}])
def test_train_hyper_validation(kwargs):
    with pytest.raises(ValueError):
        nc.TrainHyper(**kwargs)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    norm = nc.clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0, abs=1e-5)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------
def test_smoothed_ce_examples():
    perfect = np.full((1, 3, 5), -50.0)
    targets = np.array([[3, 4, 3]])
    perfect[0, np.arange(3), targets[0]] = 50.0
    assert nc.smoothed_ce(perfect, targets).item() == pytest.approx(0.0, abs=1e-6)
    uniform = np.zeros((2, 4, 100))
    ids = np.full((2, 4), 7)
    assert nc.smoothed_ce(uniform, ids).item() == pytest.approx(math.log(100), rel=1e-6)
    assert nc.smoothed_ce(uniform, ids, smoothing=0.1).item() == pytest.approx(math.log(100), rel=1e-6)


def test_smoothed_ce_ignores_pad_and_checks_ids():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 4, 6))
    with_pad = nc.smoothed_ce(logits, np.array([[3, 4, 0, 0]])).item()
    trimmed = nc.smoothed_ce(logits[:, :2], np.array([[3, 4]])).item()
    assert with_pad == pytest.approx(trimmed, rel=1e-6)
    with pytest.raises(ValueError):
        nc.smoothed_ce(logits, np.array([[3, 4, 9, 1]]))
    with pytest.raises(ValueError):
        nc.smoothed_ce(logits, np.array([[3, 4, 1]]))

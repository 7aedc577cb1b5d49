import math

import numpy as np
import pytest

from gnnwr.errors import BatchNormError, ConfigError, StateError
from gnnwr.swnn import (
    LayerSpec,
    MiniBatches,
    TrainConfig,
    adam_step,
    backward,
    forward,
    hidden_layers,
    init_net,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)


def _loss(net, x, target):
    out, _ = forward(net, x, "train")
    return 0.5 * float(np.sum((out - target) ** 2))


def gradient_check(layers, seed=0, batch=8, width_in=6, width_out=3, eps=1e-4):
    """Largest per-parameter-class relative error between backprop and central differences."""
    net = init_net(layers, width_in, width_out, seed)
    rng = np.random.default_rng(seed + 100)
    for name in net.params:
        if name.endswith(("gamma", "beta", "b", "alpha")):
            net.params[name] = net.params[name] + 0.1 * rng.standard_normal(net.params[name].shape)
    x = rng.standard_normal((batch, width_in))
    target = rng.standard_normal((batch, width_out))
    out, cache = forward(net, x, "train")
    grads = backward(net, cache, out - target)
    worst = {}
    for name, p in net.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = _loss(net, x, target)
            p[idx] = old - eps
            down = _loss(net, x, target)
            p[idx] = old
            num[idx] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-12)
        worst[name] = float(np.linalg.norm(num - grads[name]) / denom)
    return worst


@pytest.mark.parametrize(
    "layers",
    [
        [LayerSpec(8, True, 1.0), LayerSpec(4, True, 1.0)],
        [LayerSpec(8, False, 1.0), LayerSpec(4, False, 1.0)],
        [LayerSpec(8, True, 1.0), LayerSpec(4, False, 1.0)],
        [LayerSpec(5, False, 1.0, "linear")],
        [],
    ],
    ids=["bn", "plain", "mixed", "linear", "affine"],
)
def test_gradients_match_finite_differences(layers):
    errs = gradient_check(layers)
    assert max(errs.values()) < 1e-4, errs


def test_parameter_classes_present():
    net = init_net([LayerSpec(8), LayerSpec(4, batchnorm=False)], 5, 2, 0)
    assert set(net.params) == {"0.W", "0.gamma", "0.beta", "0.alpha", "1.W", "1.b", "1.alpha", "2.W", "2.b"}


def test_init_deterministic():
    a = init_net(hidden_layers([8, 4]), 10, 3, 42)
    b = init_net(hidden_layers([8, 4]), 10, 3, 42)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_he_variance():
    ratios = [init_net([LayerSpec(4)], 512, 1, s).params["0.W"].var() / (2 / 512) for s in range(10)]
    assert abs(np.mean(ratios) - 1) < 0.2


def test_empty_hidden_list_is_affine():
    net = init_net([], 4, 2, 0)
    x = np.random.default_rng(0).standard_normal((5, 4))
    out, _ = forward(net, x)
    np.testing.assert_allclose(out, x @ net.params["0.W"] + net.params["0.b"], atol=1e-15)


def test_neutral_regularizers_give_affine_chain():
    net = init_net([LayerSpec(6, False, 1.0), LayerSpec(3, False, 1.0)], 4, 2, 1)
    for k in ("0.W", "1.W"):
        net.params[k] = np.abs(net.params[k])
    x = np.abs(np.random.default_rng(2).standard_normal((7, 4)))
    P = net.params
    expect = ((x @ P["0.W"] + P["0.b"]) @ P["1.W"] + P["1.b"]) @ P["2.W"] + P["2.b"]
    for mode in ("train", "infer"):
        np.testing.assert_allclose(forward(net, x, mode)[0], expect, atol=1e-12)


def test_prelu_value():
    net = init_net([LayerSpec(1, False, 1.0)], 1, 1, 0)
    net.params["0.W"][:] = 1.0
    net.params["1.W"][:] = 1.0
    out, _ = forward(net, np.array([[-2.0]]))
    assert out[0, 0] == pytest.approx(-0.5)


def test_batchnorm_train_output_standardized():
    net = init_net([LayerSpec(5, True, 1.0)], 3, 1, 0)
    x = 100 * np.random.default_rng(1).standard_normal((64, 3))
    _, cache = forward(net, x, "train")
    z = cache.layers[0]["zhat"]
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(z.var(axis=0), 1, atol=1e-6)


def test_batchnorm_needs_two_rows():
    net = init_net(hidden_layers([4]), 3, 1, 0)
    with pytest.raises(BatchNormError):
        forward(net, np.ones((1, 3)), "train")


def test_zero_and_doubled_loss_gradient():
    net = init_net(hidden_layers([6, 3], dropout_keep=1.0), 4, 2, 0)
    x = np.random.default_rng(0).standard_normal((8, 4))
    out, cache = forward(net, x, "train")
    g = np.random.default_rng(1).standard_normal(out.shape)
    zero = backward(net, cache, np.zeros_like(out))
    assert all(np.all(v == 0) for v in zero.values())
    one, two = backward(net, cache, g), backward(net, cache, 2 * g)
    assert all(np.array_equal(two[k], 2 * one[k]) for k in one)


def test_adam_first_step_is_signed_lr():
    net = init_net([], 3, 2, 0)
    before = {k: v.copy() for k, v in net.params.items()}
    rng = np.random.default_rng(3)
    grads = {k: rng.standard_normal(v.shape) for k, v in net.params.items()}
    cfg = TrainConfig()
    adam_step(net, grads, cfg)
    for k in grads:
        np.testing.assert_allclose(net.params[k] - before[k], -cfg.learning_rate * np.sign(grads[k]), atol=1e-9)


def test_adam_zero_gradient_leaves_params():
    net = init_net([], 3, 2, 0)
    before = {k: v.copy() for k, v in net.params.items()}
    adam_step(net, {k: np.zeros_like(v) for k, v in net.params.items()}, TrainConfig())
    assert all(np.array_equal(net.params[k], before[k]) for k in before)


def test_full_profile_constants():
    cfg = TrainConfig.full()
    assert cfg.learning_rate == pytest.approx(0.00112, abs=5e-6)
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.8, 0.999)
    assert (cfg.batch_size, cfg.max_epochs, cfg.warmup_epochs, cfg.patience_epochs) == (128, 90_000, 30_000, 9_000)
    with pytest.raises(ConfigError):
        TrainConfig(adam_beta1=1.0)


def _driver(net, vals, max_epochs=100, warmup=10, patience=5):
    x = np.random.default_rng(0).standard_normal((4, 3))
    batches = iter(lambda: (x, None), object())
    calls = iter(vals)

    def loss_fn(out, _):
        return float(np.mean(out**2)), 2 * out / out.size

    cfg = TrainConfig(max_epochs=max_epochs, warmup_epochs=warmup, patience_epochs=patience, batch_size=4)
    return train_loop(net, batches, loss_fn, lambda n: next(calls), cfg)


def test_early_stopping_never_triggers_on_improvement():
    net = init_net(hidden_layers([4]), 3, 1, 0)
    _, hist = _driver(net, [1.0 / s for s in range(1, 101)])
    assert (hist.stopped_step, hist.best_step, hist.reason) == (100, 100, "max epochs")


def test_early_stopping_rule_trace():
    E = 20
    vals = [1.0 / s for s in range(1, E + 1)] + [1.0 / E] * 200
    net = init_net(hidden_layers([4]), 3, 1, 0)
    _, hist = _driver(net, vals)
    assert hist.best_step == E
    assert hist.stopped_step == E + 5
    assert hist.reason == "early stop"


def test_best_parameters_restored():
    net = init_net(hidden_layers([4]), 3, 1, 0)
    snapshots = {}
    vals = iter([3.0, 1.0, 2.0, 2.5, 2.6, 2.7, 2.8, 2.9])

    def val_eval(n):
        snapshots[len(snapshots) + 1] = {k: v.copy() for k, v in n.params.items()}
        return next(vals)

    x = np.random.default_rng(0).standard_normal((4, 3))
    cfg = TrainConfig(max_epochs=8, warmup_epochs=0, patience_epochs=100, batch_size=4)
    train_loop(net, iter(lambda: (x, None), 0), lambda o, _: (float(np.mean(o**2)), 2 * o / o.size), val_eval, cfg)
    assert all(np.array_equal(net.params[k], snapshots[2][k]) for k in net.params)


def test_non_finite_loss_stops_and_keeps_best():
    net = init_net(hidden_layers([4]), 3, 1, 0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    losses = iter([1.0, 0.5, math.nan])
    cfg = TrainConfig(max_epochs=10, warmup_epochs=0, patience_epochs=100, batch_size=4)
    _, hist = train_loop(net, iter(lambda: (x, None), 0), lambda o, _: (next(losses), o * 0 + 0.1), lambda n: 1.0, cfg)
    assert "non-finite" in hist.reason and hist.stopped_step == 3


def test_stale_cache_rejected():
    net = init_net(hidden_layers([4]), 3, 1, 0)
    out, cache = forward(net, np.ones((4, 3)) * np.arange(3), "train")
    adam_step(net, backward(net, cache, np.ones_like(out)), TrainConfig())
    with pytest.raises(StateError):
        backward(net, cache, np.ones_like(out))
    _, infer_cache = forward(net, np.ones((4, 3)))
    with pytest.raises(StateError):
        backward(net, infer_cache, np.ones_like(out))


def test_infer_is_pure():
    net = init_net(hidden_layers([8, 4]), 5, 2, 0)
    x = np.random.default_rng(1).standard_normal((6, 5))
    a, _ = forward(net, x)
    b, _ = forward(net, x)
    assert np.array_equal(a, b)


def test_inverted_dropout_preserves_mean():
    net = init_net([LayerSpec(16, False, 0.9)], 4, 3, 0)
    x = np.tile(np.random.default_rng(5).uniform(0.5, 1.5, (1, 4)), (10_000, 1))
    ref, _ = forward(net, x[:1])
    out, _ = forward(net, x, "train")
    assert np.all(np.abs(out.mean(axis=0) - ref[0]) <= 0.02 * np.max(np.abs(ref)))


def _steps(net, xs, cfg):
    for x in xs:
        out, cache = forward(net, x, "train")
        adam_step(net, backward(net, cache, out - 1.0), cfg)


def test_checkpoint_resume_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    xs = [rng.standard_normal((8, 5)) for _ in range(10)]
    cfg = TrainConfig()
    full = init_net(hidden_layers([6, 3]), 5, 2, 9)
    _steps(full, xs, cfg)
    part = init_net(hidden_layers([6, 3]), 5, 2, 9)
    _steps(part, xs[:5], cfg)
    save_checkpoint(part, tmp_path / "c.json")
    resumed = load_checkpoint(tmp_path / "c.json")
    _steps(resumed, xs[5:], cfg)
    assert resumed.step == full.step == 10
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k])
    for k in full.buffers:
        assert np.array_equal(full.buffers[k], resumed.buffers[k])


def test_minibatches_cover_every_row():
    mb = iter(MiniBatches(10, 4, np.random.default_rng(0)))
    epoch = [next(mb) for _ in range(3)]
    assert sorted(np.concatenate(epoch).tolist()) == list(range(10))
    assert all(len(b) >= 2 for b in epoch)
    mb = iter(MiniBatches(9, 4, np.random.default_rng(0)))
    assert [len(next(mb)) for _ in range(2)] == [4, 5]


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec(0)
    with pytest.raises(ConfigError):
        LayerSpec(4, dropout_keep=0.0)

import numpy as np
import pytest
import torch

from _helpers import memorization_batch
from csiloc.errors import ConfigError
from csiloc.model import build_model, freeze_prefix, tiny_spec
from csiloc.seeds import derive_seed
from csiloc.train import (
    TrainConfig,
    build_responsive_model,
    error_cdf,
    euclidean_errors,
    evaluate_model,
    predict,
    prediction_spread,
    train_model,
)


def toy_data(n=10, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, 75, 30, 6)).astype(np.float32)
    y = rng.uniform(0, 3, (n, 2)).astype(np.float32)
    return X, y


def test_zero_lr_stops_after_exactly_eleven_epochs():
    X, y = toy_data()
    m = build_model(tiny_spec(), seed=0)
    cfg = TrainConfig(lr=0.0, max_epochs=100, seed=0)
    res = train_model(m, X, y, X, y, cfg)
    # first epoch sets the best, ten patience epochs follow, then stop
    assert res.epochs == 11
    assert res.stopped_early
    assert len(res.history) == 11
    vals = [h["val_loss"] for h in res.history]
    assert all(v == vals[0] for v in vals)


def test_single_adamax_step_decreases_loss():
    # Pinned batch and init: Adamax's first step is lr * sign(grad) for every
    # parameter, so this only holds when lr is small against the output
    # sensitivity; this configuration clears it with a wide margin.
    X, y = memorization_batch()
    m = build_model(tiny_spec(), seed=0)
    Xt = torch.from_numpy(X)
    yt = torch.from_numpy(y)
    loss_fn = torch.nn.L1Loss()
    opt = torch.optim.Adamax(m.parameters(), lr=1e-4)
    before = loss_fn(m(Xt), yt)
    before.backward()
    opt.step()
    with torch.no_grad():
        after = loss_fn(m(Xt), yt)
    assert after.item() < before.item()


def test_gradients_match_finite_differences():
    # central differences on sampled parameters, double precision
    X, y = memorization_batch(n=4)
    m = build_model(tiny_spec(), seed=5).double()
    Xt = torch.from_numpy(X).double()
    yt = torch.from_numpy(y).double()
    loss_fn = torch.nn.L1Loss()
    loss = loss_fn(m(Xt), yt)
    loss.backward()
    rng = np.random.default_rng(17)
    h = 1e-6
    checked = 0
    for p in m.parameters():
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        for idx in rng.integers(0, len(flat), 2):
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss_fn(m(Xt), yt).item()
                flat[idx] = orig - h
                down = loss_fn(m(Xt), yt).item()
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            ref = grad[idx].item()
            scale = max(abs(fd), abs(ref), 1e-8)
            assert abs(fd - ref) / scale <= 1e-4, (fd, ref)
            checked += 1
    assert checked >= 40


def test_training_reduces_loss_and_restores_best():
    X, y = toy_data(n=20, seed=3)
    m = build_model(tiny_spec(), seed=2)
    cfg = TrainConfig(max_epochs=25, seed=4)
    res = train_model(m, X, y, X, y, cfg)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    assert res.best_val_loss == min(h["val_loss"] for h in res.history)
    # restored weights reproduce the reported best validation loss
    err = evaluate_model(m, X, y)
    mae = np.abs(predict(m, X) - y).mean()
    assert abs(mae - res.best_val_loss) < 1e-6
    assert err["mean_m"] >= 0


def test_plateau_halves_lr():
    X, y = toy_data()
    m = build_model(tiny_spec(), seed=0)
    cfg = TrainConfig(lr=2e-3, max_epochs=12, plateau_patience=5, seed=0)
    res = train_model(m, X, y, X, y, cfg)
    lrs = [h["lr"] for h in res.history]
    assert lrs[0] == 2e-3
    if res.epochs >= 8 and all(
        h["val_loss"] >= res.history[0]["val_loss"] for h in res.history[1:7]
    ):
        assert min(lrs) <= 1e-3


def test_fully_frozen_model_is_a_config_error():
    X, y = toy_data()
    m = freeze_prefix(build_model(tiny_spec(), seed=0), 27)
    for p in m.blocks[27].parameters():
        p.requires_grad_(False)
    with pytest.raises(ConfigError):
        train_model(m, X, y, X, y, TrainConfig(max_epochs=1))


def test_empty_split_is_a_config_error():
    X, y = toy_data()
    m = build_model(tiny_spec(), seed=0)
    with pytest.raises(ConfigError):
        train_model(m, X[:0], y[:0], X, y, TrainConfig(max_epochs=1))


def test_training_is_deterministic():
    X, y = toy_data(n=12, seed=5)
    res = []
    states = []
    for _ in range(2):
        m = build_model(tiny_spec(), seed=9)
        r = train_model(m, X, y, X, y, TrainConfig(max_epochs=4, seed=11))
        res.append(r)
        states.append({k: v.clone() for k, v in m.state_dict().items()})
    assert [h["val_loss"] for h in res[0].history] == [
        h["val_loss"] for h in res[1].history
    ]
    for k in states[0]:
        assert torch.equal(states[0][k], states[1][k]), k


def test_frozen_layers_do_not_move_under_training():
    X, y = toy_data(n=12, seed=6)
    m = build_model(tiny_spec(), seed=13)
    freeze_prefix(m, 19)
    before = {
        k: v.clone() for k, v in m.state_dict().items() if int(k.split(".")[1]) < 19
    }
    train_model(m, X, y, X, y, TrainConfig(max_epochs=3, seed=0))
    after = m.state_dict()
    for k, v in before.items():
        assert torch.equal(v, after[k]), k


def test_euclidean_errors_exact():
    np.testing.assert_array_equal(
        euclidean_errors([[3.0, 4.0]], [[0.0, 0.0]]), [5.0]
    )
    np.testing.assert_array_equal(
        euclidean_errors([[1.0, 1.0], [4.0, 5.0]], [[1.0, 2.0], [1.0, 1.0]]),
        [1.0, 5.0],
    )
    with pytest.raises(ConfigError):
        euclidean_errors([[1.0, 2.0]], [[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ConfigError):
        euclidean_errors([1.0, 2.0], [3.0, 4.0])


def test_error_cdf_exact():
    e, p = error_cdf([3.0, 1.0, 2.0])
    np.testing.assert_array_equal(e, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(p, [1 / 3, 2 / 3, 1.0])
    with pytest.raises(ConfigError):
        error_cdf([])


def test_evaluate_model_statistics():
    class Fixed:
        def eval(self):
            pass

        def train(self):
            pass

        def __call__(self, x):
            return torch.zeros(len(x), 2)

    X = np.zeros((4, 75, 30, 6), np.float32)
    y = np.array([[3, 4], [0, 0], [6, 8], [0, 1]], np.float32)
    out = evaluate_model(Fixed(), X, y)
    np.testing.assert_allclose(sorted(out["errors"]), [0.0, 1.0, 5.0, 10.0])
    assert out["mean_m"] == 4.0
    assert out["median_m"] == 3.0


def test_prediction_spread_flags_constant_output():
    X, _ = toy_data(n=32)
    m = build_model(tiny_spec(), seed=0)
    assert prediction_spread(m, X) > 0.0
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    assert prediction_spread(m, X) == 0.0


def test_responsive_build_keeps_a_healthy_first_draw():
    X, _ = toy_data(n=32)
    m = build_responsive_model(tiny_spec(), X, seed=0)
    ref = build_model(tiny_spec(), seed=0)
    for (name, a), b in zip(m.state_dict().items(), ref.state_dict().values()):
        assert torch.equal(a, b), name


def test_responsive_build_redraws_a_collapsed_first_draw():
    # seed 6 initializes nearly input-insensitive on this probe distribution;
    # the retry chain must replace it and say so
    X, _ = toy_data(n=32)
    msgs = []
    m = build_responsive_model(tiny_spec(), X, seed=6, log=msgs.append)
    assert len(msgs) == 1 and "redraw" in msgs[0]
    ref = build_model(tiny_spec(), seed=derive_seed(6, "redraw", 1))
    for (name, a), b in zip(m.state_dict().items(), ref.state_dict().values()):
        assert torch.equal(a, b), name


def test_responsive_build_keeps_first_draw_on_a_flat_probe():
    # identical probe rows force zero spread no matter the weights, so the
    # screen must fall back to the plain seeded build rather than fail
    X = np.zeros((8, 75, 30, 6), np.float32)
    msgs = []
    m = build_responsive_model(tiny_spec(), X, seed=0, log=msgs.append)
    ref = build_model(tiny_spec(), seed=0)
    for (name, a), b in zip(m.state_dict().items(), ref.state_dict().values()):
        assert torch.equal(a, b), name
    assert "keeping the first draw" in msgs[-1]

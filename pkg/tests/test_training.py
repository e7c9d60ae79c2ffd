import numpy as np
import pytest

from seqseg.errors import NumericsError
from seqseg.network import Network, NetworkConfig
from seqseg.tensor import Tensor, finite_difference_grad
from seqseg.training import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_loss,
    dice_distance,
    evaluate_loss,
    fit,
    foreground_frequency,
    write_history_csv,
)

from conftest import max_rel_err

TINY_NET = dict(o=3, resolution=16, base_features=64, capacity_divisor=8)


def tiny_samples(rng, n=4, r=16, o=3):
    samples = []
    for _ in range(n):
        x = rng.standard_normal((o, 1, r, r)).astype(np.float32)
        y = np.zeros((r, r), dtype=np.float32)
        y[4:10, 5:12] = 1.0
        samples.append((x, y))
    return samples


class TestDiceDistance:
    def test_perfect_agreement(self, rng):
        mask = (rng.random((8, 8)) > 0.5).astype(np.float64)
        assert dice_distance(Tensor(mask), Tensor(mask)).item() == pytest.approx(1.0)

    def test_vanishing_prediction(self):
        mask = np.ones((8, 8))
        p = np.full((8, 8), 1e-9)
        assert dice_distance(Tensor(p), Tensor(mask)).item() == pytest.approx(0.0, abs=1e-6)

    def test_half_confidence_on_exact_support(self):
        mask = np.zeros((8, 8))
        mask[0, :4] = 1.0
        p = 0.5 * mask
        # 2 * 2 / (4 + 2) per the overlap definition
        assert dice_distance(Tensor(p), Tensor(mask)).item() == pytest.approx(2 / 3, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            dice_distance(Tensor(np.zeros((4, 4))), Tensor(np.zeros((5, 4))))

    def test_gradient_matches_finite_differences(self, rng):
        mask = (rng.random((6, 6)) > 0.6).astype(np.float64)
        p0 = rng.uniform(0.05, 0.95, size=(6, 6))

        def f(t):
            return dice_distance(t, Tensor(mask))

        pt = Tensor(p0, requires_grad=True)
        f(pt).backward()
        fd = finite_difference_grad(f, Tensor(p0))
        assert max_rel_err(pt.grad, fd) <= 1e-4


class TestBatchLoss:
    def test_perfect_predictions_give_minus_one(self, rng):
        masks = [(rng.random((6, 6)) > 0.5).astype(np.float64) for _ in range(3)]
        outs = [Tensor(m) for m in masks]
        assert batch_loss(outs, masks).item() == pytest.approx(-1.0)

    def test_equals_negative_mean_dice(self, rng):
        masks = [(rng.random((6, 6)) > 0.5).astype(np.float64) for _ in range(4)]
        outs = [Tensor(rng.uniform(0.01, 0.99, (6, 6))) for _ in range(4)]
        expected = -np.mean([dice_distance(o, Tensor(m)).item() for o, m in zip(outs, masks)])
        assert batch_loss(outs, masks).item() == pytest.approx(expected, abs=1e-7)

    def test_weight_two_halves_magnitude(self, rng):
        masks = [(rng.random((6, 6)) > 0.5).astype(np.float64) for _ in range(2)]
        outs = [Tensor(rng.uniform(0.01, 0.99, (6, 6))) for _ in range(2)]
        l1 = batch_loss(outs, masks, class_weight=1.0).item()
        l2 = batch_loss(outs, masks, class_weight=2.0).item()
        assert l2 == pytest.approx(l1 / 2.0, abs=1e-9)

    def test_bounds_for_unit_weight(self, rng):
        for _ in range(20):
            masks = [(rng.random((5, 5)) > 0.5).astype(np.float64)]
            outs = [Tensor(rng.uniform(0.0, 1.0, (5, 5)))]
            val = batch_loss(outs, masks).item()
            assert -1.0 <= val <= 0.0

    def test_moving_toward_mask_never_increases_loss(self, rng):
        mask = (rng.random((6, 6)) > 0.5).astype(np.float64)
        p = rng.uniform(0.05, 0.95, (6, 6))
        better = p + 0.3 * (mask - p)
        l_before = batch_loss([Tensor(p)], [mask]).item()
        l_after = batch_loss([Tensor(better)], [mask]).item()
        assert l_after <= l_before + 1e-12

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            batch_loss([], [])

    def test_foreground_frequency(self):
        masks = [np.array([[1, 0], [0, 0]]), np.array([[1, 1], [0, 0]])]
        assert foreground_frequency(masks) == pytest.approx(3 / 8)


def one_param_setup(g):
    t = Tensor(np.zeros_like(g), requires_grad=True)
    params = [("w", t)]
    state = AdamState.for_params(params)
    return t, params, state


class TestAdam:
    def test_first_step_magnitude_is_learning_rate(self):
        cfg = TrainConfig(learning_rate=5e-5)
        g = np.full((4, 4), 0.5, dtype=np.float64)
        t, params, state = one_param_setup(g)
        adam_step(params, {"w": g}, state, cfg)
        mag = np.abs(t.data)
        assert np.all(mag >= 0.99 * cfg.learning_rate)
        assert np.all(mag <= cfg.learning_rate)

    def test_zero_gradient_zero_update(self):
        cfg = TrainConfig()
        g = np.zeros((3, 3))
        t, params, state = one_param_setup(g)
        adam_step(params, {"w": g}, state, cfg)
        np.testing.assert_array_equal(t.data, 0.0)

    def test_gradient_scaling_invariance_at_first_step(self, rng):
        cfg = TrainConfig(learning_rate=1e-3)
        g = rng.standard_normal((5, 5))
        t1, p1, s1 = one_param_setup(g)
        adam_step(p1, {"w": g}, s1, cfg)
        t2, p2, s2 = one_param_setup(g)
        adam_step(p2, {"w": 10.0 * g}, s2, cfg)
        np.testing.assert_array_equal(np.sign(t1.data), np.sign(t2.data))
        assert np.all(np.abs(t2.data) >= 0.99 * cfg.learning_rate)
        assert np.all(np.abs(np.abs(t1.data) - np.abs(t2.data)) <= 0.01 * cfg.learning_rate)

    def test_nonfinite_gradient_aborts(self):
        cfg = TrainConfig()
        g = np.array([np.nan, 1.0])
        t, params, state = one_param_setup(g)
        with pytest.raises(NumericsError, match="w"):
            adam_step(params, {"w": g}, state, cfg)

    def test_step_counter_increments(self):
        cfg = TrainConfig()
        g = np.ones(3)
        t, params, state = one_param_setup(g)
        for expected in (1, 2, 3):
            adam_step(params, {"w": g}, state, cfg)
            assert state.t == expected


class TestFit:
    def test_constant_loss_stops_after_patience_plus_one(self, rng):
        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        samples = tiny_samples(rng)
        cfg = TrainConfig(learning_rate=1e-9, patience=3, max_epochs=50, seed=1,
                          min_improvement=1e-5)
        # learning rate too small to move the monitored loss by min_improvement
        result = fit(net, samples, [], cfg)
        assert len(result.history) == cfg.patience + 1
        assert result.stopped_early

    def test_runs_to_max_epochs_when_patience_never_triggers(self, rng):
        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        samples = tiny_samples(rng)
        cfg = TrainConfig(learning_rate=1e-3, patience=100, max_epochs=4, seed=1)
        result = fit(net, samples, [], cfg)
        assert len(result.history) == 4
        assert not result.stopped_early

    def test_fixed_seed_bitwise_reproducible(self, rng):
        samples = tiny_samples(rng)

        def run():
            net = Network(NetworkConfig(**TINY_NET)).init(seed=7)
            cfg = TrainConfig(learning_rate=1e-3, patience=100, max_epochs=3, seed=11)
            fit(net, samples, samples[:1], cfg)
            return net.state_dict()

        a, b = run(), run()
        for name in a:
            assert np.array_equal(a[name], b[name]), name

    def test_best_state_restored(self, rng):
        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        samples = tiny_samples(rng)
        cfg = TrainConfig(learning_rate=1e-3, patience=100, max_epochs=3, seed=1)
        result = fit(net, samples, [], cfg)
        current = net.state_dict()
        for name in current:
            assert np.array_equal(current[name], result.best_state[name])

    def test_monitors_validation_when_present(self, rng):
        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        samples = tiny_samples(rng)
        cfg = TrainConfig(learning_rate=1e-3, patience=100, max_epochs=2, seed=1)
        result = fit(net, samples, samples[:2], cfg)
        assert all(np.isfinite(r.val_loss) for r in result.history)

    def test_empty_training_set_rejected(self):
        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        with pytest.raises(ValueError, match="empty"):
            fit(net, [], [], TrainConfig())

    def test_nonfinite_loss_aborts_with_last_good_state(self, rng):
        from seqseg.errors import TrainingAborted

        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        good = tiny_samples(rng, n=2)
        bad_x = good[0][0].copy()
        bad_x[0, 0, 0, 0] = np.nan
        cfg = TrainConfig(learning_rate=1e-3, max_epochs=5, batch_size=1, seed=1)
        with pytest.raises(TrainingAborted) as excinfo:
            fit(net, good + [(bad_x, good[0][1])], [], cfg)
        assert set(excinfo.value.best_state) == {n for n, _ in net.named_params()}

    def test_history_csv(self, tmp_path, rng):
        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        cfg = TrainConfig(learning_rate=1e-3, patience=100, max_epochs=2, seed=1)
        result = fit(net, tiny_samples(rng), [], cfg)
        path = tmp_path / "history.csv"
        write_history_csv(path, result.history)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,wall_time"
        assert len(lines) == 3

    def test_evaluate_loss_in_bounds(self, rng):
        net = Network(NetworkConfig(**TINY_NET)).init(seed=0)
        val = evaluate_loss(net, tiny_samples(rng))
        assert -1.0 <= val <= 0.0


class TestConfigValidation:
    def test_bad_learning_rate(self):
        with pytest.raises(ValueError, match="learning rate"):
            TrainConfig(learning_rate=0.0)

    def test_bad_betas(self):
        with pytest.raises(ValueError, match="betas"):
            TrainConfig(beta2=1.0)

    def test_bad_patience(self):
        with pytest.raises(ValueError, match="patience"):
            TrainConfig(patience=0)

import math

import numpy as np
import pytest

from errors import ConfigError, DataError, TrainingDivergedError
from marketdata import GeneratorSettings, SplitSpec, WindowedDataset, build_datasets, generate_synthetic_panel, naive_persistence_loss
from tcn import (
    AdadeltaState,
    ConvLayer,
    TcnModel,
    TrainConfig,
    adadelta_step,
    backward,
    build_standard_tcn,
    causal_conv1d,
    forward,
    last_position_loss,
    load_weights,
    mse_loss_seq,
    mse_loss_seq_grad,
    parameter_count,
    predict_batch,
    predict_next,
    receptive_field,
    save_weights,
    train,
)


def _dataset(slices, mean=0.0, std=1.0):
    slices = np.asarray(slices, dtype=float)
    days = np.arange(slices.shape[0]).astype("datetime64[D]")
    return WindowedDataset.from_slices(slices, [("A", d + 1) for d in days], days, mean=mean, std=std)


def _linear(weights, bias=0.0, dilation=1):
    w = np.asarray(weights, dtype=float)
    return ConvLayer(w.reshape(1, 1, -1), [bias], dilation, "linear")


# --- convolution ---

def test_current_tap_kernel_is_identity():
    x = np.array([[1.0, -2.0, 3.0, 4.5]])
    np.testing.assert_array_equal(causal_conv1d(x, _linear([0.0, 1.0])), x)


def test_past_tap_kernel_is_pure_delay():
    x = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(causal_conv1d(x, _linear([1.0, 0.0], dilation=4)), [[0, 0, 0, 0, 1, 2]])


def test_conv_matches_triple_loop(rng):
    layer = ConvLayer(rng.normal(size=(3, 2, 2)), rng.normal(size=3), dilation=2, activation="linear")
    x = rng.normal(size=(2, 10))
    expected = np.zeros((3, 10))
    for f in range(3):
        for t in range(10):
            total = layer.biases[f]
            for c in range(2):
                for j in range(2):
                    s = t - (2 - 1 - j) * 2
                    if s >= 0:
                        total += layer.weights[f, c, j] * x[c, s]
            expected[f, t] = total
    np.testing.assert_allclose(causal_conv1d(x, layer), expected, rtol=0, atol=1e-12)


def test_conv_rejects_channel_mismatch_and_empty_input(rng):
    layer = ConvLayer(rng.normal(size=(3, 2, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        causal_conv1d(np.zeros((1, 5)), layer)
    with pytest.raises(ValueError):
        causal_conv1d(np.zeros((2, 0)), layer)


# --- architecture ---

def test_standard_network_shape(standard_model):
    assert parameter_count(standard_model) == 713
    assert receptive_field(standard_model) == 64
    assert [layer.dilation for layer in standard_model.layers] == [1, 2, 4, 8, 16, 32, 1]
    assert [layer.kernel for layer in standard_model.layers] == [2] * 6 + [1]
    assert standard_model.layers[-1].activation == "linear"


def test_zero_weights_give_zero_output(standard_model, rng):
    zero = standard_model.with_parameters([np.zeros_like(p) for p in standard_model.parameters()])
    output, _ = forward(zero, rng.normal(size=64))
    np.testing.assert_array_equal(output, np.zeros(64))


def test_forward_rejects_wrong_length(standard_model):
    with pytest.raises(ValueError):
        forward(standard_model, np.zeros(63))


def test_causality(standard_model, rng):
    x = rng.normal(size=64)
    base, _ = forward(standard_model, x)
    for t in (0, 10, 31, 63):
        bumped = x.copy()
        bumped[t] += 1.0
        out, _ = forward(standard_model, bumped)
        np.testing.assert_array_equal(out[:t], base[:t])


def _positive_network(input_length):
    """Standard layout with positive weights and unit biases, so every ReLU is active."""
    base = build_standard_tcn(seed=3)
    params = [np.abs(p) + 0.1 if p.ndim == 3 else np.ones_like(p) for p in base.parameters()]
    return TcnModel(base.with_parameters(params).layers, input_length)


def test_receptive_field_is_exactly_64(rng):
    model = _positive_network(128)
    x = np.abs(rng.normal(size=128))
    base, _ = forward(model, x)
    bumped = x.copy()
    bumped[0] += 1.0
    out, _ = forward(model, bumped)
    assert out[63] != base[63]
    np.testing.assert_array_equal(out[64:], base[64:])


# --- loss and gradients ---

def test_mse_loss_examples(rng):
    a = rng.normal(size=64)
    assert mse_loss_seq(a, a) == 0.0
    assert mse_loss_seq(a + 0.5, a) == pytest.approx(0.25, rel=1e-12)
    b = rng.normal(size=64)
    assert mse_loss_seq(a, b) == pytest.approx(sum((a - b) ** 2) / 64, rel=1e-12)
    with pytest.raises(ValueError):
        mse_loss_seq(a, b[:10])


def test_zero_loss_gradient_gives_zero_parameter_gradients(standard_model, rng):
    _, tape = forward(standard_model, rng.normal(size=64))
    for g in backward(standard_model, tape, np.zeros(64)):
        np.testing.assert_array_equal(g, 0.0)


def test_single_linear_layer_gradient_closed_form(rng):
    model = TcnModel([_linear([0.7], bias=0.1)], input_length=64)
    x, target = rng.normal(size=64), rng.normal(size=64)
    output, tape = forward(model, x)
    d_w, d_b = backward(model, tape, mse_loss_seq_grad(output, target))
    error = output - target
    assert d_w[0, 0, 0] == pytest.approx(2 * np.mean(x * error), rel=1e-12)
    assert d_b[0] == pytest.approx(2 * np.mean(error), rel=1e-12)


def test_stale_tape_is_rejected(standard_model, rng):
    _, tape = forward(standard_model, rng.normal(size=64))
    other = standard_model.with_parameters(standard_model.parameters())
    with pytest.raises(ValueError):
        backward(other, tape, np.zeros(64))


def _relu_masks(tape):
    return [z > 0 for z in tape.pre_activations[:-1]]


def test_gradients_match_central_differences():
    h = 1e-5
    checked = skipped = 0
    worst = 0.0
    for draw in range(100):
        rng = np.random.default_rng(draw)
        model = build_standard_tcn(seed=draw)
        model = model.with_parameters(
            [p + (0.1 * rng.normal(size=p.shape) if p.ndim == 1 else 0.0) for p in model.parameters()]
        )
        x = rng.normal(size=64)
        output, tape = forward(model, x)
        target = output + 0.1 * rng.normal(size=64)
        grads = backward(model, tape, mse_loss_seq_grad(output, target))

        for param, grad in zip(model.parameters(), grads):
            for idx in np.ndindex(param.shape):
                original = param[idx]
                param[idx] = original + h
                out_plus, tape_plus = forward(model, x)
                param[idx] = original - h
                out_minus, tape_minus = forward(model, x)
                param[idx] = original
                if any(np.any(a != b) for a, b in zip(_relu_masks(tape_plus), _relu_masks(tape_minus))):
                    skipped += 1
                    continue
                numeric = (mse_loss_seq(out_plus, target) - mse_loss_seq(out_minus, target)) / (2 * h)
                analytic = grad[idx]
                error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                worst = max(worst, error)
                checked += 1

    assert checked + skipped == 100 * 713
    assert skipped <= 0.05 * (checked + skipped)
    assert worst < 1e-5


# --- Adadelta ---

def test_adadelta_first_step_value():
    params, state = adadelta_step([np.array([0.0])], [np.array([1.0])], AdadeltaState())
    expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
    assert params[0][0] == pytest.approx(expected, abs=1e-15)
    assert params[0][0] == pytest.approx(-0.0044721, abs=1e-7)


def test_adadelta_two_steps_match_manual_iteration():
    rho, eps = 0.95, 1e-6
    x, eg, ex = 0.5, 0.0, 0.0
    params, state = [np.array([0.5])], AdadeltaState()
    for g in (0.3, -0.8):
        eg = rho * eg + (1 - rho) * g * g
        dx = -math.sqrt(ex + eps) / math.sqrt(eg + eps) * g
        ex = rho * ex + (1 - rho) * dx * dx
        x += dx
        params, state = adadelta_step(params, [np.array([g])], state)
    assert params[0][0] == pytest.approx(x, abs=1e-12)
    assert state.sq_grad[0][0] == pytest.approx(eg, abs=1e-12)
    assert state.sq_update[0][0] == pytest.approx(ex, abs=1e-12)
    assert state.steps == 2


def test_adadelta_zero_gradient_leaves_params_and_decays_accumulators():
    state = AdadeltaState(sq_grad=[np.array([0.4])], sq_update=[np.array([0.2])])
    params, new_state = adadelta_step([np.array([1.5])], [np.array([0.0])], state)
    assert params[0][0] == 1.5
    assert new_state.sq_grad[0][0] == pytest.approx(0.95 * 0.4)
    assert new_state.sq_update[0][0] == pytest.approx(0.95 * 0.2)


def test_adadelta_skips_non_finite_gradient(caplog):
    with caplog.at_level("WARNING"):
        params, state = adadelta_step([np.array([1.0])], [np.array([np.nan])], AdadeltaState())
    assert params[0][0] == 1.0
    assert state.skipped == 1
    assert "Non-finite gradient" in caplog.text


def test_adadelta_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adadelta_step([np.zeros(3)], [np.zeros(2)], AdadeltaState())


# --- training ---

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(target_mode="middle")


def test_training_on_a_zero_window_reaches_zero_loss(standard_model):
    _, history = train(standard_model, _dataset(np.zeros((1, 65))), TrainConfig(epochs=300, seed=1))
    assert len(history) == 300
    assert history[-1] < 1e-6


def test_training_is_deterministic(small_panel):
    dataset = build_datasets(small_panel[:2], SplitSpec()).joint_train
    cfg = TrainConfig(epochs=3, batch_size=64, seed=4)
    model_a, hist_a = train(build_standard_tcn(seed=2), dataset, cfg)
    model_b, hist_b = train(build_standard_tcn(seed=2), dataset, cfg)
    assert hist_a == hist_b
    for a, b in zip(model_a.parameters(), model_b.parameters()):
        np.testing.assert_array_equal(a, b)


def test_training_beats_naive_persistence_on_ar1():
    params = GeneratorSettings(phi=0.3, sigma=0.3, beta_mean=0.0, beta_spread=0.0)
    series = generate_synthetic_panel(1, 600, seed=8, params=params)
    dataset = build_datasets(series, SplitSpec()).joint_train
    _, history = train(build_standard_tcn(seed=0), dataset, TrainConfig(epochs=20, seed=0))
    assert history[-1] < naive_persistence_loss(dataset)


def test_last_position_training_runs(small_panel):
    dataset = build_datasets(small_panel[:1], SplitSpec()).joint_train
    _, history = train(build_standard_tcn(seed=1), dataset, TrainConfig(epochs=2, target_mode="last"))
    assert len(history) == 2 and all(math.isfinite(v) for v in history)
    output, _ = forward(build_standard_tcn(seed=1), dataset.inputs[:4])
    assert last_position_loss(output, dataset.scalar_targets[:4]) >= 0.0


def test_divergence_reports_epoch_and_norms(standard_model):
    with pytest.raises(TrainingDivergedError) as info:
        train(standard_model, _dataset(np.full((3, 65), np.nan)), TrainConfig(epochs=2))
    assert info.value.epoch == 1
    assert info.value.batch == 0
    assert len(info.value.parameter_norms) == 7


def test_training_on_empty_dataset_is_data_error(standard_model):
    empty = WindowedDataset.from_slices(np.empty((0, 65)), (), np.empty(0, dtype="datetime64[D]"), mean=0.0, std=1.0)
    with pytest.raises(DataError):
        train(standard_model, empty, TrainConfig(epochs=1))


# --- prediction ---

def test_zero_model_predicts_the_mean(standard_model, rng):
    zero = standard_model.with_parameters([np.zeros_like(p) for p in standard_model.parameters()])
    assert predict_next(zero, rng.normal(size=64), mean=0.3, std=0.1) == pytest.approx(0.3, abs=1e-15)


def test_pass_through_model_predicts_persistence(rng):
    identity = TcnModel([_linear([1.0])], input_length=64)
    window = rng.uniform(0.1, 0.5, size=64)
    assert predict_next(identity, window, mean=0.25, std=0.08) == pytest.approx(window[-1], rel=1e-12)


def test_predict_next_composes_standardize_forward_destandardize(standard_model, rng):
    window = rng.uniform(0.1, 0.5, size=64)
    mean, std = 0.27, 0.09
    output, _ = forward(standard_model, (window - mean) / std)
    assert predict_next(standard_model, window, mean, std) == pytest.approx(output[63] * std + mean, rel=1e-12)
    batch = predict_batch(standard_model, np.stack([window, window[::-1]]), mean, std)
    assert batch[0] == pytest.approx(output[63] * std + mean, rel=1e-12)


def test_predict_next_rejects_bad_inputs(standard_model):
    with pytest.raises(ValueError):
        predict_next(standard_model, np.zeros(64), mean=0.0, std=0.0)
    with pytest.raises(ValueError):
        predict_next(standard_model, np.zeros(10), mean=0.0, std=1.0)


# --- weight files ---

def test_weights_round_trip_is_bit_exact(standard_model, tmp_path):
    path = save_weights(standard_model, tmp_path / "model.npz")
    loaded = load_weights(path)
    assert loaded.input_length == standard_model.input_length
    assert [l.dilation for l in loaded.layers] == [l.dilation for l in standard_model.layers]
    assert [l.activation for l in loaded.layers] == [l.activation for l in standard_model.layers]
    for a, b in zip(loaded.parameters(), standard_model.parameters()):
        np.testing.assert_array_equal(a, b)


def test_unknown_weight_format_version_is_rejected(standard_model, tmp_path):
    path = save_weights(standard_model, tmp_path / "model.npz")
    with np.load(path) as data:
        contents = dict(data)
    contents["format_version"] = np.int64(99)
    np.savez(tmp_path / "bad.npz", **contents)
    with pytest.raises(DataError, match="version"):
        load_weights(tmp_path / "bad.npz")

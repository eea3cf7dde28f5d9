"""Tests for the chiral LSTM and GRU cells."""

import numpy as np
import pytest

from src.tools.autodiff import grad_check_parameters
from src.tools.checks import gate_covariance_violation, gru_step_violation, lstm_step_violation
from src.tools.layout import apply_transform, hidden_layout, make_transform, synthetic_layout
from src.tools.recurrent import (
    GRU_KEYS,
    LSTM_KEYS,
    ChiralGRUSpec,
    ChiralLSTMSpec,
    gru_step,
    gru_unroll,
    lstm_gates,
    lstm_step,
    lstm_unroll,
    naive_lstm_spec,
)
from src.utils.exceptions import ValidationError

TRIALS = 100


@pytest.fixture
def in_layout():
    return synthetic_layout(3, 2, 2, negated=1)


@pytest.fixture
def state_layout(in_layout):
    return hidden_layout(in_layout, 3)


def random_state(rng, layout, batch=4):
    return rng.uniform(-1.0, 1.0, size=(batch, layout.size))


def test_zero_lstm_halves_the_cell(in_layout, state_layout, rng):
    spec = ChiralLSTMSpec.zeros(in_layout, state_layout)
    x = rng.standard_normal((2, in_layout.size))
    c = random_state(rng, state_layout, batch=2)
    h, c_next = lstm_step(spec, x, np.zeros_like(c), c)
    # every gate is sigmoid(0) = 0.5 and the candidate is tanh(0) = 0
    np.testing.assert_allclose(c_next.data, 0.5 * c)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c))


def test_zero_gru_halves_the_state(in_layout, state_layout, rng):
    spec = ChiralGRUSpec.zeros(in_layout, state_layout)
    h = random_state(rng, state_layout, batch=2)
    out = gru_step(spec, rng.standard_normal((2, in_layout.size)), h)
    np.testing.assert_allclose(out.data, 0.5 * h)


def test_lstm_step_equivariance(in_layout, state_layout, rng):
    spec = ChiralLSTMSpec.init(in_layout, state_layout, rng=rng)
    worst = 0.0
    for _ in range(TRIALS):
        x = rng.uniform(-2.0, 2.0, size=(4, in_layout.size))
        h, c = random_state(rng, state_layout), random_state(rng, state_layout)
        worst = max(worst, lstm_step_violation(spec, x, h, c))
    assert worst <= 1e-10


def test_lstm_gates_follow_the_swap_only(in_layout, state_layout, rng):
    spec = ChiralLSTMSpec.init(in_layout, state_layout, rng=rng)
    worst = max(
        gate_covariance_violation(
            spec, rng.uniform(-2.0, 2.0, size=(4, in_layout.size)), random_state(rng, state_layout)
        )
        for _ in range(TRIALS)
    )
    assert worst <= 1e-10


def test_gates_are_strictly_between_zero_and_one(in_layout, state_layout, rng):
    spec = ChiralLSTMSpec.init(in_layout, state_layout, rng=rng)
    gates = lstm_gates(spec, rng.uniform(-2.0, 2.0, size=(8, in_layout.size)), random_state(rng, state_layout, 8))
    for name in ("i", "o", "f"):
        assert np.all((gates[name].data > 0.0) & (gates[name].data < 1.0))
    assert np.all(np.abs(gates["g"].data) < 1.0)


def test_lstm_unroll_equivariance(in_layout, state_layout, rng):
    spec = ChiralLSTMSpec.init(in_layout, state_layout, rng=rng)
    t_in, t_h = make_transform(in_layout), make_transform(state_layout)
    x = rng.uniform(-2.0, 2.0, size=(3, 5, in_layout.size))
    out = lstm_unroll(spec, x)
    assert out.shape == (3, 5, state_layout.size)
    mirrored = lstm_unroll(spec, apply_transform(t_in, x))
    np.testing.assert_allclose(apply_transform(t_h, out.data), mirrored.data, atol=1e-9)


def test_single_frame_unroll_equals_one_step(in_layout, state_layout, rng):
    spec = ChiralLSTMSpec.init(in_layout, state_layout, rng=rng)
    x = rng.standard_normal((2, 1, in_layout.size))
    zeros = np.zeros((2, state_layout.size))
    h, _ = lstm_step(spec, x[:, 0, :], zeros, zeros)
    np.testing.assert_allclose(lstm_unroll(spec, x).data[:, 0, :], h.data)


def test_unroll_rejects_empty_or_flat_sequences(in_layout, state_layout):
    spec = ChiralLSTMSpec.zeros(in_layout, state_layout)
    with pytest.raises(ValidationError):
        lstm_unroll(spec, np.zeros((2, 0, in_layout.size)))
    with pytest.raises(ValidationError):
        lstm_unroll(spec, np.zeros(in_layout.size))
    with pytest.raises(ValidationError):
        gru_unroll(ChiralGRUSpec.zeros(in_layout, state_layout), np.zeros((2, 0, in_layout.size)))


def test_step_rejects_mismatched_states(in_layout, state_layout):
    spec = ChiralLSTMSpec.zeros(in_layout, state_layout)
    x = np.zeros((1, in_layout.size))
    with pytest.raises(ValidationError):
        lstm_step(spec, x, np.zeros((1, state_layout.size)), np.zeros((2, state_layout.size)))
    with pytest.raises(ValidationError):
        lstm_step(spec, np.zeros((1, 1)), np.zeros((1, state_layout.size)), np.zeros((1, state_layout.size)))


def test_naive_lstm_breaks_equivariance(in_layout, state_layout, rng, caplog):
    spec = naive_lstm_spec(in_layout, state_layout, rng=rng)
    assert "negates output dims" in caplog.text
    worst = 0.0
    for _ in range(20):
        x = rng.uniform(-2.0, 2.0, size=(4, in_layout.size))
        h, c = random_state(rng, state_layout), random_state(rng, state_layout)
        worst = max(worst, lstm_step_violation(spec, x, h, c))
    assert worst > 1e-3


def test_forget_bias_sits_in_kept_dims(in_layout, state_layout, rng):
    spec = ChiralLSTMSpec.init(in_layout, state_layout, rng=rng, forget_bias=2.0)
    forget = spec.cells["if"]
    np.testing.assert_array_equal(forget.blocks["b_lp"].data, 2.0)
    np.testing.assert_array_equal(forget.blocks["b_cp"].data, 2.0)
    # the gate layout negates nothing, so there is no b_ln to fill
    assert forget.blocks["b_ln"].size == 0


def test_cells_must_be_complete(in_layout, state_layout):
    cells = dict(ChiralLSTMSpec.zeros(in_layout, state_layout).cells)
    cells.pop("hf")
    with pytest.raises(ValidationError):
        ChiralLSTMSpec(in_layout, state_layout, cells)


def test_lstm_gradients(rng):
    layout = synthetic_layout(1, 1, 2, negated=1)
    spec = ChiralLSTMSpec.init(layout, hidden_layout(layout, 2), rng=rng)
    x = rng.uniform(-1.0, 1.0, size=(2, 3, layout.size))
    weights = rng.standard_normal((2, 3, spec.hidden_layout.size))
    errors = grad_check_parameters(lambda: (lstm_unroll(spec, x) * weights).sum(), spec.parameters(), max_coords=6)
    assert set(k.split(".")[0] for k in errors) == set(LSTM_KEYS)
    assert max(errors.values()) <= 1e-5


def test_gru_equivariance(in_layout, state_layout, rng):
    spec = ChiralGRUSpec.init(in_layout, state_layout, rng=rng)
    gate_worst, step_worst = 0.0, 0.0
    for _ in range(TRIALS):
        x = rng.uniform(-2.0, 2.0, size=(4, in_layout.size))
        h = random_state(rng, state_layout)
        gate_worst = max(gate_worst, gate_covariance_violation(spec, x, h))
        step_worst = max(step_worst, gru_step_violation(spec, x, h))
    assert gate_worst <= 1e-10
    assert step_worst <= 1e-10

    t_in, t_h = make_transform(in_layout), make_transform(state_layout)
    x = rng.uniform(-2.0, 2.0, size=(2, 5, in_layout.size))
    np.testing.assert_allclose(
        apply_transform(t_h, gru_unroll(spec, x).data), gru_unroll(spec, apply_transform(t_in, x)).data, atol=1e-9
    )


def test_gru_gradients(rng):
    layout = synthetic_layout(1, 1, 2, negated=1)
    spec = ChiralGRUSpec.init(layout, hidden_layout(layout, 2), rng=rng)
    x = rng.uniform(-1.0, 1.0, size=(2, 3, layout.size))
    errors = grad_check_parameters(lambda: gru_unroll(spec, x).square().sum(), spec.parameters(), max_coords=6)
    assert set(k.split(".")[0] for k in errors) == set(GRU_KEYS)
    assert max(errors.values()) <= 1e-5


@pytest.mark.parametrize("cls", [ChiralLSTMSpec, ChiralGRUSpec])
def test_recurrent_dict_round_trip(cls, in_layout, state_layout, rng):
    spec = cls.init(in_layout, state_layout, rng=rng)
    restored = cls.from_dict(spec.to_dict())
    x = rng.standard_normal((2, 4, in_layout.size))
    np.testing.assert_array_equal(restored.forward(x).data, spec.forward(x).data)


@pytest.mark.parametrize("cls", [ChiralLSTMSpec, ChiralGRUSpec])
def test_counted_inference_matches_forward(cls, in_layout, state_layout, rng):
    spec = cls.init(in_layout, state_layout, rng=rng)
    x = rng.standard_normal((2, 4, in_layout.size))
    y, mults, naive = spec.infer_counted(x)
    np.testing.assert_allclose(y, spec.forward(x).data, atol=1e-10)
    assert 0 < mults < naive

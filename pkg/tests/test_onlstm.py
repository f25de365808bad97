"""
Tests for the ordered-neurons LSTM: initialization, parameter counting,
master-gate algebra, masked unrolling and backpropagation through time.
"""
import numpy as np
import pytest

from hiertext.numeric import Parameter, finite_difference_check
from hiertext.onlstm import (
    GATES,
    CellState,
    ONLSTMParams,
    cell_step,
    cell_step_backward,
    count_onlstm_params,
    count_params,
    init_params,
    sequence_backward,
    sequence_forward,
)

SEEDS = range(20)
FD_TOLERANCE = 1e-4
FD_FLOOR = 1e-6


def _perturbed_params(d, n, rng):
    """
    Initialized weights with random biases so that no gate sits at a
    symmetric point.
    """

    params = init_params(d, n, rng)
    for g in GATES:
        params.b[g].value += rng.normal(scale=0.5, size=n)
    return params


def test_init_params_shapes_and_structure():
    """
    Expected behavior:
    - Six gates with W (d x n), U (n x n), b (n)
    - Recurrent matrices are orthogonal
    - Forget-gate bias is 1, all other biases 0
    """

    params = init_params(3, 4, np.random.default_rng(0))

    assert params.input_size == 3 and params.hidden_size == 4
    for g in GATES:
        assert params.W[g].shape == (3, 4)
        np.testing.assert_allclose(params.U[g].value.T @ params.U[g].value, np.eye(4), atol=1e-12)
    np.testing.assert_array_equal(params.b["forget"].value, 1.0)
    np.testing.assert_array_equal(params.b["master_input"].value, 0.0)


def test_parameter_count_formula():
    """
    The closed-form count matches both the full-scale value and an
    enumeration of initialized tensors.
    """
    assert count_onlstm_params(300, 512) == 6 * (300 * 512 + 512 ** 2 + 512) == 2_497_536

    params = init_params(3, 4, np.random.default_rng(0))
    enumerated = sum(p.value.size for p in params.parameters())
    assert count_params(params) == enumerated == 6 * (12 + 16 + 4)


def test_copy_and_digest():
    """
    A deep copy has the same digest; mutating it leaves the source intact.
    """

    params = init_params(2, 3, np.random.default_rng(1))
    clone = params.copy()

    assert clone.digest() == params.digest()
    clone.W["forget"].value[0, 0] += 1.0
    assert clone.digest() != params.digest()
    assert ONLSTMParams.from_tensors(params.tensors()).digest() == params.digest()


def test_master_gate_invariants_hold_during_rollouts():
    """
    At every step of random rollouts:
    - omega <= min(master forget, master input)
    - effective forget and input gates stay in [0, 1]
    - master forget is nondecreasing and master input nonincreasing
    """

    rng = np.random.default_rng(3)
    for _ in range(10):
        params = _perturbed_params(4, 6, rng)
        X = rng.normal(scale=2.0, size=(3, 5, 4))
        _, cache = sequence_forward(X, np.ones((3, 5), dtype=bool), params)
        for step in cache.steps:
            assert np.all(step.omega <= np.minimum(step.master_f, step.master_i) + 1e-15)
            for gate in (step.f_hat, step.i_hat):
                assert np.all(gate >= -1e-15) and np.all(gate <= 1.0 + 1e-15)
            assert np.all(np.diff(step.master_f, axis=1) >= 0.0)
            assert np.all(np.diff(step.master_i, axis=1) <= 0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_cell_step_gradient(seed):
    """
    One cell step's backward agrees with central differences for the
    input, the previous state and every weight.
    """
    rng = np.random.default_rng(seed)
    d, n, batch = 4, 5, 2
    params = _perturbed_params(d, n, rng)
    x = Parameter("x", rng.standard_normal((batch, d)))
    h_prev = Parameter("h_prev", rng.uniform(-0.9, 0.9, size=(batch, n)))
    c_prev = Parameter("c_prev", rng.standard_normal((batch, n)))
    wh, wc = rng.standard_normal((batch, n)), rng.standard_normal((batch, n))

    def forward():
        state, cache = cell_step(x.value, CellState(h_prev.value, c_prev.value), params)
        dx, dh, dc = cell_step_backward(wh, wc, cache, params)
        x.grad += dx
        h_prev.grad += dh
        c_prev.grad += dc
        return float(np.sum(wh * state.h) + np.sum(wc * state.c))

    checked = params.parameters() + [x, h_prev, c_prev]
    assert finite_difference_check(forward, checked, floor=FD_FLOOR) < FD_TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_bptt_gradient_with_mask(seed):
    """
    Four-step unrolling where the second example's last step is padding.
    """

    rng = np.random.default_rng(seed)
    d, n, batch, steps = 3, 4, 2, 4
    params = _perturbed_params(d, n, rng)
    X = Parameter("X", rng.standard_normal((batch, steps, d)))
    mask = np.ones((batch, steps), dtype=bool)
    mask[1, -1] = False
    w = rng.standard_normal((batch, steps, n))

    def forward():
        H, cache = sequence_forward(X.value, mask, params)
        X.grad += sequence_backward(w, cache, params)
        return float(np.sum(w * H))

    assert finite_difference_check(forward, params.parameters() + [X], floor=FD_FLOOR) < FD_TOLERANCE


def test_masked_steps_emit_zero_and_carry_state():
    """
    Trailing padding changes nothing: hidden outputs on valid steps are
    identical and padded steps emit zeros.
    """

    rng = np.random.default_rng(5)
    params = _perturbed_params(3, 4, rng)
    X = rng.standard_normal((2, 3, 3))
    padded = np.concatenate([X, rng.standard_normal((2, 2, 3))], axis=1)
    mask = np.ones((2, 3), dtype=bool)
    padded_mask = np.concatenate([mask, np.zeros((2, 2), dtype=bool)], axis=1)

    H, _ = sequence_forward(X, mask, params)
    H_padded, _ = sequence_forward(padded, padded_mask, params)

    np.testing.assert_array_equal(H_padded[:, :3], H)
    np.testing.assert_array_equal(H_padded[:, 3:], 0.0)


def test_shape_mismatch_rejected():
    params = init_params(3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cell_step(np.zeros((1, 5)), CellState.zeros(1, 4), params)
    with pytest.raises(ValueError):
        sequence_forward(np.zeros((1, 2, 3)), np.ones((1, 3), dtype=bool), params)

"""
Executable property checks: layer and model equivariance, the weight identity, agreement of the
symmetric inference path, negative controls and gradient checks.
"""

import copy
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.config.settings import TOLERANCES
from src.tools import autodiff as ad
from src.tools.autodiff import Tensor, grad_check_parameters
from src.tools.layers import (
    ChiralBatchNormState,
    ChiralConv1DSpec,
    ChiralLayer,
    ChiralLinearSpec,
    chiral_linear_forward,
    materialize_weight,
    symmetric_matvec,
)
from src.tools.layout import (
    JointLayout,
    apply_transform,
    make_transform,
    swap_transform,
    synthetic_layout,
    transform_as_dense,
)
from src.tools.model import SEQUENCE_KINDS, ChiralNet
from src.tools.recurrent import (
    ChiralGRUSpec,
    ChiralLSTMSpec,
    gru_gates,
    gru_step,
    lstm_gates,
    lstm_step,
    naive_lstm_spec,
)
from src.utils.exceptions import PropertyViolation
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

CONTROL_THRESHOLD = 1e-3
BATCH = 4
SEQUENCE_FRAMES = 5


def _max_abs(a, b) -> float:
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _layer_input(layer: ChiralLayer, rng: np.random.Generator) -> np.ndarray:
    shape = (BATCH, layer.in_layout.size)
    if isinstance(layer, ChiralConv1DSpec):
        shape = (BATCH, layer.receptive_field + 2, layer.in_layout.size)
    elif layer.kind in SEQUENCE_KINDS:
        shape = (BATCH, SEQUENCE_FRAMES, layer.in_layout.size)
    return rng.uniform(-2.0, 2.0, size=shape)


def equivariance_violation(layer: ChiralLayer, x: np.ndarray, training: bool = False) -> float:
    """max |T_out(L(x)) - L(T_in(x))|; train mode runs on copies so running statistics stay put."""
    t_in, t_out = make_transform(layer.in_layout), make_transform(layer.out_layout)
    first, second = (copy.deepcopy(layer), copy.deepcopy(layer)) if training else (layer, layer)
    y = first.forward(x, training=training)
    y_mirrored = second.forward(apply_transform(t_in, x), training=training)
    return _max_abs(apply_transform(t_out, y), y_mirrored)


def weight_identity_violation(spec: ChiralLinearSpec) -> float:
    """max |W T_in - T_out W| with dense transform matrices."""
    weight = materialize_weight(spec).data
    t_in = transform_as_dense(make_transform(spec.in_layout))
    t_out = transform_as_dense(make_transform(spec.out_layout))
    return _max_abs(weight @ t_in, t_out @ weight)


def gate_covariance_violation(spec, x: np.ndarray, h: np.ndarray) -> float:
    """Gates (LSTM i, o, f or GRU r, z) must follow the hidden swap without negation."""
    t_in, t_h = make_transform(spec.in_layout), make_transform(spec.hidden_layout)
    swap = swap_transform(spec.hidden_layout)
    if isinstance(spec, ChiralGRUSpec):
        gates = gru_gates(spec, x, h)
        mirrored = gru_gates(spec, apply_transform(t_in, x), apply_transform(t_h, h))
    else:
        gates = {g: v for g, v in lstm_gates(spec, x, h).items() if g != "g"}
        mirrored = lstm_gates(spec, apply_transform(t_in, x), apply_transform(t_h, h))
    return max(_max_abs(apply_transform(swap, gates[g]), mirrored[g]) for g in gates)


def lstm_step_violation(spec: ChiralLSTMSpec, x: np.ndarray, h: np.ndarray, c: np.ndarray) -> float:
    t_in, t_h = make_transform(spec.in_layout), make_transform(spec.hidden_layout)
    h_t, c_t = lstm_step(spec, x, h, c)
    h_m, c_m = lstm_step(spec, apply_transform(t_in, x), apply_transform(t_h, h), apply_transform(t_h, c))
    return max(_max_abs(apply_transform(t_h, h_t), h_m), _max_abs(apply_transform(t_h, c_t), c_m))


def gru_step_violation(spec: ChiralGRUSpec, x: np.ndarray, h: np.ndarray) -> float:
    t_in, t_h = make_transform(spec.in_layout), make_transform(spec.hidden_layout)
    h_t = gru_step(spec, x, h)
    return _max_abs(apply_transform(t_h, h_t), gru_step(spec, apply_transform(t_in, x), apply_transform(t_h, h)))


def _record(check: str, trials: int, violation: float, tolerance: float, expect: str = "hold") -> Dict[str, Any]:
    passed = violation <= tolerance if expect == "hold" else violation > tolerance
    return {
        "check": check,
        "trials": trials,
        "max_violation": violation,
        "tolerance": tolerance,
        "expect": expect,
        "passed": bool(passed),
    }


def negative_controls(layout: JointLayout, trials: int = 20, seed: int = 0) -> List[Dict[str, Any]]:
    """relu in place of an odd activation, and an LSTM with fully chiral gates, must both break equivariance."""
    rng = np.random.default_rng(seed)
    hidden = synthetic_layout(max(layout.pairs, 1), len(layout.center), 3, negated=1)
    t = make_transform(layout)
    relu_worst, lstm_worst = 0.0, 0.0
    for _ in range(trials):
        spec = ChiralLinearSpec.init(layout, layout, rng=rng)
        x = rng.uniform(-2.0, 2.0, size=(BATCH, layout.size))
        relu_y = chiral_linear_forward(spec, x).relu()
        relu_m = chiral_linear_forward(spec, apply_transform(t, x)).relu()
        relu_worst = max(relu_worst, _max_abs(apply_transform(t, relu_y), relu_m))

        naive = naive_lstm_spec(layout, hidden, rng=rng)
        h = rng.uniform(-1.0, 1.0, size=(BATCH, hidden.size))
        c = rng.uniform(-1.0, 1.0, size=(BATCH, hidden.size))
        lstm_worst = max(lstm_worst, lstm_step_violation(naive, x, h, c))
    return [
        _record("control:relu", trials, relu_worst, CONTROL_THRESHOLD, expect="violate"),
        _record("control:naive_lstm", trials, lstm_worst, CONTROL_THRESHOLD, expect="violate"),
    ]


def _model_input(model: ChiralNet, rng: np.random.Generator) -> np.ndarray:
    if model.is_sequence:
        frames = max(model.min_frames() + 2, SEQUENCE_FRAMES)
        return rng.uniform(-2.0, 2.0, size=(BATCH, frames, model.in_layout.size))
    return rng.uniform(-2.0, 2.0, size=(BATCH, model.in_layout.size))


def run_equivariance_suite(
    model: ChiralNet,
    trials: int = 100,
    tol: float = TOLERANCES["equivariance"],
    seed: int = 0,
    controls: bool = True,
) -> pd.DataFrame:
    """
    Run every property over ``trials`` random inputs and return one row per check.

    Dropout is checked in eval mode only (its train-mode masks are independent per coordinate).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i, layer in enumerate(model.layers):
        name = f"{i}.{layer.kind}"
        modes = [False, True] if isinstance(layer, ChiralBatchNormState) else [False]
        for training in modes:
            worst = max(equivariance_violation(layer, _layer_input(layer, rng), training) for _ in range(trials))
            label = f"{name}:{'train' if training else 'eval'}"
            rows.append(_record(f"equivariance:{label}", trials, worst, tol))

        if isinstance(layer, (ChiralLSTMSpec, ChiralGRUSpec)):
            gate_worst, step_worst = 0.0, 0.0
            for _ in range(trials):
                x = rng.uniform(-2.0, 2.0, size=(BATCH, layer.in_layout.size))
                h = rng.uniform(-1.0, 1.0, size=(BATCH, layer.hidden_layout.size))
                c = rng.uniform(-1.0, 1.0, size=(BATCH, layer.hidden_layout.size))
                gate_worst = max(gate_worst, gate_covariance_violation(layer, x, h))
                if isinstance(layer, ChiralGRUSpec):
                    step_worst = max(step_worst, gru_step_violation(layer, x, h))
                else:
                    step_worst = max(step_worst, lstm_step_violation(layer, x, h, c))
            rows.append(_record(f"gate_covariance:{name}", trials, gate_worst, tol))
            rows.append(_record(f"step_equivariance:{name}", trials, step_worst, tol))

    for name, spec in model.affine_maps().items():
        identity = weight_identity_violation(spec)
        rows.append(_record(f"weight_identity:{name}", 1, identity, TOLERANCES["weight_identity"]))
        worst = 0.0
        for _ in range(trials):
            x = rng.uniform(-2.0, 2.0, size=(BATCH, spec.in_layout.size))
            fast, _ = symmetric_matvec(spec, x)
            worst = max(worst, _max_abs(fast, chiral_linear_forward(spec, x)))
        rows.append(_record(f"symmetric_matvec:{name}", trials, worst, TOLERANCES["symmetric_matvec"]))

    t_in, t_out = make_transform(model.in_layout), make_transform(model.out_layout)
    worst = 0.0
    for _ in range(trials):
        x = _model_input(model, rng)
        y, y_mirrored = model.forward(x), model.forward(apply_transform(t_in, x))
        worst = max(worst, _max_abs(apply_transform(t_out, y), y_mirrored))
    rows.append(_record("equivariance:end_to_end", trials, worst, TOLERANCES["end_to_end"]))

    if controls:
        rows.extend(negative_controls(model.in_layout, trials=min(trials, 20), seed=seed))

    frame = pd.DataFrame(rows)
    failed = frame.loc[~frame["passed"], "check"].tolist()
    logger.info(f"Equivariance suite: {len(frame) - len(failed)}/{len(frame)} checks passed")
    if failed:
        logger.warning(f"Failed checks: {failed}")
    return frame


def assert_suite(frame: pd.DataFrame) -> None:
    failed = frame.loc[~frame["passed"], ["check", "max_violation", "tolerance"]]
    if len(failed):
        details = ", ".join(f"{r.check} ({r.max_violation:.3g} vs {r.tolerance:.0e})" for r in failed.itertuples())
        raise PropertyViolation(f"{len(failed)} property check(s) failed: {details}")


def gradcheck_model(
    model: ChiralNet,
    eps: float = 1e-6,
    seed: int = 0,
    max_coords: Optional[int] = 25,
) -> Dict[str, float]:
    """
    Central-difference check of every free parameter against a random linear functional of the output.

    Runs on a copy in training mode with a fixed dropout seed, so batch norm is differentiated through
    its batch statistics and every loss evaluation sees the same masks.
    """
    model = copy.deepcopy(model)
    rng = np.random.default_rng(seed)
    x = _model_input(model, rng)
    probe = model.forward(x)
    weights = rng.standard_normal(probe.shape)

    def loss() -> Tensor:
        out = model.forward(x, training=True, rng=np.random.default_rng(seed))
        return ad.sum_(out * weights + 0.5 * out.square())

    errors = grad_check_parameters(loss, model.parameters(), eps=eps, max_coords=max_coords, seed=seed)
    worst = max(errors.values(), default=0.0)
    logger.info(f"Gradient check over {len(errors)} parameter blocks: max relative error {worst:.3g}")
    return errors


def assert_gradients(errors: Dict[str, float], tol: float = TOLERANCES["gradcheck"]) -> None:
    failed = {name: err for name, err in errors.items() if err > tol}
    if failed:
        raise PropertyViolation(f"gradient check failed for {sorted(failed)} (tolerance {tol})")

"""
Chirality-equivariant LSTM and GRU cells.

Gates are chiral affine maps whose output layout is the hidden layout with nothing negated, so a
gate commutes with the left/right swap and ignores sign flips. Elementwise products of a gate with
a fully chiral quantity (cell state, candidate, reset path) then stay equivariant. Candidate and
cell paths use the full hidden layout.

Each cell keeps its affine maps in a dict keyed by the usual gate subscripts: ``ii``/``hi`` (input),
``io``/``ho`` (output), ``if``/``hf`` (forget), ``ig``/``hg`` (cell candidate) for the LSTM and
``ir``/``hr`` (reset), ``iz``/``hz`` (update), ``in``/``hn`` (candidate) for the GRU. The first
letter says whether the map reads the input or the hidden state.
"""

from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from src.tools import autodiff as ad
from src.tools.autodiff import Tensor, as_tensor
from src.tools.layers import (
    ChiralLayer,
    ChiralLinearSpec,
    RngLike,
    chiral_linear_forward,
    naive_mult_count,
    symmetric_matvec,
)
from src.tools.layout import JointLayout
from src.utils.exceptions import ValidationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

LSTM_GATES = ("i", "o", "f")
LSTM_KEYS = ("ii", "hi", "io", "ho", "if", "hf", "ig", "hg")
GRU_KEYS = ("ir", "hr", "iz", "hz", "in", "hn")

LinearFn = Callable[[ChiralLinearSpec, Tensor], Tensor]


def _plain_linear(spec: ChiralLinearSpec, x: Tensor) -> Tensor:
    return chiral_linear_forward(spec, x)


class _CountingLinear:
    """Symmetric inference path that tallies weight multiplications across calls."""

    def __init__(self):
        self.mults = 0
        self.naive = 0

    def __call__(self, spec: ChiralLinearSpec, x: Tensor) -> Tensor:
        y, count = symmetric_matvec(spec, x)
        self.mults += count
        self.naive += naive_mult_count(spec, x)
        return y


def _check_cells(cells: Dict[str, ChiralLinearSpec], keys: Tuple[str, ...], in_layout, hidden_layout, gated) -> None:
    missing = [k for k in keys if k not in cells]
    if missing:
        raise ValidationError(f"recurrent cell is missing maps {missing}")
    for key in keys:
        spec = cells[key]
        source = in_layout if key[0] == "i" else hidden_layout
        if spec.in_layout.size != source.size or spec.out_layout.size != hidden_layout.size:
            raise ValidationError(
                f"map '{key}' goes {spec.in_layout.size} -> {spec.out_layout.size}, "
                f"expected {source.size} -> {hidden_layout.size}"
            )
        if key[1:] in gated and spec.out_layout.n_negated:
            logger.warning(f"gate map '{key}' negates output dims: the cell will not be equivariant")


def _recurrent_dict(kind: str, in_layout: JointLayout, hidden_layout: JointLayout, cells) -> Dict[str, Any]:
    return {
        "kind": kind,
        "in_layout": in_layout.to_dict(),
        "hidden_layout": hidden_layout.to_dict(),
        "cells": {key: spec.to_dict() for key, spec in cells.items()},
    }


def _zero_state(x: Tensor, hidden_layout: JointLayout) -> Tensor:
    return Tensor(np.zeros(x.shape[:-1] + (hidden_layout.size,)))


def _check_sequence(x: Tensor, in_layout: JointLayout) -> None:
    if x.ndim < 2:
        raise ValidationError(f"sequence input needs a time axis, got shape {x.shape}")
    if x.shape[-1] != in_layout.size:
        raise ValidationError(f"sequence feature axis has length {x.shape[-1]}, layout expects {in_layout.size}")
    if x.shape[-2] == 0:
        raise ValidationError("cannot unroll an empty sequence")


# ----------------------------------------------------------------------
# LSTM
# ----------------------------------------------------------------------
@dataclass(eq=False)
class ChiralLSTMSpec(ChiralLayer):
    in_layout_: JointLayout
    hidden_layout: JointLayout
    cells: Dict[str, ChiralLinearSpec]

    kind = "chiral_lstm"

    def __post_init__(self):
        _check_cells(self.cells, LSTM_KEYS, self.in_layout_, self.hidden_layout, gated=LSTM_GATES)

    @property
    def in_layout(self) -> JointLayout:
        return self.in_layout_

    @property
    def out_layout(self) -> JointLayout:
        return self.hidden_layout

    @classmethod
    def init(
        cls,
        in_layout: JointLayout,
        hidden_layout: JointLayout,
        rng: RngLike = None,
        forget_bias: float = 1.0,
    ) -> "ChiralLSTMSpec":
        """Negation-invariant gates, fully chiral candidate; forget gate bias starts at ``forget_bias``."""
        rng = np.random.default_rng(rng)
        gate_layout = hidden_layout.without_negation()
        cells = {}
        for gate in LSTM_GATES:
            cells["i" + gate] = ChiralLinearSpec.init(in_layout, gate_layout, rng=rng)
            cells["h" + gate] = ChiralLinearSpec.init(hidden_layout, gate_layout, rng=rng)
        cells["ig"] = ChiralLinearSpec.init(in_layout, hidden_layout, rng=rng)
        cells["hg"] = ChiralLinearSpec.init(hidden_layout, hidden_layout, rng=rng)
        # forget bias lives in the kept-dim blocks so the gate stays negation-invariant
        for name in ("b_lp", "b_cp"):
            cells["if"].blocks[name].data[...] = forget_bias
        return cls(in_layout, hidden_layout, cells)

    @classmethod
    def zeros(cls, in_layout: JointLayout, hidden_layout: JointLayout) -> "ChiralLSTMSpec":
        gate_layout = hidden_layout.without_negation()
        cells = {}
        for gate in LSTM_GATES:
            cells["i" + gate] = ChiralLinearSpec.zeros(in_layout, gate_layout)
            cells["h" + gate] = ChiralLinearSpec.zeros(hidden_layout, gate_layout)
        cells["ig"] = ChiralLinearSpec.zeros(in_layout, hidden_layout)
        cells["hg"] = ChiralLinearSpec.zeros(hidden_layout, hidden_layout)
        return cls(in_layout, hidden_layout, cells)

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{key}.{name}": p for key in LSTM_KEYS for name, p in self.cells[key].parameters().items()}

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        return lstm_unroll(self, x)

    def infer_counted(self, x: np.ndarray) -> Tuple[np.ndarray, int, int]:
        counter = _CountingLinear()
        y = _lstm_unroll(self, as_tensor(x), None, None, counter)
        return y.data, counter.mults, counter.naive

    def to_dict(self) -> Dict[str, Any]:
        return _recurrent_dict(self.kind, self.in_layout_, self.hidden_layout, self.cells)

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ChiralLSTMSpec":
        try:
            cells = {key: ChiralLinearSpec.from_dict(r) for key, r in record["cells"].items()}
            layouts = JointLayout.from_dict(record["in_layout"]), JointLayout.from_dict(record["hidden_layout"])
            return cls(*layouts, cells)
        except KeyError as e:
            raise ValidationError(f"LSTM record is missing {e}") from e


def naive_lstm_spec(in_layout: JointLayout, hidden_layout: JointLayout, rng: RngLike = None) -> ChiralLSTMSpec:
    """LSTM whose gates use the full chiral sharing of the hidden layout (not equivariant)."""
    rng = np.random.default_rng(rng)
    cells = {}
    for gate in LSTM_GATES + ("g",):
        cells["i" + gate] = ChiralLinearSpec.init(in_layout, hidden_layout, rng=rng)
        cells["h" + gate] = ChiralLinearSpec.init(hidden_layout, hidden_layout, rng=rng)
    return ChiralLSTMSpec(in_layout, hidden_layout, cells)


def lstm_gates(
    spec: ChiralLSTMSpec, x_t, h_prev, linear: LinearFn = _plain_linear
) -> Dict[str, Tensor]:
    """Input, output and forget gates (sigmoid) plus the candidate g (tanh)."""
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    gates = {}
    for gate in LSTM_GATES:
        gates[gate] = (linear(spec.cells["i" + gate], x_t) + linear(spec.cells["h" + gate], h_prev)).sigmoid()
    gates["g"] = (linear(spec.cells["ig"], x_t) + linear(spec.cells["hg"], h_prev)).tanh()
    return gates


def lstm_step(spec: ChiralLSTMSpec, x_t, h_prev, c_prev, linear: LinearFn = _plain_linear) -> Tuple[Tensor, Tensor]:
    """c_t = f*c_prev + i*g, h_t = o*tanh(c_t)."""
    x_t, h_prev, c_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev)
    if x_t.shape[-1] != spec.in_layout.size:
        raise ValidationError(f"LSTM input has width {x_t.shape[-1]}, layout expects {spec.in_layout.size}")
    if h_prev.shape[-1] != spec.hidden_layout.size or c_prev.shape != h_prev.shape:
        raise ValidationError(f"LSTM states must have width {spec.hidden_layout.size} and equal shapes")
    gates = lstm_gates(spec, x_t, h_prev, linear)
    c_t = gates["f"] * c_prev + gates["i"] * gates["g"]
    h_t = gates["o"] * c_t.tanh()
    return h_t, c_t


def _lstm_unroll(spec, x, h0, c0, linear: LinearFn) -> Tensor:
    _check_sequence(x, spec.in_layout)
    first = x[..., 0, :]
    h = as_tensor(h0) if h0 is not None else _zero_state(first, spec.hidden_layout)
    c = as_tensor(c0) if c0 is not None else _zero_state(first, spec.hidden_layout)
    outputs = []
    for t in range(x.shape[-2]):
        h, c = lstm_step(spec, x[..., t, :], h, c, linear)
        outputs.append(h)
    return ad.stack(outputs, axis=-2)


def lstm_unroll(spec: ChiralLSTMSpec, x_seq, h0=None, c0=None) -> Tensor:
    """Hidden states for every frame of ``x_seq`` (batch, time, features); zero initial states by default."""
    return _lstm_unroll(spec, as_tensor(x_seq), h0, c0, _plain_linear)


# ----------------------------------------------------------------------
# GRU
# ----------------------------------------------------------------------
@dataclass(eq=False)
class ChiralGRUSpec(ChiralLayer):
    in_layout_: JointLayout
    hidden_layout: JointLayout
    cells: Dict[str, ChiralLinearSpec]

    kind = "chiral_gru"

    def __post_init__(self):
        _check_cells(self.cells, GRU_KEYS, self.in_layout_, self.hidden_layout, gated=("r", "z"))

    @property
    def in_layout(self) -> JointLayout:
        return self.in_layout_

    @property
    def out_layout(self) -> JointLayout:
        return self.hidden_layout

    @classmethod
    def init(cls, in_layout: JointLayout, hidden_layout: JointLayout, rng: RngLike = None) -> "ChiralGRUSpec":
        rng = np.random.default_rng(rng)
        gate_layout = hidden_layout.without_negation()
        cells = {}
        for gate in ("r", "z"):
            cells["i" + gate] = ChiralLinearSpec.init(in_layout, gate_layout, rng=rng)
            cells["h" + gate] = ChiralLinearSpec.init(hidden_layout, gate_layout, rng=rng)
        cells["in"] = ChiralLinearSpec.init(in_layout, hidden_layout, rng=rng)
        cells["hn"] = ChiralLinearSpec.init(hidden_layout, hidden_layout, rng=rng)
        return cls(in_layout, hidden_layout, cells)

    @classmethod
    def zeros(cls, in_layout: JointLayout, hidden_layout: JointLayout) -> "ChiralGRUSpec":
        gate_layout = hidden_layout.without_negation()
        cells = {}
        for gate in ("r", "z"):
            cells["i" + gate] = ChiralLinearSpec.zeros(in_layout, gate_layout)
            cells["h" + gate] = ChiralLinearSpec.zeros(hidden_layout, gate_layout)
        cells["in"] = ChiralLinearSpec.zeros(in_layout, hidden_layout)
        cells["hn"] = ChiralLinearSpec.zeros(hidden_layout, hidden_layout)
        return cls(in_layout, hidden_layout, cells)

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{key}.{name}": p for key in GRU_KEYS for name, p in self.cells[key].parameters().items()}

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        return gru_unroll(self, x)

    def infer_counted(self, x: np.ndarray) -> Tuple[np.ndarray, int, int]:
        counter = _CountingLinear()
        y = _gru_unroll(self, as_tensor(x), None, counter)
        return y.data, counter.mults, counter.naive

    def to_dict(self) -> Dict[str, Any]:
        return _recurrent_dict(self.kind, self.in_layout_, self.hidden_layout, self.cells)

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ChiralGRUSpec":
        try:
            cells = {key: ChiralLinearSpec.from_dict(r) for key, r in record["cells"].items()}
            layouts = JointLayout.from_dict(record["in_layout"]), JointLayout.from_dict(record["hidden_layout"])
            return cls(*layouts, cells)
        except KeyError as e:
            raise ValidationError(f"GRU record is missing {e}") from e


def gru_gates(spec: ChiralGRUSpec, x_t, h_prev, linear: LinearFn = _plain_linear) -> Dict[str, Tensor]:
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    return {
        gate: (linear(spec.cells["i" + gate], x_t) + linear(spec.cells["h" + gate], h_prev)).sigmoid()
        for gate in ("r", "z")
    }


def gru_step(spec: ChiralGRUSpec, x_t, h_prev, linear: LinearFn = _plain_linear) -> Tensor:
    """n = tanh(W_in x + b_in + r*(W_hn h + b_hn)), h_t = (1 - z)*n + z*h_prev."""
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    if x_t.shape[-1] != spec.in_layout.size:
        raise ValidationError(f"GRU input has width {x_t.shape[-1]}, layout expects {spec.in_layout.size}")
    if h_prev.shape[-1] != spec.hidden_layout.size:
        raise ValidationError(f"GRU state has width {h_prev.shape[-1]}, layout expects {spec.hidden_layout.size}")
    gates = gru_gates(spec, x_t, h_prev, linear)
    candidate = (linear(spec.cells["in"], x_t) + gates["r"] * linear(spec.cells["hn"], h_prev)).tanh()
    return (1.0 - gates["z"]) * candidate + gates["z"] * h_prev


def _gru_unroll(spec, x, h0, linear: LinearFn) -> Tensor:
    _check_sequence(x, spec.in_layout)
    h = as_tensor(h0) if h0 is not None else _zero_state(x[..., 0, :], spec.hidden_layout)
    outputs = []
    for t in range(x.shape[-2]):
        h = gru_step(spec, x[..., t, :], h, linear)
        outputs.append(h)
    return ad.stack(outputs, axis=-2)


def gru_unroll(spec: ChiralGRUSpec, x_seq, h0: Optional[Tensor] = None) -> Tensor:
    return _gru_unroll(spec, as_tensor(x_seq), h0, _plain_linear)

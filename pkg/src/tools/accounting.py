"""
Parameter and multiplication accounting for chiral layers.

Closed-form factors are exact ``Fraction`` values. Measured counts come from the free blocks of each
affine map and from running :func:`symmetric_matvec` on a probe vector.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from src.tools.layers import ChiralLinearSpec, symmetric_matvec
from src.tools.layout import JointLayout
from src.utils.exceptions import AuditError, ValidationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


def _joint_counts(layout: JointLayout):
    if layout.joint_count == 0:
        raise ValidationError(f"{layout} has no joints")
    return layout.pairs, len(layout.center), layout.joint_count


def param_reduction_factor(in_layout: JointLayout, out_layout: JointLayout) -> Fraction:
    """(|J_l^in| + |J_c^in|)(|J_l^out| + |J_c^out|) / (|J^in| |J^out|)."""
    li, ci, ji = _joint_counts(in_layout)
    lo, co, jo = _joint_counts(out_layout)
    return Fraction((li + ci) * (lo + co), ji * jo)


def mult_reduction_factor(in_layout: JointLayout) -> Fraction:
    """(|J_l^in| + |J_c^in|) / |J^in|."""
    li, ci, ji = _joint_counts(in_layout)
    return Fraction(li + ci, ji)


def weight_sharing_bound(in_layout: JointLayout, out_layout: JointLayout) -> Fraction:
    """
    Upper bound on free/dense weight ratio implied by the sharing pattern.

    Left rows keep a free block for every input group (same side and mirrored side), center rows read
    each mirror pair once. Zero blocks inside the center rows only push the measured ratio lower.
    """
    li, ci, ji = _joint_counts(in_layout)
    lo, co, jo = _joint_counts(out_layout)
    return Fraction(2 * lo * li + lo * ci + co * (li + ci), jo * ji)


def _as_text(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


@dataclass
class LayerCost:
    """Measured and analytic cost of one affine map."""

    name: str
    kind: str
    free_weights: int
    free_biases: int
    dense_weights: int
    dense_biases: int
    symmetric_mults: int
    naive_mults: int
    formula_param_factor: Fraction
    sharing_bound: Fraction
    mult_factor: Fraction

    @property
    def weight_ratio(self) -> Fraction:
        return Fraction(self.free_weights, self.dense_weights) if self.dense_weights else Fraction(1)

    @property
    def param_ratio(self) -> Fraction:
        """Bias-inclusive ratio."""
        dense = self.dense_weights + self.dense_biases
        return Fraction(self.free_weights + self.free_biases, dense) if dense else Fraction(1)

    @property
    def mult_ratio(self) -> Fraction:
        return Fraction(self.symmetric_mults, self.naive_mults) if self.naive_mults else Fraction(1)

    @property
    def zero_block_entries(self) -> int:
        """Weights the sharing bound allows but the pattern pins to zero."""
        return int(self.sharing_bound * self.dense_weights) - self.free_weights

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "free_weights": self.free_weights,
            "free_biases": self.free_biases,
            "dense_weights": self.dense_weights,
            "dense_biases": self.dense_biases,
            "zero_block_entries": self.zero_block_entries,
            "weight_ratio": float(self.weight_ratio),
            "param_ratio": float(self.param_ratio),
            "formula_param_factor": _as_text(self.formula_param_factor),
            "sharing_bound": _as_text(self.sharing_bound),
            "symmetric_mults": self.symmetric_mults,
            "naive_mults": self.naive_mults,
            "mult_ratio": float(self.mult_ratio),
            "mult_factor": _as_text(self.mult_factor),
        }


def measure_linear(name: str, spec: ChiralLinearSpec, kind: str = None) -> LayerCost:
    """Count free blocks and instrument one symmetric matvec of ``spec``."""
    probe = np.random.default_rng(0).standard_normal(spec.in_layout.size)
    _, mults = symmetric_matvec(spec, probe)
    n_in, n_out = spec.in_layout.size, spec.out_layout.size
    return LayerCost(
        name=name,
        kind=kind or spec.kind,
        free_weights=spec.free_weight_count(),
        free_biases=spec.free_bias_count(),
        dense_weights=n_in * n_out,
        dense_biases=n_out if spec.bias else 0,
        symmetric_mults=mults,
        naive_mults=n_in * n_out,
        formula_param_factor=param_reduction_factor(spec.in_layout, spec.out_layout),
        sharing_bound=weight_sharing_bound(spec.in_layout, spec.out_layout),
        mult_factor=mult_reduction_factor(spec.in_layout),
    )


def check_layer_cost(cost: LayerCost) -> None:
    if cost.free_weights > cost.dense_weights:
        raise AuditError(cost.name, f"{cost.free_weights} free weights exceed the dense count {cost.dense_weights}")
    if cost.weight_ratio > cost.sharing_bound:
        raise AuditError(
            cost.name, f"weight ratio {cost.weight_ratio} exceeds the sharing bound {_as_text(cost.sharing_bound)}"
        )
    if cost.mult_ratio > cost.mult_factor:
        raise AuditError(cost.name, f"mult ratio {cost.mult_ratio} exceeds the factor {_as_text(cost.mult_factor)}")


@dataclass
class CostReport:
    layers: List[LayerCost] = field(default_factory=list)

    def _total(self, attr: str) -> int:
        return int(sum(getattr(layer, attr) for layer in self.layers))

    def totals(self) -> Dict[str, Any]:
        free_w, dense_w = self._total("free_weights"), self._total("dense_weights")
        free_b, dense_b = self._total("free_biases"), self._total("dense_biases")
        sym, naive = self._total("symmetric_mults"), self._total("naive_mults")
        return {
            "free_weights": free_w,
            "free_biases": free_b,
            "dense_weights": dense_w,
            "dense_biases": dense_b,
            "zero_block_entries": self._total("zero_block_entries"),
            "weight_ratio": free_w / dense_w if dense_w else 1.0,
            "param_ratio": (free_w + free_b) / (dense_w + dense_b) if dense_w + dense_b else 1.0,
            "symmetric_mults": sym,
            "naive_mults": naive,
            "mult_ratio": sym / naive if naive else 1.0,
        }

    def to_frame(self) -> pd.DataFrame:
        columns = [
            "name", "kind", "free_weights", "dense_weights", "weight_ratio", "param_ratio",
            "formula_param_factor", "sharing_bound", "zero_block_entries",
            "symmetric_mults", "naive_mults", "mult_ratio", "mult_factor",
        ]  # fmt: skip
        return pd.DataFrame([layer.to_dict() for layer in self.layers], columns=columns)

    def render(self) -> str:
        frame = self.to_frame()
        totals = self.totals()
        total_row = {k: totals.get(k, "") for k in frame.columns}
        total_row.update({"name": "TOTAL", "kind": ""})
        frame = pd.concat([frame, pd.DataFrame([total_row])], ignore_index=True)
        return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")

    def to_dict(self) -> Dict[str, Any]:
        return {"layers": [layer.to_dict() for layer in self.layers], "totals": self.totals()}


def audit_model(model) -> CostReport:
    """
    Measure every affine map of a model and check it against the analytic bounds.

    ``model`` is a ``ChiralNet`` or a ``ModelConfig`` (built with its seed).

    Raises:
        AuditError: naming the first map whose measured counts exceed their bound
    """
    from src.tools.model import ModelConfig, build_model

    if isinstance(model, ModelConfig):
        model = build_model(model)

    report = CostReport()
    for name, spec in model.affine_maps().items():
        cost = measure_linear(name, spec)
        try:
            check_layer_cost(cost)
        except AuditError as e:
            logger.error(f"Audit failed: {e}")
            raise
        logger.debug(
            f"{name}: weights {cost.free_weights}/{cost.dense_weights}, mults {cost.symmetric_mults}/{cost.naive_mults}"
        )
        report.layers.append(cost)

    totals = report.totals()
    logger.info(
        f"Audited {len(report.layers)} affine maps: weight ratio {totals['weight_ratio']:.4f}, "
        f"mult ratio {totals['mult_ratio']:.4f}"
    )
    return report

"""
Chirality-equivariant feed-forward layers.

A chiral affine map stores only its free blocks (``W_ln_ln`` ... ``W_cp_cp``, ``b_ln``, ``b_lp``,
``b_cp``). The full weight is materialized on demand with the mirrored sign pattern, so gradients flow
straight into the free blocks. :func:`symmetric_matvec` is the inference path that multiplies paired
sums and differences of mirrored inputs instead of the full matrix, and reports how many weight
multiplications it performed.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.tools import autodiff as ad
from src.tools.autodiff import Tensor, as_tensor
from src.tools.layout import JointLayout, apply_transform, make_transform, swap_transform
from src.utils.exceptions import ValidationError
from src.utils.logger import setup_logger
from src.utils.utils import decode_array, encode_array

logger = setup_logger(__name__)

RngLike = Union[int, np.random.Generator, None]

WEIGHT_BLOCKS = (
    "W_ln_ln", "W_ln_lp", "W_lp_ln", "W_lp_lp",
    "W_ln_rn", "W_ln_rp", "W_lp_rn", "W_lp_rp",
    "W_ln_cn", "W_ln_cp", "W_lp_cn", "W_lp_cp",
    "W_cn_ln", "W_cn_lp", "W_cp_lp", "W_cn_cn", "W_cp_cp",
)  # fmt: skip
BIAS_BLOCKS = ("b_ln", "b_lp", "b_cp")

# (output group, input group, free block, sign) for every non-zero block of the full matrix
WEIGHT_PLACEMENTS = (
    # left rows hold every free block once
    ("ln", "ln", "W_ln_ln", 1.0), ("ln", "lp", "W_ln_lp", 1.0), ("lp", "ln", "W_lp_ln", 1.0), ("lp", "lp", "W_lp_lp", 1.0),
    ("ln", "rn", "W_ln_rn", 1.0), ("ln", "rp", "W_ln_rp", 1.0), ("lp", "rn", "W_lp_rn", 1.0), ("lp", "rp", "W_lp_rp", 1.0),
    ("ln", "cn", "W_ln_cn", 1.0), ("ln", "cp", "W_ln_cp", 1.0), ("lp", "cn", "W_lp_cn", 1.0), ("lp", "cp", "W_lp_cp", 1.0),
    # right rows mirror the left rows
    ("rn", "ln", "W_ln_rn", 1.0), ("rn", "lp", "W_ln_rp", -1.0), ("rp", "ln", "W_lp_rn", -1.0), ("rp", "lp", "W_lp_rp", 1.0),
    ("rn", "rn", "W_ln_ln", 1.0), ("rn", "rp", "W_ln_lp", -1.0), ("rp", "rn", "W_lp_ln", -1.0), ("rp", "rp", "W_lp_lp", 1.0),
    ("rn", "cn", "W_ln_cn", 1.0), ("rn", "cp", "W_ln_cp", -1.0), ("rp", "cn", "W_lp_cn", -1.0), ("rp", "cp", "W_lp_cp", 1.0),
    # center rows; cn<-cp, cp<-cn and cp<-ln/rn stay zero
    ("cn", "ln", "W_cn_ln", 1.0), ("cn", "lp", "W_cn_lp", 1.0), ("cp", "lp", "W_cp_lp", 1.0),
    ("cn", "rn", "W_cn_ln", 1.0), ("cn", "rp", "W_cn_lp", -1.0), ("cp", "rp", "W_cp_lp", 1.0),
    ("cn", "cn", "W_cn_cn", 1.0), ("cp", "cp", "W_cp_cp", 1.0),
)  # fmt: skip
BIAS_PLACEMENTS = (
    ("ln", "b_ln", 1.0),
    ("lp", "b_lp", 1.0),
    ("rn", "b_ln", -1.0),
    ("rp", "b_lp", 1.0),
    ("cp", "b_cp", 1.0),
)


def _rng(rng: RngLike) -> np.random.Generator:
    return np.random.default_rng(rng)


def _check_width(x, layout: JointLayout, what: str) -> None:
    width = x.shape[-1] if x.ndim else 0
    if width != layout.size:
        raise ValidationError(f"{what}: input feature axis has length {width}, layout expects {layout.size}")


def _affine(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    flat = x.ndim == 1
    if flat:
        x = x.reshape(1, -1)
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y.reshape(y.shape[-1]) if flat else y


def plain_layout(width: int, prefix: str = "u") -> JointLayout:
    """Layout of ``width`` unstructured units (center joints, one dim, nothing negated)."""
    if width < 1:
        raise ValidationError(f"width must be positive, got {width}")
    return JointLayout((), (), tuple(f"{prefix}{i}" for i in range(width)), 1, ())


def block_shapes(in_layout: JointLayout, out_layout: JointLayout) -> Dict[str, Tuple[int, ...]]:
    """Shapes of the free weight and bias blocks implied by two layouts."""
    gin, gout = in_layout.groups, out_layout.groups
    shapes = {}
    for name in WEIGHT_BLOCKS:
        _, out_group, in_group = name.split("_")
        shapes[name] = (len(gout[out_group]), len(gin[in_group]))
    for name in BIAS_BLOCKS:
        shapes[name] = (len(gout[name[2:]]),)
    return shapes


# ----------------------------------------------------------------------
# Layer protocol
# ----------------------------------------------------------------------
class ChiralLayer:
    """Common surface of every layer a model stacks."""

    kind = "layer"

    @property
    def in_layout(self) -> JointLayout:
        raise NotImplementedError

    @property
    def out_layout(self) -> JointLayout:
        raise NotImplementedError

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> Dict[str, Tensor]:
        return {}

    def infer_counted(self, x: np.ndarray) -> Tuple[np.ndarray, int, int]:
        """Inference output plus (symmetric, naive) weight-multiplication counts."""
        return self.forward(x).data, 0, 0

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError

    def __call__(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        return self.forward(x, training=training, rng=rng)


# ----------------------------------------------------------------------
# Fully connected
# ----------------------------------------------------------------------
@dataclass(eq=False)
class ChiralLinearSpec(ChiralLayer):
    """Free blocks of one equivariant affine map between two layouts."""

    in_layout_: JointLayout
    out_layout_: JointLayout
    blocks: Dict[str, Tensor]
    bias: bool = True

    kind = "chiral_linear"

    def __post_init__(self):
        expected = block_shapes(self.in_layout_, self.out_layout_)
        names = WEIGHT_BLOCKS + (BIAS_BLOCKS if self.bias else ())
        missing = [n for n in names if n not in self.blocks]
        if missing:
            raise ValidationError(f"chiral linear spec is missing blocks {missing}")
        unknown = sorted(set(self.blocks) - set(names))
        if unknown:
            raise ValidationError(f"unknown blocks {unknown}")
        for name in names:
            block = self.blocks[name]
            if not isinstance(block, Tensor):
                block = self.blocks[name] = Tensor(block, requires_grad=True)
            if block.shape != expected[name]:
                raise ValidationError(f"block {name} has shape {block.shape}, layouts imply {expected[name]}")

    @property
    def in_layout(self) -> JointLayout:
        return self.in_layout_

    @property
    def out_layout(self) -> JointLayout:
        return self.out_layout_

    @classmethod
    def init(
        cls,
        in_layout: JointLayout,
        out_layout: JointLayout,
        rng: RngLike = None,
        bias: bool = True,
        scale: Optional[float] = None,
    ) -> "ChiralLinearSpec":
        """Uniform(-s, s) blocks with s = 1/sqrt(full fan-in) unless ``scale`` is given."""
        rng = _rng(rng)
        bound = scale if scale is not None else 1.0 / np.sqrt(in_layout.size)
        shapes = block_shapes(in_layout, out_layout)
        names = WEIGHT_BLOCKS + (BIAS_BLOCKS if bias else ())
        blocks = {n: Tensor(rng.uniform(-bound, bound, size=shapes[n]), requires_grad=True) for n in names}
        return cls(in_layout, out_layout, blocks, bias)

    @classmethod
    def zeros(cls, in_layout: JointLayout, out_layout: JointLayout, bias: bool = True) -> "ChiralLinearSpec":
        shapes = block_shapes(in_layout, out_layout)
        names = WEIGHT_BLOCKS + (BIAS_BLOCKS if bias else ())
        return cls(in_layout, out_layout, {n: Tensor(np.zeros(shapes[n]), requires_grad=True) for n in names}, bias)

    def parameters(self) -> Dict[str, Tensor]:
        return {name: block for name, block in self.blocks.items() if block.size}

    def free_weight_count(self) -> int:
        return int(sum(self.blocks[n].size for n in WEIGHT_BLOCKS))

    def free_bias_count(self) -> int:
        return int(sum(self.blocks[n].size for n in BIAS_BLOCKS)) if self.bias else 0

    def free_parameter_count(self) -> int:
        return self.free_weight_count() + self.free_bias_count()

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        return chiral_linear_forward(self, x)

    def infer_counted(self, x: np.ndarray) -> Tuple[np.ndarray, int, int]:
        y, mults = symmetric_matvec(self, x)
        return y.data, mults, naive_mult_count(self, x)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "in_layout": self.in_layout_.to_dict(),
            "out_layout": self.out_layout_.to_dict(),
            "bias": self.bias,
            "blocks": {name: encode_array(block.data) for name, block in self.blocks.items()},
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ChiralLinearSpec":
        try:
            in_layout = JointLayout.from_dict(record["in_layout"])
            out_layout = JointLayout.from_dict(record["out_layout"])
            blocks = {name: Tensor(decode_array(arr), requires_grad=True) for name, arr in record["blocks"].items()}
        except KeyError as e:
            raise ValidationError(f"chiral linear record is missing {e}") from e
        return cls(in_layout, out_layout, blocks, bool(record.get("bias", True)))


def materialize_weight(spec: ChiralLinearSpec) -> Tensor:
    """Full N_out x N_in weight with the mirrored sign pattern."""
    gin, gout = spec.in_layout.groups, spec.out_layout.groups
    placements = []
    for out_group, in_group, name, sign in WEIGHT_PLACEMENTS:
        block = spec.blocks[name]
        if block.size:
            placements.append((block, gout[out_group], gin[in_group], sign))
    return ad.assemble((spec.out_layout.size, spec.in_layout.size), placements)


def materialize_bias(spec: ChiralLinearSpec) -> Optional[Tensor]:
    """Full bias [b_ln, b_lp, -b_ln, b_lp, 0, b_cp], or None for a bias-free spec."""
    if not spec.bias:
        return None
    gout = spec.out_layout.groups
    placements = [(spec.blocks[name], gout[group], None, sign) for group, name, sign in BIAS_PLACEMENTS]
    return ad.assemble((spec.out_layout.size,), [p for p in placements if p[0].size])


def chiral_linear_forward(spec: ChiralLinearSpec, x) -> Tensor:
    """y = W x + b along the last axis of ``x``."""
    x = as_tensor(x)
    _check_width(x, spec.in_layout, "chiral linear")
    return _affine(x, materialize_weight(spec), materialize_bias(spec))


def naive_mult_count(spec: ChiralLinearSpec, x) -> int:
    vectors = int(np.prod(x.shape[:-1], dtype=np.int64))
    return spec.out_layout.size * spec.in_layout.size * vectors


class _MultCounter:
    """Counts weight multiplications of block products, m*k per input vector."""

    def __init__(self, vectors: int):
        self.vectors = vectors
        self.count = 0

    def matmul(self, weight: np.ndarray, v: np.ndarray) -> np.ndarray:
        self.count += weight.size * self.vectors
        return v @ weight.T


def symmetric_matvec(spec: ChiralLinearSpec, x) -> Tuple[Tensor, int]:
    """
    Same result as :func:`chiral_linear_forward`, computed from paired sums and differences.

    Mirrored input groups are folded into s = x_l + x_r and d = x_l - x_r. Each left row pair produces
    both its left and right outputs from one half-sum and one half-difference product, and center rows
    read each mirror pair once. Folding the weights is input-independent and not counted.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_width(x, spec.in_layout, "symmetric matvec")
    flat = x.ndim == 1
    if flat:
        x = x[None, :]

    W = {name: block.data for name, block in spec.blocks.items()}
    xs = {name: x[..., idx] for name, idx in spec.in_layout.groups.items()}
    s_n, d_n = xs["ln"] + xs["rn"], xs["ln"] - xs["rn"]
    s_p, d_p = xs["lp"] + xs["rp"], xs["lp"] - xs["rp"]

    counter = _MultCounter(int(np.prod(x.shape[:-1], dtype=np.int64)))
    mm = counter.matmul
    bias = {name: (W[name] if spec.bias else 0.0) for name in BIAS_BLOCKS}

    alpha_n = mm(0.5 * (W["W_ln_ln"] + W["W_ln_rn"]), s_n) + mm(0.5 * (W["W_ln_lp"] - W["W_ln_rp"]), d_p)
    alpha_n = alpha_n + mm(W["W_ln_cn"], xs["cn"])
    beta_n = mm(0.5 * (W["W_ln_ln"] - W["W_ln_rn"]), d_n) + mm(0.5 * (W["W_ln_lp"] + W["W_ln_rp"]), s_p)
    beta_n = beta_n + mm(W["W_ln_cp"], xs["cp"]) + bias["b_ln"]

    alpha_p = mm(0.5 * (W["W_lp_ln"] - W["W_lp_rn"]), d_n) + mm(0.5 * (W["W_lp_lp"] + W["W_lp_rp"]), s_p)
    alpha_p = alpha_p + mm(W["W_lp_cp"], xs["cp"]) + bias["b_lp"]
    beta_p = mm(0.5 * (W["W_lp_ln"] + W["W_lp_rn"]), s_n) + mm(0.5 * (W["W_lp_lp"] - W["W_lp_rp"]), d_p)
    beta_p = beta_p + mm(W["W_lp_cn"], xs["cn"])

    y_cn = mm(W["W_cn_ln"], s_n) + mm(W["W_cn_lp"], d_p) + mm(W["W_cn_cn"], xs["cn"])
    y_cp = mm(W["W_cp_lp"], s_p) + mm(W["W_cp_cp"], xs["cp"]) + bias["b_cp"]

    gout = spec.out_layout.groups
    y = np.zeros(x.shape[:-1] + (spec.out_layout.size,))
    y[..., gout["ln"]] = alpha_n + beta_n
    y[..., gout["rn"]] = alpha_n - beta_n
    y[..., gout["lp"]] = alpha_p + beta_p
    y[..., gout["rp"]] = alpha_p - beta_p
    y[..., gout["cn"]] = y_cn
    y[..., gout["cp"]] = y_cp
    return Tensor(y[0] if flat else y), counter.count


# ----------------------------------------------------------------------
# Dense baseline
# ----------------------------------------------------------------------
class DenseLinear(ChiralLinearSpec):
    """Ordinary dense affine layer: a chiral spec over unstructured layouts, so only W_cp_cp is used."""

    kind = "dense"

    @classmethod
    def create(cls, in_size: int, out_size: int, rng: RngLike = None, bias: bool = True) -> "DenseLinear":
        return cls.init(plain_layout(in_size, "i"), plain_layout(out_size, "o"), rng=rng, bias=bias)

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        x = as_tensor(x)
        _check_width(x, self.in_layout, "dense")
        weight = self.blocks["W_cp_cp"]
        return _affine(x, weight, self.blocks["b_cp"] if self.bias else None)

    def infer_counted(self, x: np.ndarray) -> Tuple[np.ndarray, int, int]:
        naive = naive_mult_count(self, x)
        return self.forward(x).data, naive, naive


# ----------------------------------------------------------------------
# Dilated temporal convolution
# ----------------------------------------------------------------------
@dataclass(eq=False)
class ChiralConv1DSpec(ChiralLayer):
    """One chiral weight pattern per tap; only tap 0 carries the (time-shared) bias."""

    taps: List[ChiralLinearSpec]
    dilation: int = 1
    stride: int = 1

    kind = "chiral_conv1d"

    def __post_init__(self):
        if not self.taps:
            raise ValidationError("convolution needs at least one tap")
        if self.dilation < 1 or self.stride < 1:
            raise ValidationError(f"dilation and stride must be positive, got {self.dilation}, {self.stride}")
        first = self.taps[0]
        for tap in self.taps[1:]:
            if not (tap.in_layout.is_compatible(first.in_layout) and tap.out_layout.is_compatible(first.out_layout)):
                raise ValidationError("all convolution taps must share the same layouts")
            if tap.bias:
                raise ValidationError("only the first convolution tap may carry a bias")

    @property
    def kernel_size(self) -> int:
        return len(self.taps)

    @property
    def in_layout(self) -> JointLayout:
        return self.taps[0].in_layout

    @property
    def out_layout(self) -> JointLayout:
        return self.taps[0].out_layout

    @property
    def receptive_field(self) -> int:
        return (self.kernel_size - 1) * self.dilation + 1

    @classmethod
    def init(
        cls,
        in_layout: JointLayout,
        out_layout: JointLayout,
        kernel_size: int,
        dilation: int = 1,
        stride: int = 1,
        rng: RngLike = None,
    ) -> "ChiralConv1DSpec":
        if kernel_size < 1:
            raise ValidationError(f"kernel_size must be positive, got {kernel_size}")
        rng = _rng(rng)
        scale = 1.0 / np.sqrt(in_layout.size * kernel_size)
        taps = [
            ChiralLinearSpec.init(in_layout, out_layout, rng=rng, bias=(tau == 0), scale=scale)
            for tau in range(kernel_size)
        ]
        return cls(taps, dilation, stride)

    def output_length(self, frames: int) -> int:
        if frames < self.receptive_field:
            raise ValidationError(
                f"sequence of {frames} frames is shorter than the receptive field {self.receptive_field}"
            )
        return (frames - self.receptive_field) // self.stride + 1

    def _windows(self, frames: int) -> List[slice]:
        """Input frame slice read by each tap, aligned to the output frames."""
        length = self.output_length(frames)
        windows = []
        for tau in range(self.kernel_size):
            start = (self.kernel_size - 1 - tau) * self.dilation
            windows.append(slice(start, start + (length - 1) * self.stride + 1, self.stride))
        return windows

    def parameters(self) -> Dict[str, Tensor]:
        return {f"tap{tau}.{name}": p for tau, tap in enumerate(self.taps) for name, p in tap.parameters().items()}

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        return chiral_conv1d_forward(self, x)

    def infer_counted(self, x: np.ndarray) -> Tuple[np.ndarray, int, int]:
        x = np.asarray(x, dtype=np.float64)
        _check_width(x, self.in_layout, "chiral conv1d")
        if x.ndim < 2:
            raise ValidationError(f"convolution input needs a time axis, got shape {x.shape}")
        y, mults, naive = 0.0, 0, 0
        for tap, window in zip(self.taps, self._windows(x.shape[-2])):
            frames = x[..., window, :]
            out, count = symmetric_matvec(tap, frames)
            y, mults, naive = y + out.data, mults + count, naive + naive_mult_count(tap, frames)
        return y, mults, naive

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "dilation": self.dilation,
            "stride": self.stride,
            "taps": [tap.to_dict() for tap in self.taps],
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ChiralConv1DSpec":
        taps = [ChiralLinearSpec.from_dict(t) for t in record.get("taps", [])]
        return cls(taps, int(record.get("dilation", 1)), int(record.get("stride", 1)))


def chiral_conv1d_forward(spec: ChiralConv1DSpec, x) -> Tensor:
    """Valid dilated convolution over axis -2 of ``x`` (batch, time, features)."""
    x = as_tensor(x)
    _check_width(x, spec.in_layout, "chiral conv1d")
    if x.ndim < 2:
        raise ValidationError(f"convolution input needs a time axis, got shape {x.shape}")
    y = None
    for tap, window in zip(spec.taps, spec._windows(x.shape[-2])):
        term = _affine(x[..., window, :], materialize_weight(tap), materialize_bias(tap))
        y = term if y is None else y + term
    return y


# ----------------------------------------------------------------------
# Batch normalization
# ----------------------------------------------------------------------
GAMMA_BLOCKS = ("gamma_ln", "gamma_lp", "gamma_cn", "gamma_cp")
BETA_BLOCKS = ("beta_ln", "beta_lp", "beta_cp")


@dataclass(eq=False)
class ChiralBatchNormState(ChiralLayer):
    """
    Batch normalization whose statistics come from the batch together with its mirrored copy.

    The mirrored copy is never materialized: the mean is averaged with its own transform and the
    variance with its left/right swap, which gives exactly the statistics of the doubled batch.
    """

    layout: JointLayout
    params: Dict[str, Tensor]
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    kind = "batchnorm"

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.eps <= 0:
            raise ValidationError(f"eps must be positive, got {self.eps}")
        groups = self.layout.groups
        for name in GAMMA_BLOCKS + BETA_BLOCKS:
            if name not in self.params:
                raise ValidationError(f"batch norm state is missing {name}")
            if not isinstance(self.params[name], Tensor):
                self.params[name] = Tensor(self.params[name], requires_grad=True)
            expected = (len(groups[name.split("_")[1]]),)
            if self.params[name].shape != expected:
                raise ValidationError(f"{name} has shape {self.params[name].shape}, layout implies {expected}")
        self.running_mean = np.array(self.running_mean, dtype=np.float64)
        self.running_var = np.array(self.running_var, dtype=np.float64)
        if self.running_mean.shape != (self.layout.size,) or self.running_var.shape != (self.layout.size,):
            raise ValidationError("running statistics must match the layout size")

    @property
    def in_layout(self) -> JointLayout:
        return self.layout

    @property
    def out_layout(self) -> JointLayout:
        return self.layout

    @classmethod
    def init(cls, layout: JointLayout, momentum: float = 0.1, eps: float = 1e-5) -> "ChiralBatchNormState":
        groups = layout.groups
        params = {}
        for name in GAMMA_BLOCKS:
            params[name] = Tensor(np.ones(len(groups[name.split("_")[1]])), requires_grad=True)
        for name in BETA_BLOCKS:
            params[name] = Tensor(np.zeros(len(groups[name.split("_")[1]])), requires_grad=True)
        return cls(layout, params, np.zeros(layout.size), np.ones(layout.size), momentum, eps)

    def gamma(self) -> Tensor:
        """Swap-symmetric scale: the same gamma on a left group and its right mirror."""
        g, p = self.layout.groups, self.params
        placements = [
            (p["gamma_ln"], g["ln"], None, 1.0),
            (p["gamma_lp"], g["lp"], None, 1.0),
            (p["gamma_ln"], g["rn"], None, 1.0),
            (p["gamma_lp"], g["rp"], None, 1.0),
            (p["gamma_cn"], g["cn"], None, 1.0),
            (p["gamma_cp"], g["cp"], None, 1.0),
        ]
        return ad.assemble((self.layout.size,), [pl for pl in placements if pl[0].size])

    def beta(self) -> Tensor:
        """Odd-symmetric shift [beta_ln, beta_lp, -beta_ln, beta_lp, 0, beta_cp]."""
        g, p = self.layout.groups, self.params
        placements = [
            (p["beta_ln"], g["ln"], None, 1.0),
            (p["beta_lp"], g["lp"], None, 1.0),
            (p["beta_ln"], g["rn"], None, -1.0),
            (p["beta_lp"], g["rp"], None, 1.0),
            (p["beta_cp"], g["cp"], None, 1.0),
        ]
        return ad.assemble((self.layout.size,), [pl for pl in placements if pl[0].size])

    def parameters(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if t.size}

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        return chiral_batchnorm_forward(self, x, training)

    def infer_counted(self, x: np.ndarray) -> Tuple[np.ndarray, int, int]:
        return chiral_batchnorm_forward(self, x, training=False).data, 0, 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "layout": self.layout.to_dict(),
            "momentum": self.momentum,
            "eps": self.eps,
            "params": {name: encode_array(t.data) for name, t in self.params.items()},
            "running_mean": encode_array(self.running_mean),
            "running_var": encode_array(self.running_var),
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ChiralBatchNormState":
        try:
            return cls(
                JointLayout.from_dict(record["layout"]),
                {name: Tensor(decode_array(a), requires_grad=True) for name, a in record["params"].items()},
                decode_array(record["running_mean"]),
                decode_array(record["running_var"]),
                float(record.get("momentum", 0.1)),
                float(record.get("eps", 1e-5)),
            )
        except KeyError as e:
            raise ValidationError(f"batch norm record is missing {e}") from e


def chiral_batchnorm_forward(state: ChiralBatchNormState, x, training: bool) -> Tensor:
    """
    Normalize along the last axis; every leading axis (batch, time) counts as a sample.

    Training mode normalizes with the augmented-batch statistics and folds them into the running
    estimates; eval mode uses the running estimates.
    """
    x = as_tensor(x)
    _check_width(x, state.layout, "chiral batch norm")
    if training:
        samples = int(np.prod(x.shape[:-1], dtype=np.int64))
        if samples == 0:
            raise ValidationError("batch norm needs a non-empty batch in training mode")
        flat = x.reshape(samples, state.layout.size)
        batch_mean = flat.mean(axis=0)
        mean = 0.5 * (batch_mean + apply_transform(make_transform(state.layout), batch_mean))
        centered_sq = ((flat - mean).square()).mean(axis=0)
        var = 0.5 * (centered_sq + apply_transform(swap_transform(state.layout), centered_sq))

        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean.data
        state.running_var = (1.0 - m) * state.running_var + m * var.data
    else:
        mean = Tensor(state.running_mean)
        var = Tensor(state.running_var)
    normalized = (x - mean) / (var + state.eps).sqrt()
    return normalized * state.gamma() + state.beta()


# ----------------------------------------------------------------------
# Dropout
# ----------------------------------------------------------------------
@dataclass(eq=False)
class DropoutSpec(ChiralLayer):
    """Inverted dropout with independent masks per coordinate (mirror pairs are not dropped jointly)."""

    p: float
    layout: JointLayout
    mode: str = "eval"

    kind = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValidationError(f"dropout probability must lie in [0, 1), got {self.p}")
        if self.mode not in ("train", "eval"):
            raise ValidationError(f"dropout mode must be 'train' or 'eval', got '{self.mode}'")

    @property
    def in_layout(self) -> JointLayout:
        return self.layout

    @property
    def out_layout(self) -> JointLayout:
        return self.layout

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        mode = "train" if training else "eval"
        return dropout_forward(DropoutSpec(self.p, self.layout, mode), x, rng)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "p": self.p, "layout": self.layout.to_dict()}

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "DropoutSpec":
        return cls(float(record.get("p", 0.0)), JointLayout.from_dict(record["layout"]))


def dropout_mask(shape: Tuple[int, ...], p: float, rng: RngLike) -> np.ndarray:
    """Keep-mask scaled by 1/(1-p)."""
    keep = _rng(rng).random(shape) >= p
    return keep / (1.0 - p)


def dropout_forward(spec: DropoutSpec, x, rng_seed: RngLike = None) -> Tensor:
    x = as_tensor(x)
    if spec.mode == "eval" or spec.p == 0.0:
        return x
    return x * dropout_mask(x.shape, spec.p, rng_seed)


# ----------------------------------------------------------------------
# Odd activations
# ----------------------------------------------------------------------
ODD_ACTIVATIONS = {
    "tanh": ad.tanh,
    "hardtanh": ad.hardtanh,
    "softsign": ad.softsign,
}


def odd_activation(kind: str, x) -> Tensor:
    if kind not in ODD_ACTIVATIONS:
        raise ValidationError(
            f"activation '{kind}' is not an odd function and would break chirality equivariance; "
            f"use one of {sorted(ODD_ACTIVATIONS)}"
        )
    return ODD_ACTIVATIONS[kind](as_tensor(x))


@dataclass(eq=False)
class OddActivation(ChiralLayer):
    activation: str
    layout: JointLayout

    kind = "activation"

    def __post_init__(self):
        if self.activation not in ODD_ACTIVATIONS:
            raise ValidationError(
                f"activation '{self.activation}' is not odd; chiral layers accept {sorted(ODD_ACTIVATIONS)}"
            )

    @property
    def in_layout(self) -> JointLayout:
        return self.layout

    @property
    def out_layout(self) -> JointLayout:
        return self.layout

    def forward(self, x, training: bool = False, rng: RngLike = None) -> Tensor:
        return odd_activation(self.activation, x)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "activation": self.activation, "layout": self.layout.to_dict()}

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "OddActivation":
        return cls(record.get("activation", "tanh"), JointLayout.from_dict(record["layout"]))


# ----------------------------------------------------------------------
# Invariance head
# ----------------------------------------------------------------------
def check_invariant_layout(layout: JointLayout) -> None:
    if layout.left or layout.right or layout.negated_dims:
        raise ValidationError(
            "an invariance head needs an output layout without left/right joints and without negated dims, "
            f"got {layout}"
        )


def invariant_layout(units: int, dims: int = 1, prefix: str = "inv") -> JointLayout:
    """Output layout of an invariance head: ``units`` center joints, nothing negated."""
    if units < 1:
        raise ValidationError(f"units must be positive, got {units}")
    return JointLayout((), (), tuple(f"{prefix}{i}" for i in range(units)), dims, ())


@dataclass(eq=False)
class InvarianceHead(ChiralLinearSpec):
    """Chiral linear map whose output is unchanged when the input is mirrored."""

    kind = "invariance_head"

    def __post_init__(self):
        check_invariant_layout(self.out_layout_)
        super().__post_init__()

    @classmethod
    def create(cls, in_layout: JointLayout, units: int, rng: RngLike = None, dims: int = 1) -> "InvarianceHead":
        return cls.init(in_layout, invariant_layout(units, dims), rng=rng)


def invariance_head_forward(spec: ChiralLinearSpec, x) -> Tensor:
    check_invariant_layout(spec.out_layout)
    return chiral_linear_forward(spec, x)

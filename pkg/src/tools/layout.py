"""
Joint layouts and the chirality transform.

A layout splits the joints of one tensor side into ordered left, right and center tuples
(left[k] mirrors right[k]) and the per-joint coordinates into a negated set D_n and a kept
set D_p. The chirality transform swaps every mirror pair and negates the D_n coordinates.
It is stored as a signed permutation (destination index + sign per coordinate), so applying
it is a gather and a sign flip with no arithmetic rounding.
"""

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from src.config.settings import HIDDEN_NEGATED_RATIO, LAYOUT_CONVENTION
from src.tools.autodiff import Tensor
from src.utils.exceptions import ValidationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

SIDES = ("l", "r", "c")
PARTS = ("n", "p")

# Standard Human3.6M 17-joint naming split into mirror pairs and center joints
H36M17_LEFT = ("LHip", "LKnee", "LFoot", "LShoulder", "LElbow", "LWrist")
H36M17_RIGHT = ("RHip", "RKnee", "RFoot", "RShoulder", "RElbow", "RWrist")
H36M17_CENTER = ("Hip", "Spine", "Thorax", "Neck", "Head")


@dataclass(frozen=True)
class JointLayout:
    """Left/right/center joint tuples plus the negated coordinate set of one tensor side."""

    left: Tuple[str, ...]
    right: Tuple[str, ...]
    center: Tuple[str, ...]
    dims: int
    negated_dims: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "left", tuple(str(j) for j in self.left))
        object.__setattr__(self, "right", tuple(str(j) for j in self.right))
        object.__setattr__(self, "center", tuple(str(j) for j in self.center))

        if isinstance(self.dims, bool) or not isinstance(self.dims, (int, np.integer)) or self.dims < 1:
            raise ValidationError(f"dims must be a positive integer, got {self.dims!r}")
        object.__setattr__(self, "dims", int(self.dims))

        if len(self.left) != len(self.right):
            raise ValidationError(
                f"left and right joint tuples must pair up: {len(self.left)} left vs {len(self.right)} right"
            )

        counts = Counter(self.left + self.right + self.center)
        duplicates = sorted(j for j, n in counts.items() if n > 1)
        if duplicates:
            raise ValidationError(f"joint identifiers must be unique across left/right/center: {duplicates}")

        negated = sorted(set(int(d) for d in self.negated_dims))
        out_of_range = [d for d in negated if d < 0 or d >= self.dims]
        if out_of_range:
            raise ValidationError(f"negated dims {out_of_range} outside 0..{self.dims - 1}")
        object.__setattr__(self, "negated_dims", tuple(negated))

    # ------------------------------------------------------------------
    # Sizes
    # ------------------------------------------------------------------
    @property
    def pairs(self) -> int:
        return len(self.left)

    @property
    def joints(self) -> Tuple[str, ...]:
        return self.left + self.right + self.center

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    @property
    def size(self) -> int:
        return self.joint_count * self.dims

    @property
    def n_negated(self) -> int:
        return len(self.negated_dims)

    @property
    def n_positive(self) -> int:
        return self.dims - self.n_negated

    @property
    def dim_order(self) -> Tuple[int, ...]:
        """Raw coordinate index stored at each slot of a joint: D_n first, then D_p."""
        kept = tuple(d for d in range(self.dims) if d not in self.negated_dims)
        return self.negated_dims + kept

    # ------------------------------------------------------------------
    # Index groups
    # ------------------------------------------------------------------
    def _joint_range(self, side: str) -> range:
        starts = {"l": 0, "r": self.pairs, "c": 2 * self.pairs}
        counts = {"l": self.pairs, "r": self.pairs, "c": len(self.center)}
        if side not in starts:
            raise ValidationError(f"Unknown side '{side}', expected one of {SIDES}")
        return range(starts[side], starts[side] + counts[side])

    def indices(self, side: str, part: str = None) -> np.ndarray:
        """Flattened indices of one side ('l', 'r', 'c'), optionally restricted to part 'n' or 'p'."""
        if part is None:
            slots = range(self.dims)
        elif part == "n":
            slots = range(self.n_negated)
        elif part == "p":
            slots = range(self.n_negated, self.dims)
        else:
            raise ValidationError(f"Unknown part '{part}', expected one of {PARTS}")
        return np.array([j * self.dims + s for j in self._joint_range(side) for s in slots], dtype=np.int64)

    @cached_property
    def groups(self) -> Dict[str, np.ndarray]:
        """Index arrays keyed 'ln', 'lp', 'rn', 'rp', 'cn', 'cp' (mirror-aligned between l and r)."""
        return {side + part: self.indices(side, part) for side in SIDES for part in PARTS}

    @cached_property
    def mirror_index(self) -> np.ndarray:
        """mirror_index[i] is the flattened index of the coordinate mirrored with i."""
        mirror = np.arange(self.size, dtype=np.int64)
        left, right = self.indices("l"), self.indices("r")
        mirror[left] = right
        mirror[right] = left
        return mirror

    @cached_property
    def sign_vector(self) -> np.ndarray:
        sign = np.ones(self.size, dtype=np.float64)
        for side in SIDES:
            sign[self.indices(side, "n")] = -1.0
        return sign

    # ------------------------------------------------------------------
    # Derived layouts
    # ------------------------------------------------------------------
    def without_negation(self) -> "JointLayout":
        """Same joints and slots with D_n empty: the transform reduces to the left/right swap."""
        return JointLayout(self.left, self.right, self.center, self.dims, ())

    def unstructured(self) -> "JointLayout":
        """All joints treated as center with nothing negated: the transform is the identity."""
        return JointLayout((), (), self.joints, self.dims, ())

    def is_compatible(self, other: "JointLayout") -> bool:
        return (
            self.left == other.left
            and self.right == other.right
            and self.center == other.center
            and self.dims == other.dims
            and self.negated_dims == other.negated_dims
        )

    # ------------------------------------------------------------------
    # Raw <-> canonical coordinate order
    # ------------------------------------------------------------------
    def canonicalize(self, x: np.ndarray) -> np.ndarray:
        """Reorder per-joint coordinates from raw order (0..dims-1) into negated-first slots."""
        x = np.asarray(x, dtype=np.float64)
        self._check_width(x.shape[-1])
        shaped = x.reshape(x.shape[:-1] + (self.joint_count, self.dims))
        return shaped[..., list(self.dim_order)].reshape(x.shape)

    def decanonicalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_width(x.shape[-1])
        shaped = x.reshape(x.shape[:-1] + (self.joint_count, self.dims))
        restore = np.argsort(np.array(self.dim_order))
        return shaped[..., restore].reshape(x.shape)

    def _check_width(self, width: int) -> None:
        if width != self.size:
            raise ValidationError(f"feature axis has length {width}, layout expects {self.size}")

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return {
            "left": list(self.left),
            "right": list(self.right),
            "center": list(self.center),
            "dims": self.dims,
            "negated_dims": list(self.negated_dims),
            "convention": LAYOUT_CONVENTION,
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "JointLayout":
        if not isinstance(record, dict):
            raise ValidationError(f"layout must be a JSON object, got {type(record).__name__}")
        if "synthetic" in record:
            params = record["synthetic"]
            return synthetic_layout(
                pairs=params.get("pairs", 0),
                center=params.get("center", 0),
                dims=params.get("dims", 1),
                negated=params.get("negated", 0),
                prefix=params.get("prefix", "h"),
            )
        missing = [k for k in ("left", "right", "center", "dims") if k not in record]
        if missing:
            raise ValidationError(f"layout is missing fields {missing}")
        convention = record.get("convention", LAYOUT_CONVENTION)
        if convention != LAYOUT_CONVENTION:
            raise ValidationError(f"unsupported layout convention '{convention}'")
        return build_layout(
            record["left"], record["right"], record["center"], record["dims"], record.get("negated_dims", [])
        )

    def __repr__(self) -> str:
        return (
            f"JointLayout(pairs={self.pairs}, center={len(self.center)}, dims={self.dims}, "
            f"negated={list(self.negated_dims)})"
        )


def build_layout(
    left: Sequence[str],
    right: Sequence[str],
    center: Sequence[str],
    dims: int,
    negated_dims: Iterable[int] = (),
) -> JointLayout:
    """Validate and build a layout."""
    layout = JointLayout(tuple(left), tuple(right), tuple(center), dims, tuple(negated_dims))
    if layout.pairs == 0 and layout.n_negated == 0:
        logger.debug(f"{layout} has no mirror pairs and no negated dims: transform is the identity")
    return layout


def h36m17_layout(dims: int = 2, negated_dims: Iterable[int] = (0,)) -> JointLayout:
    """17-joint Human3.6M skeleton, 6 mirror pairs and 5 center joints."""
    return build_layout(H36M17_LEFT, H36M17_RIGHT, H36M17_CENTER, dims, negated_dims)


def synthetic_layout(pairs: int, center: int, dims: int, negated: int = 0, prefix: str = "h") -> JointLayout:
    """Layout for hidden units: ``pairs`` mirrored joints, ``center`` center joints, first ``negated`` dims flip."""
    if pairs < 0 or center < 0:
        raise ValidationError(f"joint counts must be non-negative, got pairs={pairs}, center={center}")
    if not 0 <= negated <= dims:
        raise ValidationError(f"negated count {negated} outside 0..{dims}")
    return build_layout(
        [f"{prefix}l{i}" for i in range(pairs)],
        [f"{prefix}r{i}" for i in range(pairs)],
        [f"{prefix}c{i}" for i in range(center)],
        dims,
        range(negated),
    )


def hidden_layout(
    base: JointLayout,
    dims: int,
    negated_ratio: Union[Fraction, float] = HIDDEN_NEGATED_RATIO,
    prefix: str = "h_",
) -> JointLayout:
    """Hidden layout with the joint structure of ``base``, ``dims`` units per joint and a share of them negated."""
    left, right, center = ([prefix + j for j in joints] for joints in (base.left, base.right, base.center))
    return build_layout(left, right, center, dims, range(negated_count(dims, negated_ratio)))


def negated_count(dims: int, ratio: Union[Fraction, float]) -> int:
    """Number of negated dims for a ratio, rounded half up."""
    value = Fraction(ratio).limit_denominator(10**6) * dims
    return int(value + Fraction(1, 2))


def negation_schedule(start: Union[Fraction, float] = Fraction(1, 3), steps: int = 3) -> List[Fraction]:
    """Output negated ratios of ``steps`` layers, halving from ``start`` and ending at zero."""
    if steps < 1:
        raise ValidationError(f"steps must be at least 1, got {steps}")
    start = Fraction(start).limit_denominator(10**6)
    return [start / 2 ** (k + 1) for k in range(steps - 1)] + [Fraction(0)]


@dataclass(frozen=True, eq=False)
class ChiralityTransform:
    """Signed permutation: coordinate i moves to perm[i], then the destination is multiplied by sign."""

    perm: np.ndarray
    sign: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        sign = np.asarray(self.sign, dtype=np.float64)
        if perm.ndim != 1 or sign.shape != perm.shape:
            raise ValidationError(f"perm and sign must be vectors of equal length, got {perm.shape} and {sign.shape}")
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValidationError("perm is not a bijection")
        if not np.all(np.abs(sign) == 1.0):
            raise ValidationError("sign entries must be +1 or -1")
        perm.setflags(write=False)
        sign.setflags(write=False)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "sign", sign)

    @property
    def size(self) -> int:
        return int(self.perm.size)

    @cached_property
    def source(self) -> np.ndarray:
        """source[i] is the input coordinate that lands on output coordinate i."""
        return np.argsort(self.perm)

    def inverse(self) -> "ChiralityTransform":
        # sign is applied after the move, so the inverse moves back and applies the sign the source saw
        return ChiralityTransform(self.source, self.sign[self.perm])

    def is_involution(self) -> bool:
        returns_home = np.array_equal(self.perm[self.perm], np.arange(self.size))
        return bool(returns_home and np.array_equal(self.sign[self.perm], self.sign))

    def __call__(self, x):
        return apply_transform(self, x)


def make_transform(layout: JointLayout) -> ChiralityTransform:
    """The chirality transform of a layout: swap mirror pairs, negate D_n."""
    return ChiralityTransform(layout.mirror_index, layout.sign_vector)


def swap_transform(layout: JointLayout) -> ChiralityTransform:
    """The left/right swap of a layout without any negation."""
    return ChiralityTransform(layout.mirror_index, np.ones(layout.size))


def apply_transform(t: ChiralityTransform, x: Union[np.ndarray, Tensor]) -> Union[np.ndarray, Tensor]:
    """Apply ``t`` along the last axis; leading batch/time axes are mapped elementwise."""
    width = x.shape[-1] if x.ndim else 0
    if width != t.size:
        raise ValidationError(f"transform of size {t.size} applied to feature axis of length {width}")
    if isinstance(x, Tensor):
        return x.signed_permute(t.source, t.sign)
    x = np.asarray(x, dtype=np.float64)
    return x[..., t.source] * t.sign


def transform_as_dense(t: ChiralityTransform) -> np.ndarray:
    """Dense N x N signed permutation matrix with dense @ x == apply_transform(t, x)."""
    dense = np.zeros((t.size, t.size))
    dense[t.perm, np.arange(t.size)] = t.sign[t.perm]
    return dense

"""
Synthetic pose-regression tasks.

Targets come from a frozen random chiral network (a single chiral linear map, or chiral linear ->
tanh -> chiral linear), so every (x, y) pair is chirally consistent: mirroring the input mirrors the
target. Sequence tasks feed random-walk input sequences and regress the pose of the last frame.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from src.config.settings import TASK_DEFAULTS
from src.tools.layers import ChiralLinearSpec, chiral_linear_forward
from src.tools.layout import JointLayout, build_layout, hidden_layout
from src.utils.exceptions import ValidationError
from src.utils.logger import setup_logger
from src.utils.utils import check_schema, decode_array, encode_array, load_json, save_json, with_schema

logger = setup_logger(__name__)

TASK_KINDS = ("linear", "mlp")


def output_layout_for(in_layout: JointLayout, out_dims: int = TASK_DEFAULTS["out_dims"]) -> JointLayout:
    """Same joints as the input with ``out_dims`` coordinates; the negated dims carry over."""
    negated = [d for d in in_layout.negated_dims if d < out_dims]
    return build_layout(in_layout.left, in_layout.right, in_layout.center, out_dims, negated)


@dataclass
class TaskSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    def limit(self, fraction: float) -> "TaskSplit":
        """Keep the first ``fraction`` of the training samples (at least one); validation is untouched."""
        if not 0.0 < fraction <= 1.0:
            raise ValidationError(f"training fraction must lie in (0, 1], got {fraction}")
        keep = max(1, int(round(fraction * len(self.x_train))))
        return TaskSplit(self.x_train[:keep], self.y_train[:keep], self.x_val, self.y_val)


@dataclass
class SyntheticPoseTask:
    in_layout: JointLayout
    out_layout: JointLayout
    seed: int = 0
    samples: int = TASK_DEFAULTS["samples"]
    noise: float = TASK_DEFAULTS["noise"]
    kind: str = TASK_DEFAULTS["kind"]
    frames: int = TASK_DEFAULTS["frames"]
    walk_step: float = TASK_DEFAULTS["walk_step"]
    val_fraction: float = TASK_DEFAULTS["val_fraction"]
    hidden_multiplier: int = TASK_DEFAULTS["hidden_multiplier"]
    x: Optional[np.ndarray] = field(default=None, repr=False)
    y: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValidationError(f"task kind must be one of {TASK_KINDS}, got '{self.kind}'")
        if self.samples < 1:
            raise ValidationError(f"samples must be positive, got {self.samples}")
        if self.noise < 0:
            raise ValidationError(f"noise must be non-negative, got {self.noise}")
        if self.frames < 1:
            raise ValidationError(f"frames must be positive, got {self.frames}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @property
    def is_sequence(self) -> bool:
        return self.frames > 1

    def ground_truth(self, rng: np.random.Generator):
        """Frozen chiral map from input poses to output poses."""
        if self.kind == "linear":
            spec = ChiralLinearSpec.init(self.in_layout, self.out_layout, rng=rng)
            return lambda x: chiral_linear_forward(spec, x).data

        hidden = hidden_layout(self.in_layout, self.in_layout.dims * self.hidden_multiplier)
        first = ChiralLinearSpec.init(self.in_layout, hidden, rng=rng)
        second = ChiralLinearSpec.init(hidden, self.out_layout, rng=rng)
        return lambda x: chiral_linear_forward(second, chiral_linear_forward(first, x).tanh()).data

    def generate(self) -> "SyntheticPoseTask":
        """Draw inputs and targets from the seed; returns self for chaining."""
        rng = np.random.default_rng(self.seed)
        truth = self.ground_truth(rng)
        if self.is_sequence:
            start = rng.standard_normal((self.samples, 1, self.in_layout.size))
            steps = self.walk_step * rng.standard_normal((self.samples, self.frames - 1, self.in_layout.size))
            self.x = np.concatenate([start, start + np.cumsum(steps, axis=1)], axis=1)
            last = self.x[:, -1, :]
        else:
            self.x = rng.standard_normal((self.samples, self.in_layout.size))
            last = self.x
        self.y = truth(last)
        if self.noise:
            self.y = self.y + self.noise * rng.standard_normal(self.y.shape)
        logger.info(
            f"Generated {self.kind} task: {self.samples} samples, {self.frames} frame(s), "
            f"{self.in_layout.size} -> {self.out_layout.size} features, noise {self.noise}"
        )
        return self

    def _require_data(self) -> None:
        if self.x is None or self.y is None:
            raise ValidationError("task has no data; call generate() first")

    def split(self) -> TaskSplit:
        """Leading samples train, trailing ``val_fraction`` validate (data is already in random order)."""
        self._require_data()
        n_val = int(round(self.val_fraction * self.samples))
        n_train = self.samples - n_val
        if n_train < 1:
            raise ValidationError("validation split leaves no training samples")
        if n_val == 0:
            logger.warning("validation split is empty")
        return TaskSplit(self.x[:n_train], self.y[:n_train], self.x[n_train:], self.y[n_train:])

    def to_dict(self) -> Dict[str, Any]:
        self._require_data()
        return with_schema(
            {
                "kind": self.kind,
                "seed": self.seed,
                "samples": self.samples,
                "noise": self.noise,
                "frames": self.frames,
                "walk_step": self.walk_step,
                "val_fraction": self.val_fraction,
                "hidden_multiplier": self.hidden_multiplier,
                "in_layout": self.in_layout.to_dict(),
                "out_layout": self.out_layout.to_dict(),
                "x": encode_array(self.x),
                "y": encode_array(self.y),
            }
        )

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "SyntheticPoseTask":
        check_schema(record, "task")
        try:
            task = cls(
                in_layout=JointLayout.from_dict(record["in_layout"]),
                out_layout=JointLayout.from_dict(record["out_layout"]),
                seed=int(record.get("seed", 0)),
                samples=int(record["samples"]),
                noise=float(record.get("noise", 0.0)),
                kind=record.get("kind", TASK_DEFAULTS["kind"]),
                frames=int(record.get("frames", 1)),
                walk_step=float(record.get("walk_step", TASK_DEFAULTS["walk_step"])),
                val_fraction=float(record.get("val_fraction", TASK_DEFAULTS["val_fraction"])),
                hidden_multiplier=int(record.get("hidden_multiplier", TASK_DEFAULTS["hidden_multiplier"])),
            )
        except KeyError as e:
            raise ValidationError(f"task record is missing {e}") from e
        if "x" in record and "y" in record:
            task.x, task.y = decode_array(record["x"]), decode_array(record["y"])
            if len(task.x) != task.samples or len(task.y) != task.samples:
                raise ValidationError(f"task data holds {len(task.x)} samples, header says {task.samples}")
        else:
            task.generate()
        return task

    def save(self, path: Union[str, Path]) -> Path:
        return save_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SyntheticPoseTask":
        return cls.from_dict(load_json(path))


def make_task(
    in_layout: JointLayout,
    samples: int = TASK_DEFAULTS["samples"],
    noise: float = TASK_DEFAULTS["noise"],
    seed: int = 0,
    kind: str = TASK_DEFAULTS["kind"],
    frames: int = TASK_DEFAULTS["frames"],
    out_dims: int = TASK_DEFAULTS["out_dims"],
    **kwargs,
) -> SyntheticPoseTask:
    """Build and generate a task lifting ``in_layout`` poses to ``out_dims``-D poses."""
    task = SyntheticPoseTask(
        in_layout=in_layout,
        out_layout=output_layout_for(in_layout, out_dims),
        seed=seed,
        samples=samples,
        noise=noise,
        kind=kind,
        frames=frames,
        **kwargs,
    )
    return task.generate()

"""Project-wide constants: file schema, tolerances and training/task defaults."""

from fractions import Fraction

# Header carried by every config, model, task and report file
SCHEMA_VERSION = "chirality-kit/v1"

# Flattened index convention of every layout: joints ordered left, right, center;
# inside a joint the negated coordinates come first, then the kept ones.
LAYOUT_CONVENTION = "joint-major/negated-first"

EXIT_CODES = {
    "ok": 0,
    "unexpected": 1,
    "validation": 2,
    "property_violation": 3,
    "divergence": 4,
}

TOLERANCES = {
    "equivariance": 1e-10,
    "end_to_end": 1e-9,
    "weight_identity": 1e-14,
    "gradcheck": 1e-5,
    "symmetric_matvec": 1e-9,
    "fixed_point": 1e-12,
}

# Fraction of hidden coordinates per joint that flip sign under the transform
HIDDEN_NEGATED_RATIO = Fraction(1, 3)

TRAINING_DEFAULTS = {
    "optimizer": "adam",
    "lr": 1e-3,
    "betas": (0.9, 0.9999),
    "momentum": 0.9,
    "batch_size": 64,
    "epochs": 100,
    "lr_decay": 1.0,
    "clip_norm": None,
    "loss": "mpjpe",
    "augment_prob": 0.5,
    "bn_momentum": 0.1,
    "bn_momentum_decay": 0.99,
    "bn_eps": 1e-5,
    "log_every": 10,
    "seed": 0,
}

TASK_DEFAULTS = {
    "kind": "mlp",
    "samples": 1000,
    "noise": 0.0,
    "val_fraction": 0.2,
    "out_dims": 3,
    "hidden_multiplier": 2,
    "frames": 1,
    "walk_step": 0.1,
}

EVAL_DEFAULTS = {
    "pck_threshold": 0.05,
}

"""
Training and evaluation harness.

Chiral models are trained with mirror augmentation: each sample is mirrored (input and target
together) with the configured probability, so batch-norm statistics see both chiralities.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.config.settings import EVAL_DEFAULTS
from src.tools import autodiff as ad
from src.tools.autodiff import Tensor, as_tensor
from src.tools.layout import ChiralityTransform, JointLayout, apply_transform, make_transform
from src.tools.model import ChiralNet, ModelConfig, build_baseline_config, build_model
from src.tools.tasks import SyntheticPoseTask
from src.utils.exceptions import DivergenceError, ValidationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


# ----------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------
def augment(
    x: np.ndarray,
    y: np.ndarray,
    t_in: ChiralityTransform,
    t_out: ChiralityTransform,
    prob: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Mirror each sample (input and target together) with probability ``prob``."""
    if not 0.0 <= prob <= 1.0:
        raise ValidationError(f"augmentation probability must lie in [0, 1], got {prob}")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValidationError(f"{len(x)} inputs but {len(y)} targets")
    flip = rng.random(len(x)) < prob
    x_mask = flip.reshape((-1,) + (1,) * (x.ndim - 1))
    y_mask = flip.reshape((-1,) + (1,) * (y.ndim - 1))
    return np.where(x_mask, apply_transform(t_in, x), x), np.where(y_mask, apply_transform(t_out, y), y)


# ----------------------------------------------------------------------
# Losses and metrics
# ----------------------------------------------------------------------
def _per_joint(pred: Tensor, target: Tensor, dims: Optional[int]) -> Tuple[Tensor, Tensor]:
    if pred.shape != target.shape:
        raise ValidationError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    if dims is not None:
        if pred.shape[-1] % dims:
            raise ValidationError(f"feature axis {pred.shape[-1]} is not a multiple of {dims} dims per joint")
        shape = pred.shape[:-1] + (pred.shape[-1] // dims, dims)
        pred, target = pred.reshape(shape), target.reshape(shape)
    if pred.ndim < 2 or pred.size == 0:
        raise ValidationError(f"expected (batch, joints, dims) data, got shape {pred.shape}")
    return pred, target


def mpjpe_loss(pred, target, dims: Optional[int] = None) -> Tensor:
    """Mean over batch and joints of the per-joint Euclidean distance.

    ``pred`` and ``target`` are (batch, joints, dims), or flat (batch, joints*dims) with ``dims`` given.
    """
    pred, target = _per_joint(as_tensor(pred), as_tensor(target), dims)
    return ad.norm(pred - target, axis=-1).mean()


def mse_loss(pred, target, dims: Optional[int] = None) -> Tensor:
    """Mean over batch and joints of the squared per-joint distance."""
    pred, target = _per_joint(as_tensor(pred), as_tensor(target), dims)
    return (pred - target).square().sum(axis=-1).mean()


LOSS_FUNCTIONS = {"mpjpe": mpjpe_loss, "mse": mse_loss}


def _joints(a: np.ndarray, dims: int) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(len(a), -1, dims)


def mpjpe(pred: np.ndarray, target: np.ndarray, dims: int) -> float:
    return float(np.mean(np.linalg.norm(_joints(pred, dims) - _joints(target, dims), axis=-1)))


def p_mpjpe(pred: np.ndarray, target: np.ndarray, dims: int) -> float:
    """MPJPE after aligning each prediction to its target with the best similarity transform."""
    pred, target = _joints(pred, dims), _joints(target, dims)
    mu_pred = pred.mean(axis=1, keepdims=True)
    mu_target = target.mean(axis=1, keepdims=True)
    p0, t0 = pred - mu_pred, target - mu_target
    norm_p = np.linalg.norm(p0, axis=(1, 2), keepdims=True)
    norm_t = np.linalg.norm(t0, axis=(1, 2), keepdims=True)
    norm_p = np.where(norm_p > 0, norm_p, 1.0)
    norm_t = np.where(norm_t > 0, norm_t, 1.0)
    p0, t0 = p0 / norm_p, t0 / norm_t

    H = np.matmul(np.transpose(p0, (0, 2, 1)), t0)
    U, s, Vt = np.linalg.svd(H)
    V = np.transpose(Vt, (0, 2, 1))
    R = np.matmul(V, np.transpose(U, (0, 2, 1)))

    # no reflections
    det = np.sign(np.expand_dims(np.linalg.det(R), axis=1))
    V[:, :, -1] *= det
    s[:, -1] *= det.flatten()
    R = np.matmul(V, np.transpose(U, (0, 2, 1)))

    scale = np.expand_dims(np.sum(s, axis=1, keepdims=True), axis=2) * norm_t / norm_p
    translation = mu_target - scale * np.matmul(mu_pred, R.transpose(0, 2, 1))
    aligned = scale * np.matmul(pred, R.transpose(0, 2, 1)) + translation
    return float(np.mean(np.linalg.norm(aligned - target, axis=-1)))


def pck(pred: np.ndarray, target: np.ndarray, dims: int, threshold: float = EVAL_DEFAULTS["pck_threshold"]) -> float:
    """Fraction of joints within ``threshold`` times the target's bounding-box diagonal."""
    pred, target = _joints(pred, dims), _joints(target, dims)
    diagonal = np.linalg.norm(target.max(axis=1) - target.min(axis=1), axis=-1)
    errors = np.linalg.norm(pred - target, axis=-1)
    return float(np.mean(errors <= threshold * diagonal[:, None]))


# ----------------------------------------------------------------------
# Optimizers
# ----------------------------------------------------------------------
class Optimizer:
    def __init__(self, params: Dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params: Dict[str, Tensor], lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.velocity[name] = self.momentum * self.velocity[name] + p.grad
            p.data -= self.lr * self.velocity[name]


class Adam(Optimizer):
    def __init__(self, params: Dict[str, Tensor], lr: float, betas: Sequence[float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * p.grad**2
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(settings: Dict[str, Any], params: Dict[str, Tensor]) -> Optimizer:
    if settings["kind"] == "sgd":
        return SGD(params, settings["lr"], settings.get("momentum", 0.0))
    if settings["kind"] == "adam":
        return Adam(params, settings["lr"], settings.get("betas", (0.9, 0.999)))
    raise ValidationError(f"unknown optimizer '{settings['kind']}'")


def clip_gradients(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(np.sum(g**2) for g in grads)))
    if total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------
@dataclass
class TrainResult:
    model: ChiralNet
    history: List[Dict[str, float]] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    reached_target: Optional[bool] = None

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["epoch", "loss", "lr", "bn_momentum"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "history": self.history,
            "metrics": self.metrics,
            "reached_target": self.reached_target,
            "parameters": self.model.free_parameter_count(),
        }


def check_task_fits(model: ChiralNet, task: SyntheticPoseTask) -> None:
    if model.in_layout.size != task.in_layout.size or model.out_layout.size != task.out_layout.size:
        raise ValidationError(
            f"model maps {model.in_layout.size} -> {model.out_layout.size} features, "
            f"task has {task.in_layout.size} -> {task.out_layout.size}"
        )
    if model.is_sequence != task.is_sequence:
        raise ValidationError(
            f"model {'expects' if model.is_sequence else 'does not take'} sequences, task has {task.frames} frame(s)"
        )
    if task.is_sequence and task.frames < model.min_frames():
        raise ValidationError(f"task has {task.frames} frames, model needs at least {model.min_frames()}")


def train(
    config: ModelConfig,
    task: SyntheticPoseTask,
    limit_frac: Optional[float] = None,
    model: Optional[ChiralNet] = None,
) -> TrainResult:
    """
    Fit ``config``'s model to the task's training split.

    Deterministic given the config seed. Raises DivergenceError on a non-finite loss.
    """
    model = model or build_model(config)
    check_task_fits(model, task)
    split = task.split()
    if limit_frac is not None:
        split = split.limit(limit_frac)

    settings = config.optimizer
    rng = np.random.default_rng(config.seed)
    t_in, t_out = make_transform(task.in_layout), make_transform(task.out_layout)
    loss_fn = LOSS_FUNCTIONS[config.loss]
    dims = task.out_layout.dims
    params = model.parameters()
    optimizer = make_optimizer(settings, params)
    n, batch_size = len(split.x_train), settings["batch_size"]

    logger.info(
        f"Training '{config.name}' ({model.free_parameter_count()} parameters) on {n} samples "
        f"for {settings['epochs']} epochs with {settings['kind']}"
    )
    history = []
    try:
        for epoch in range(settings["epochs"]):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                xb, yb = augment(split.x_train[idx], split.y_train[idx], t_in, t_out, config.augment_prob, rng)
                model.zero_grad()
                pred = model.readout(model.forward(xb, training=True, rng=rng))
                loss = loss_fn(pred, yb, dims)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting at {start}")
                loss.backward()
                if settings.get("clip_norm"):
                    clip_gradients(params, settings["clip_norm"])
                optimizer.step()
                total += loss.item() * len(idx)

            bn_layers = model.batchnorm_layers()
            record = {
                "epoch": epoch,
                "loss": total / n,
                "lr": optimizer.lr,
                "bn_momentum": bn_layers[0].momentum if bn_layers else None,
            }
            history.append(record)
            if epoch % config.log_every == 0 or epoch == settings["epochs"] - 1:
                logger.info(f"epoch {epoch}: loss {record['loss']:.6g}", extra={"metrics": record})

            optimizer.lr *= settings["lr_decay"]
            for bn in bn_layers:
                bn.momentum *= config.bn_momentum_decay
    except DivergenceError as e:
        logger.error(f"Training '{config.name}' diverged: {e}")
        raise

    result = TrainResult(model=model, history=history)
    result.metrics["train"] = evaluate(model, split.x_train, split.y_train, task.in_layout, task.out_layout)
    if len(split.x_val):
        result.metrics["val"] = evaluate(model, split.x_val, split.y_val, task.in_layout, task.out_layout)
    if config.target_loss is not None:
        final = history[-1]["loss"] if history else float("nan")
        result.reached_target = bool(final <= config.target_loss)
        if not result.reached_target:
            logger.warning(f"final training loss {final:.6g} is above the target {config.target_loss}")
    return result


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------
EVAL_MODES = ("plain", "flip_averaged")


def flip_averaged_predict(model: ChiralNet, x: np.ndarray, t_in: ChiralityTransform, t_out: ChiralityTransform):
    """Average of F(x) and the mirrored-back prediction on the mirrored input."""
    direct = model.predict(x)
    mirrored = model.predict(apply_transform(t_in, x))
    return 0.5 * (direct + apply_transform(t_out.inverse(), mirrored))


def evaluate(
    model: ChiralNet,
    x: np.ndarray,
    y: np.ndarray,
    in_layout: JointLayout,
    out_layout: JointLayout,
    mode: str = "plain",
    pck_threshold: float = EVAL_DEFAULTS["pck_threshold"],
) -> Dict[str, Any]:
    """
    Pose metrics of ``model`` on (x, y).

    ``plain`` runs one forward pass and counts its multiplications on the symmetric path.
    ``flip_averaged`` averages the prediction on x with the mirrored-back prediction on the mirrored
    input and is charged two naive passes.
    """
    if mode not in EVAL_MODES:
        raise ValidationError(f"evaluation mode must be one of {EVAL_MODES}, got '{mode}'")
    if len(x) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")

    _, symmetric, naive = model.predict_counted(x)
    if mode == "plain":
        pred, mults = model.predict(x), symmetric
    else:
        pred = flip_averaged_predict(model, x, make_transform(in_layout), make_transform(out_layout))
        mults = 2 * naive

    dims = out_layout.dims
    return {
        "mode": mode,
        "samples": int(len(x)),
        "mpjpe": mpjpe(pred, y, dims),
        "p_mpjpe": p_mpjpe(pred, y, dims),
        "pck": pck(pred, y, dims, pck_threshold),
        "mults": int(mults),
        "naive_mults": int(naive),
    }


# ----------------------------------------------------------------------
# Limited-data study
# ----------------------------------------------------------------------
def limited_data_study(
    config: ModelConfig,
    task: SyntheticPoseTask,
    fraction: float = 0.05,
    seeds: Iterable[int] = range(5),
) -> Dict[str, Any]:
    """
    Train the chiral model and its parameter-matched dense baseline on a fraction of the data, per seed.

    Returns per-seed validation MPJPE and the medians of both.
    """
    rows = []
    for seed in seeds:
        chiral_config = replace(config, seed=seed)
        chiral_params = build_model(chiral_config).free_parameter_count()
        baseline_config = build_baseline_config(chiral_config, target_params=chiral_params)

        chiral = train(chiral_config, task, limit_frac=fraction)
        baseline = train(baseline_config, task, limit_frac=fraction)
        rows.append(
            {
                "seed": seed,
                "chiral_val_mpjpe": chiral.metrics["val"]["mpjpe"],
                "baseline_val_mpjpe": baseline.metrics["val"]["mpjpe"],
                "chiral_parameters": chiral.model.free_parameter_count(),
                "baseline_parameters": baseline.model.free_parameter_count(),
            }
        )
        logger.info(
            f"seed {seed}: chiral {rows[-1]['chiral_val_mpjpe']:.5f}, baseline {rows[-1]['baseline_val_mpjpe']:.5f}"
        )

    frame = pd.DataFrame(rows)
    return {
        "fraction": fraction,
        "per_seed": rows,
        "chiral_median": float(frame["chiral_val_mpjpe"].median()),
        "baseline_median": float(frame["baseline_val_mpjpe"].median()),
    }


def plot_history(history: List[Dict[str, float]], path: Union[str, Path], title: str = "Training loss") -> Path:
    """Save the loss curve (log scale) as an image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(history)
    fig, ax = plt.subplots(figsize=(8, 5))
    if not frame.empty:
        ax.plot(frame["epoch"], frame["loss"], color="tab:blue")
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Saved training curve to {path}")
    return path

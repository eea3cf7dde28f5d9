"""
Model configuration and the layer stack built from it.

A config names its layouts once and refers to them from the layer descriptors. Layers whose layout is
implied (activation, batch norm, dropout) take the output layout of the layer before them.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.config.settings import HIDDEN_NEGATED_RATIO, TRAINING_DEFAULTS
from src.tools.autodiff import Tensor, as_tensor
from src.tools.layers import (
    ChiralBatchNormState,
    ChiralConv1DSpec,
    ChiralLayer,
    ChiralLinearSpec,
    DenseLinear,
    DropoutSpec,
    InvarianceHead,
    OddActivation,
    invariant_layout,
)
from src.tools.layout import JointLayout, h36m17_layout, hidden_layout
from src.tools.recurrent import ChiralGRUSpec, ChiralLSTMSpec
from src.utils.exceptions import ValidationError
from src.utils.logger import setup_logger
from src.utils.utils import check_schema, load_json, save_json, with_schema

logger = setup_logger(__name__)

OPTIMIZER_KINDS = ("adam", "sgd")
LOSSES = ("mpjpe", "mse")
SEQUENCE_KINDS = ("chiral_conv1d", "chiral_lstm", "chiral_gru")

OPTIMIZER_DEFAULTS = {
    "kind": TRAINING_DEFAULTS["optimizer"],
    "lr": TRAINING_DEFAULTS["lr"],
    "betas": list(TRAINING_DEFAULTS["betas"]),
    "momentum": TRAINING_DEFAULTS["momentum"],
    "batch_size": TRAINING_DEFAULTS["batch_size"],
    "epochs": TRAINING_DEFAULTS["epochs"],
    "lr_decay": TRAINING_DEFAULTS["lr_decay"],
    "clip_norm": TRAINING_DEFAULTS["clip_norm"],
}


def resolve_layouts(raw: Dict[str, Any]) -> Dict[str, JointLayout]:
    """
    Turn the ``layouts`` section of a config into layouts.

    Entries are explicit layouts, ``{"synthetic": {...}}``, ``{"h36m17": {"dims", "negated_dims"}}`` or
    ``{"hidden": {"base": <name>, "dims": k, "negated_ratio": "1/3"}}`` referring to another entry.
    """
    resolved: Dict[str, JointLayout] = {}
    pending = dict(raw or {})
    while pending:
        progressed = False
        for name, record in list(pending.items()):
            if isinstance(record, JointLayout):
                resolved[name] = record
            elif isinstance(record, dict) and "hidden" in record:
                params = record["hidden"]
                base = params.get("base")
                if base not in resolved:
                    if base not in pending:
                        raise ValidationError(f"layout '{name}' refers to unknown layout '{base}'")
                    continue
                ratio = Fraction(str(params.get("negated_ratio", HIDDEN_NEGATED_RATIO)))
                resolved[name] = hidden_layout(resolved[base], int(params.get("dims", 1)), ratio)
            elif isinstance(record, dict) and "h36m17" in record:
                params = record["h36m17"]
                resolved[name] = h36m17_layout(int(params.get("dims", 2)), params.get("negated_dims", [0]))
            else:
                resolved[name] = JointLayout.from_dict(record)
            del pending[name]
            progressed = True
        if not progressed:
            raise ValidationError(f"circular layout references among {sorted(pending)}")
    return resolved


@dataclass
class ModelConfig:
    """Layouts, layer descriptors and training settings of one model."""

    layouts: Dict[str, JointLayout]
    layers: List[Dict[str, Any]]
    optimizer: Dict[str, Any] = field(default_factory=dict)
    loss: str = TRAINING_DEFAULTS["loss"]
    augment_prob: float = TRAINING_DEFAULTS["augment_prob"]
    bn_momentum_decay: float = TRAINING_DEFAULTS["bn_momentum_decay"]
    target_loss: Optional[float] = None
    log_every: int = TRAINING_DEFAULTS["log_every"]
    seed: int = TRAINING_DEFAULTS["seed"]
    name: str = "model"

    def __post_init__(self):
        self.optimizer = {**OPTIMIZER_DEFAULTS, **(self.optimizer or {})}
        if self.optimizer["kind"] not in OPTIMIZER_KINDS:
            raise ValidationError(f"optimizer kind must be one of {OPTIMIZER_KINDS}, got '{self.optimizer['kind']}'")
        if self.optimizer["lr"] <= 0 or self.optimizer["batch_size"] < 1 or self.optimizer["epochs"] < 0:
            raise ValidationError(f"invalid optimizer settings {self.optimizer}")
        self.optimizer["betas"] = [float(b) for b in self.optimizer["betas"]]
        if self.loss not in LOSSES:
            raise ValidationError(f"loss must be one of {LOSSES}, got '{self.loss}'")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValidationError(f"augment_prob must lie in [0, 1], got {self.augment_prob}")
        if not 0.0 < self.bn_momentum_decay <= 1.0:
            raise ValidationError(f"bn_momentum_decay must lie in (0, 1], got {self.bn_momentum_decay}")
        if not self.layers:
            raise ValidationError("a model needs at least one layer")
        for i, desc in enumerate(self.layers):
            if not isinstance(desc, dict) or desc.get("kind") not in LAYER_BUILDERS:
                kind = desc.get("kind") if isinstance(desc, dict) else desc
                raise ValidationError(f"layer {i}: unknown kind {kind!r}")

    def layout(self, name: str) -> JointLayout:
        if name not in self.layouts:
            raise ValidationError(f"unknown layout '{name}', config declares {sorted(self.layouts)}")
        return self.layouts[name]

    def to_dict(self) -> Dict[str, Any]:
        return with_schema(
            {
                "name": self.name,
                "layouts": {name: layout.to_dict() for name, layout in self.layouts.items()},
                "layers": self.layers,
                "optimizer": self.optimizer,
                "loss": self.loss,
                "augment_prob": self.augment_prob,
                "bn_momentum_decay": self.bn_momentum_decay,
                "target_loss": self.target_loss,
                "log_every": self.log_every,
                "seed": self.seed,
            }
        )

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ModelConfig":
        check_schema(record, "model config")
        if "layers" not in record:
            raise ValidationError("model config has no 'layers'")
        return cls(
            layouts=resolve_layouts(record.get("layouts", {})),
            layers=list(record["layers"]),
            optimizer=dict(record.get("optimizer", {})),
            loss=record.get("loss", TRAINING_DEFAULTS["loss"]),
            augment_prob=float(record.get("augment_prob", TRAINING_DEFAULTS["augment_prob"])),
            bn_momentum_decay=float(record.get("bn_momentum_decay", TRAINING_DEFAULTS["bn_momentum_decay"])),
            target_loss=record.get("target_loss"),
            log_every=int(record.get("log_every", TRAINING_DEFAULTS["log_every"])),
            seed=int(record.get("seed", TRAINING_DEFAULTS["seed"])),
            name=record.get("name", "model"),
        )

    def save(self, path: Union[str, Path]) -> Path:
        return save_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelConfig":
        return cls.from_dict(load_json(path))


# ----------------------------------------------------------------------
# Layer builders
# ----------------------------------------------------------------------
def _ref(config: ModelConfig, desc: Dict[str, Any], key: str, default: Optional[JointLayout]) -> JointLayout:
    if key in desc:
        return config.layout(desc[key])
    if default is None:
        raise ValidationError(f"{desc['kind']} layer needs a '{key}' layout (there is no previous layer)")
    return default


def _build_linear(desc, config, current, rng):
    return ChiralLinearSpec.init(
        _ref(config, desc, "in", current), _ref(config, desc, "out", None), rng=rng, bias=desc.get("bias", True)
    )


def _build_conv(desc, config, current, rng):
    return ChiralConv1DSpec.init(
        _ref(config, desc, "in", current),
        _ref(config, desc, "out", None),
        kernel_size=int(desc.get("kernel_size", 3)),
        dilation=int(desc.get("dilation", 1)),
        stride=int(desc.get("stride", 1)),
        rng=rng,
    )


def _build_batchnorm(desc, config, current, rng):
    return ChiralBatchNormState.init(
        _ref(config, desc, "layout", current),
        momentum=float(desc.get("momentum", TRAINING_DEFAULTS["bn_momentum"])),
        eps=float(desc.get("eps", TRAINING_DEFAULTS["bn_eps"])),
    )


def _build_activation(desc, config, current, rng):
    return OddActivation(desc.get("activation", "tanh"), _ref(config, desc, "layout", current))


def _build_dropout(desc, config, current, rng):
    return DropoutSpec(float(desc.get("p", 0.0)), _ref(config, desc, "layout", current))


def _build_head(desc, config, current, rng):
    in_layout = _ref(config, desc, "in", current)
    if "out" in desc:
        out_layout = config.layout(desc["out"])
    else:
        out_layout = invariant_layout(int(desc.get("units", 1)), int(desc.get("dims", 1)))
    return InvarianceHead.init(in_layout, out_layout, rng=rng)


def _build_lstm(desc, config, current, rng):
    return ChiralLSTMSpec.init(
        _ref(config, desc, "in", current),
        _ref(config, desc, "hidden", None),
        rng=rng,
        forget_bias=float(desc.get("forget_bias", 1.0)),
    )


def _build_gru(desc, config, current, rng):
    return ChiralGRUSpec.init(_ref(config, desc, "in", current), _ref(config, desc, "hidden", None), rng=rng)


def _build_dense(desc, config, current, rng):
    if "in_size" in desc:
        in_size = int(desc["in_size"])
    else:
        in_size = _ref(config, desc, "in", current).size
    out_size = int(desc["out_size"]) if "out_size" in desc else config.layout(desc["out"]).size
    return DenseLinear.create(in_size, out_size, rng=rng, bias=desc.get("bias", True))


LAYER_BUILDERS = {
    "chiral_linear": _build_linear,
    "chiral_conv1d": _build_conv,
    "batchnorm": _build_batchnorm,
    "activation": _build_activation,
    "dropout": _build_dropout,
    "invariance_head": _build_head,
    "chiral_lstm": _build_lstm,
    "chiral_gru": _build_gru,
    "dense": _build_dense,
}

LAYER_TYPES = {
    "chiral_linear": ChiralLinearSpec,
    "chiral_conv1d": ChiralConv1DSpec,
    "batchnorm": ChiralBatchNormState,
    "activation": OddActivation,
    "dropout": DropoutSpec,
    "invariance_head": InvarianceHead,
    "chiral_lstm": ChiralLSTMSpec,
    "chiral_gru": ChiralGRUSpec,
    "dense": DenseLinear,
}


def _check_adjacent(index: int, previous: ChiralLayer, layer: ChiralLayer) -> None:
    if "dense" in (previous.kind, layer.kind):
        if previous.out_layout.size != layer.in_layout.size:
            raise ValidationError(
                f"layer {index} ({layer.kind}) reads {layer.in_layout.size} features, "
                f"previous layer produces {previous.out_layout.size}"
            )
    elif not previous.out_layout.is_compatible(layer.in_layout):
        raise ValidationError(
            f"layer {index} ({layer.kind}) expects {layer.in_layout}, previous layer produces {previous.out_layout}"
        )


# ----------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------
class ChiralNet:
    """A stack of layers plus the config it was built from."""

    def __init__(self, config: ModelConfig, layers: List[ChiralLayer]):
        if not layers:
            raise ValidationError("a model needs at least one layer")
        for i in range(1, len(layers)):
            _check_adjacent(i, layers[i - 1], layers[i])
        self.config = config
        self.layers = layers

    @property
    def in_layout(self) -> JointLayout:
        return self.layers[0].in_layout

    @property
    def out_layout(self) -> JointLayout:
        return self.layers[-1].out_layout

    @property
    def is_sequence(self) -> bool:
        return any(layer.kind in SEQUENCE_KINDS for layer in self.layers)

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        x = as_tensor(x)
        for layer in self.layers:
            x = layer(x, training=training, rng=rng)
        return x

    __call__ = forward

    def min_frames(self) -> int:
        """Shortest input sequence that leaves at least one output frame."""
        needed = 1
        for layer in reversed(self.layers):
            if isinstance(layer, ChiralConv1DSpec):
                needed = (needed - 1) * layer.stride + layer.receptive_field
        return needed

    def readout(self, y):
        """Last output frame for sequence models, the output itself otherwise."""
        return y[..., -1, :] if self.is_sequence else y

    def predict(self, x) -> np.ndarray:
        return self.readout(self.forward(x).data)

    def predict_counted(self, x) -> Tuple[np.ndarray, int, int]:
        """Eval-mode prediction through the symmetric inference path, with (symmetric, naive) mult counts."""
        y = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        mults = naive = 0
        for layer in self.layers:
            y, layer_mults, layer_naive = layer.infer_counted(y)
            mults, naive = mults + layer_mults, naive + layer_naive
        return self.readout(y), mults, naive

    def parameters(self) -> Dict[str, Tensor]:
        return {
            f"{i}.{layer.kind}.{name}": p
            for i, layer in enumerate(self.layers)
            for name, p in layer.parameters().items()
        }

    def free_parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def affine_maps(self) -> Dict[str, ChiralLinearSpec]:
        maps = {}
        for i, layer in enumerate(self.layers):
            prefix = f"{i}.{layer.kind}"
            if isinstance(layer, ChiralLinearSpec):
                maps[prefix] = layer
            elif isinstance(layer, ChiralConv1DSpec):
                maps.update({f"{prefix}.tap{t}": tap for t, tap in enumerate(layer.taps)})
            elif isinstance(layer, (ChiralLSTMSpec, ChiralGRUSpec)):
                maps.update({f"{prefix}.{key}": spec for key, spec in layer.cells.items()})
        return maps

    def batchnorm_layers(self) -> List[ChiralBatchNormState]:
        return [layer for layer in self.layers if isinstance(layer, ChiralBatchNormState)]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def to_dict(self) -> Dict[str, Any]:
        config = self.config.to_dict()
        config.pop("schema")
        return with_schema({"config": config, "layers": [layer.to_dict() for layer in self.layers]})

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ChiralNet":
        check_schema(record, "model")
        try:
            config = ModelConfig.from_dict(with_schema(record["config"]))
            layers = []
            for layer_record in record["layers"]:
                kind = layer_record.get("kind")
                if kind not in LAYER_TYPES:
                    raise ValidationError(f"unknown layer kind '{kind}' in model file")
                layers.append(LAYER_TYPES[kind].from_dict(layer_record))
        except KeyError as e:
            raise ValidationError(f"model record is missing {e}") from e
        return cls(config, layers)

    def save(self, path: Union[str, Path]) -> Path:
        return save_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ChiralNet":
        return cls.from_dict(load_json(path))

    def __repr__(self) -> str:
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"ChiralNet({self.config.name}: {kinds}; {self.free_parameter_count()} parameters)"


def build_model(config: ModelConfig) -> ChiralNet:
    """Instantiate every layer of ``config`` with parameters drawn from its seed."""
    rng = np.random.default_rng(config.seed)
    layers: List[ChiralLayer] = []
    current: Optional[JointLayout] = None
    for i, desc in enumerate(config.layers):
        try:
            layer = LAYER_BUILDERS[desc["kind"]](desc, config, current, rng)
        except ValidationError as e:
            raise ValidationError(f"layer {i}: {e}") from e
        if layers:
            _check_adjacent(i, layers[-1], layer)
        layers.append(layer)
        current = layer.out_layout
    model = ChiralNet(config, layers)
    logger.debug(f"Built {model}")
    return model


# ----------------------------------------------------------------------
# Parameter-matched dense baseline
# ----------------------------------------------------------------------
BASELINE_KINDS = ("chiral_linear", "dense", "activation", "batchnorm", "dropout")


def _baseline_layers(config: ModelConfig, n_in: int, n_out: int, width: int) -> List[Dict[str, Any]]:
    linear_positions = [i for i, d in enumerate(config.layers) if d["kind"] in ("chiral_linear", "dense")]
    layers, size = [], n_in
    for i, desc in enumerate(config.layers):
        kind = desc["kind"]
        if kind in ("chiral_linear", "dense"):
            out_size = n_out if i == linear_positions[-1] else width
            layers.append({"kind": "dense", "in_size": size, "out_size": out_size, "bias": desc.get("bias", True)})
            size = out_size
        elif kind == "batchnorm":
            layers.append({k: v for k, v in desc.items() if k != "layout"})
        elif kind == "activation":
            layers.append({"kind": "activation", "activation": desc.get("activation", "tanh")})
        else:
            layers.append({"kind": "dropout", "p": desc.get("p", 0.0)})
    return layers


def _dense_parameter_count(layers: List[Dict[str, Any]]) -> int:
    count, size = 0, None
    for desc in layers:
        if desc["kind"] == "dense":
            count += desc["in_size"] * desc["out_size"] + (desc["out_size"] if desc.get("bias", True) else 0)
            size = desc["out_size"]
        elif desc["kind"] == "batchnorm":
            count += 2 * size
    return count


def build_baseline_config(config: ModelConfig, target_params: Optional[int] = None) -> ModelConfig:
    """
    Dense stack of the same depth whose hidden width makes its parameter count closest to the chiral model's.

    Only fully connected stacks are supported.
    """
    unsupported = sorted({d["kind"] for d in config.layers} - set(BASELINE_KINDS))
    if unsupported:
        raise ValidationError(f"parameter-matched baselines are built for fully connected stacks, found {unsupported}")
    if not any(d["kind"] in ("chiral_linear", "dense") for d in config.layers):
        raise ValidationError("baseline needs at least one linear layer")
    if config.layers[0]["kind"] not in ("chiral_linear", "dense"):
        raise ValidationError("baseline stacks must start with a linear layer")

    chiral = build_model(config)
    target = target_params if target_params is not None else chiral.free_parameter_count()
    n_in, n_out = chiral.in_layout.size, chiral.out_layout.size
    max_width = max(layer.out_layout.size for layer in chiral.layers)

    best = min(
        range(1, 2 * max_width + 1),
        key=lambda w: (abs(_dense_parameter_count(_baseline_layers(config, n_in, n_out, w)) - target), w),
    )
    layers = _baseline_layers(config, n_in, n_out, best)
    logger.info(
        f"Dense baseline for '{config.name}': width {best}, {_dense_parameter_count(layers)} parameters "
        f"(chiral model has {target})"
    )
    return ModelConfig(
        layouts={},
        layers=layers,
        optimizer=dict(config.optimizer),
        loss=config.loss,
        augment_prob=config.augment_prob,
        bn_momentum_decay=config.bn_momentum_decay,
        target_loss=config.target_loss,
        log_every=config.log_every,
        seed=config.seed,
        name=f"{config.name}-dense-baseline",
    )

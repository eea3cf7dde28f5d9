import json
from pathlib import Path

import numpy as np
import pytest

from src.tools.layers import ChiralLinearSpec, DenseLinear
from src.tools.layout import apply_transform, make_transform
from src.tools.model import ChiralNet, ModelConfig, build_baseline_config, build_model, resolve_layouts
from src.utils.exceptions import ValidationError

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


def config_record(**overrides):
    record = json.loads((CONFIGS / "mlp.json").read_text())
    record.update(overrides)
    return record


def test_resolve_layout_forms(h36m_2d):
    layouts = resolve_layouts(
        {
            "hidden": {"hidden": {"base": "pose", "dims": 6, "negated_ratio": "1/3"}},
            "pose": {"h36m17": {"dims": 2, "negated_dims": [0]}},
            "tiny": {"synthetic": {"pairs": 1, "center": 1, "dims": 2, "negated": 1}},
            "explicit": h36m_2d.to_dict(),
        }
    )
    assert layouts["pose"].is_compatible(h36m_2d)
    assert layouts["explicit"].is_compatible(h36m_2d)
    assert layouts["hidden"].dims == 6 and layouts["hidden"].n_negated == 2
    assert layouts["tiny"].size == 6


def test_resolve_layouts_rejects_unknown_and_circular_references():
    with pytest.raises(ValidationError):
        resolve_layouts({"h": {"hidden": {"base": "missing", "dims": 2}}})
    with pytest.raises(ValidationError):
        resolve_layouts({"a": {"hidden": {"base": "b"}}, "b": {"hidden": {"base": "a"}}})


@pytest.mark.parametrize(
    "overrides",
    [
        {"optimizer": {"kind": "rmsprop"}},
        {"optimizer": {"lr": 0.0}},
        {"loss": "huber"},
        {"augment_prob": 1.5},
        {"bn_momentum_decay": 0.0},
        {"layers": []},
        {"layers": [{"kind": "conv2d"}]},
    ],
)
def test_config_validation(overrides):
    with pytest.raises(ValidationError):
        ModelConfig.from_dict(config_record(**overrides))


def test_config_requires_schema():
    record = config_record()
    del record["schema"]
    with pytest.raises(ValidationError):
        ModelConfig.from_dict(record)


def test_config_save_load_round_trip(tmp_path):
    config = ModelConfig.load(CONFIGS / "mlp.json")
    restored = ModelConfig.load(config.save(tmp_path / "config.json"))
    assert restored.to_dict() == config.to_dict()
    assert restored.optimizer["betas"] == [0.9, 0.9999]


def test_build_follows_descriptors():
    model = build_model(ModelConfig.load(CONFIGS / "mlp.json"))
    assert [layer.kind for layer in model.layers] == [
        "chiral_linear", "batchnorm", "activation", "dropout", "chiral_linear",
    ]  # fmt: skip
    assert model.in_layout.size == 34 and model.out_layout.size == 51
    assert not model.is_sequence
    assert list(model.affine_maps()) == ["0.chiral_linear", "4.chiral_linear"]
    assert model.free_parameter_count() == sum(p.size for p in model.parameters().values())
    assert "chiral-mlp" in repr(model)


def test_build_is_seeded():
    config = ModelConfig.load(CONFIGS / "lstm.json")
    a, b = build_model(config), build_model(config)
    for name, p in a.parameters().items():
        np.testing.assert_array_equal(b.parameters()[name].data, p.data)


def test_forward_is_equivariant(rng):
    model = build_model(ModelConfig.load(CONFIGS / "mlp.json"))
    t_in, t_out = make_transform(model.in_layout), make_transform(model.out_layout)
    x = rng.standard_normal((5, model.in_layout.size))
    np.testing.assert_allclose(
        apply_transform(t_out, model.predict(x)), model.predict(apply_transform(t_in, x)), atol=1e-9
    )


def test_predict_counted_matches_predict(rng):
    model = build_model(ModelConfig.load(CONFIGS / "conv.json"))
    x = rng.standard_normal((2, 11, model.in_layout.size))
    y, mults, naive = model.predict_counted(x)
    np.testing.assert_allclose(y, model.predict(x), atol=1e-9)
    assert y.shape == (2, model.out_layout.size)
    assert 0 < mults < naive


def test_min_frames():
    assert build_model(ModelConfig.load(CONFIGS / "conv.json")).min_frames() == 9
    assert build_model(ModelConfig.load(CONFIGS / "lstm.json")).min_frames() == 1


def test_adjacent_layouts_must_match():
    record = config_record(
        layers=[
            {"kind": "chiral_linear", "in": "pose2d", "out": "hidden"},
            {"kind": "chiral_linear", "in": "pose3d", "out": "pose2d"},
        ]
    )
    with pytest.raises(ValidationError):
        build_model(ModelConfig.from_dict(record))


def test_first_layer_needs_an_input_layout():
    record = config_record(layers=[{"kind": "activation"}])
    with pytest.raises(ValidationError):
        build_model(ModelConfig.from_dict(record))


def test_model_serialization_is_byte_stable(tmp_path, rng):
    model = build_model(ModelConfig.load(CONFIGS / "gru.json"))
    first = model.save(tmp_path / "a.json")
    restored = ChiralNet.load(first)
    second = restored.save(tmp_path / "b.json")
    assert first.read_bytes() == second.read_bytes()
    x = rng.standard_normal((2, 4, model.in_layout.size))
    np.testing.assert_array_equal(restored.predict(x), model.predict(x))


def test_model_file_rejects_unknown_layer_kind(tmp_path):
    record = build_model(ModelConfig.load(CONFIGS / "linear.json")).to_dict()
    record["layers"][0]["kind"] = "mystery"
    with pytest.raises(ValidationError):
        ChiralNet.from_dict(record)


def test_baseline_matches_parameter_count():
    config = ModelConfig.load(CONFIGS / "mlp.json")
    chiral = build_model(config)
    baseline = build_model(build_baseline_config(config))
    assert all(not isinstance(layer, ChiralLinearSpec) or isinstance(layer, DenseLinear) for layer in baseline.layers)
    assert baseline.in_layout.size == chiral.in_layout.size
    assert baseline.out_layout.size == chiral.out_layout.size
    # one extra hidden unit costs in + out + bias + batch-norm parameters
    assert abs(baseline.free_parameter_count() - chiral.free_parameter_count()) <= (34 + 51 + 1 + 2) // 2 + 1


def test_baseline_rejects_non_fully_connected_stacks():
    with pytest.raises(ValidationError):
        build_baseline_config(ModelConfig.load(CONFIGS / "conv.json"))

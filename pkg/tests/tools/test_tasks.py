import numpy as np
import pytest

from src.tools.layout import apply_transform, make_transform
from src.tools.tasks import SyntheticPoseTask, TaskSplit, make_task, output_layout_for
from src.utils.exceptions import ValidationError


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_targets_are_chirally_consistent(kind, h36m_2d, rng):
    task = make_task(h36m_2d, samples=50, seed=3, kind=kind)
    truth = task.ground_truth(np.random.default_rng(3))
    np.testing.assert_allclose(truth(task.x), task.y)

    t_in, t_out = make_transform(task.in_layout), make_transform(task.out_layout)
    x = rng.standard_normal((10, h36m_2d.size))
    np.testing.assert_allclose(truth(apply_transform(t_in, x)), apply_transform(t_out, truth(x)), atol=1e-12)


def test_output_layout_keeps_joints_and_negation(h36m_2d):
    out = output_layout_for(h36m_2d, 3)
    assert out.joints == h36m_2d.joints
    assert out.dims == 3 and out.negated_dims == (0,)


def test_generation_is_deterministic(h36m_2d):
    a = make_task(h36m_2d, samples=20, seed=7, noise=0.1)
    b = make_task(h36m_2d, samples=20, seed=7, noise=0.1)
    c = make_task(h36m_2d, samples=20, seed=8, noise=0.1)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)


def test_split_and_limit(h36m_2d):
    split = make_task(h36m_2d, samples=100, seed=0).split()
    assert (len(split.x_train), len(split.x_val)) == (80, 20)

    limited = split.limit(0.25)
    assert len(limited.x_train) == 20
    np.testing.assert_array_equal(limited.x_train, split.x_train[:20])
    assert len(limited.x_val) == 20
    assert len(split.limit(1e-6).x_train) == 1


@pytest.mark.parametrize("fraction", [0.0, 1.5, -0.1])
def test_limit_rejects_bad_fractions(fraction):
    split = TaskSplit(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        split.limit(fraction)


def test_empty_validation_split_warns(h36m_2d, caplog):
    task = make_task(h36m_2d, samples=10, seed=0, val_fraction=0.0)
    split = task.split()
    assert len(split.x_val) == 0 and len(split.x_train) == 10
    assert "validation split is empty" in caplog.text


def test_sequence_task_regresses_last_frame(h36m_2d):
    task = make_task(h36m_2d, samples=12, seed=2, frames=6, kind="linear")
    assert task.is_sequence
    assert task.x.shape == (12, 6, h36m_2d.size)
    assert task.y.shape == (12, task.out_layout.size)
    truth = task.ground_truth(np.random.default_rng(2))
    np.testing.assert_allclose(truth(task.x[:, -1, :]), task.y)
    # consecutive frames differ by a small random-walk step
    assert np.abs(np.diff(task.x, axis=1)).mean() < 0.5


def test_save_load_round_trip(h36m_2d, tmp_path):
    task = make_task(h36m_2d, samples=15, seed=4, noise=0.05, frames=3)
    path = task.save(tmp_path / "task.json")
    restored = SyntheticPoseTask.load(path)
    np.testing.assert_array_equal(restored.x, task.x)
    np.testing.assert_array_equal(restored.y, task.y)
    assert restored.in_layout.is_compatible(task.in_layout)
    assert (restored.frames, restored.noise, restored.kind) == (3, 0.05, task.kind)


def test_header_only_record_regenerates(h36m_2d):
    record = make_task(h36m_2d, samples=8, seed=5).to_dict()
    expected = SyntheticPoseTask.from_dict(record).y
    del record["x"], record["y"]
    np.testing.assert_array_equal(SyntheticPoseTask.from_dict(record).y, expected)


def test_record_with_wrong_schema_is_rejected(h36m_2d):
    record = make_task(h36m_2d, samples=8, seed=5).to_dict()
    record["schema"] = "chirality-kit/v0"
    with pytest.raises(ValidationError, match="schema"):
        SyntheticPoseTask.from_dict(record)
    del record["schema"]
    with pytest.raises(ValidationError, match="schema"):
        SyntheticPoseTask.from_dict(record)


def test_record_with_wrong_sample_count_is_rejected(h36m_2d):
    record = make_task(h36m_2d, samples=8, seed=5).to_dict()
    record["samples"] = 9
    with pytest.raises(ValidationError):
        SyntheticPoseTask.from_dict(record)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "cubic"},
        {"samples": 0},
        {"noise": -1.0},
        {"frames": 0},
        {"val_fraction": 1.0},
    ],
)
def test_invalid_task_settings(h36m_2d, kwargs):
    with pytest.raises(ValidationError):
        make_task(h36m_2d, **kwargs)


def test_split_needs_data(h36m_2d):
    task = SyntheticPoseTask(h36m_2d, output_layout_for(h36m_2d))
    with pytest.raises(ValidationError):
        task.split()

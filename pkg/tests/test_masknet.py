import math

import numpy as np
import pytest

from madiff.datagen import gen_training_set
from madiff.errors import FormatError, ParameterError
from madiff.masknet import (
    MaskInput,
    MaskNetConfig,
    binarize,
    gradient_check,
    init_masknet,
    iou,
    load_checkpoint,
    masknet_loss,
    predict_mask,
    predict_masks,
    save_checkpoint,
    train_masknet,
)
from madiff.nn import TrainConfig


@pytest.fixture(scope="module")
def small_set():
    return gen_training_set(8, seed=3)


def test_untrained_output_contract(small_set):
    model = init_masknet()
    out = predict_mask(model, small_set[0][0])
    assert out.shape == (16, 16)
    assert np.all((out > 0) & (out < 1))
    assert predict_mask(model, small_set[0][0]).tobytes() == out.tobytes()


def test_parameter_counts():
    assert init_masknet().num_parameters == 9345
    assert init_masknet(MaskNetConfig(linear=True)).num_parameters == 8049


def test_input_shape_validation():
    bad = MaskInput(np.zeros((8, 8)), np.zeros((8, 8, 6)), np.zeros(32))
    with pytest.raises(ParameterError):
        predict_mask(init_masknet(), bad)


def test_loss_examples(rng):
    t = rng.uniform(size=(16, 16))
    assert masknet_loss(t, t) == 0.0
    assert masknet_loss(np.full((4, 4), 0.5), np.ones((4, 4))) == pytest.approx(0.25, abs=1e-15)
    a, b = rng.uniform(size=(2, 16, 16))
    total = 0.0
    for i in range(16):
        for j in range(16):
            total += (a[i, j] - b[i, j]) ** 2
    assert masknet_loss(a, b) == pytest.approx(total / 256, abs=1e-12)


def test_binarize_examples():
    np.testing.assert_array_equal(binarize(np.full((2, 2), 0.9)), np.ones((2, 2)))
    np.testing.assert_array_equal(binarize(np.full((2, 2), 0.1)), np.zeros((2, 2)))
    np.testing.assert_array_equal(binarize(np.array([[0.4, 0.6], [0.5, 0.49]]), 0.5), [[0, 1], [1, 0]])
    with pytest.raises(ParameterError):
        binarize(np.zeros(2), 1.0)


def test_iou():
    a = np.array([[1, 1], [0, 0]])
    assert iou(a, a) == 1.0
    assert iou(a, np.array([[1, 0], [0, 0]])) == 0.5
    assert iou(np.zeros(3), np.zeros(3)) == 1.0


def test_gradient_check_linear_config(small_set):
    model = init_masknet(MaskNetConfig(linear=True), seed=2)
    inputs = [s[0] for s in small_set[:2]]
    truth = np.stack([s[1] for s in small_set[:2]])
    # the loss is quadratic along each coordinate, so a central difference is exact up to round-off
    assert gradient_check(model, inputs, truth, h=1e-3, n_params=60) <= 1e-8


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_check_full_model(small_set, seed):
    model = init_masknet(seed=5)
    inputs = [s[0] for s in small_set[:2]]
    truth = np.stack([s[1] for s in small_set[:2]])
    assert gradient_check(model, inputs, truth, h=1e-5, n_params=80, seed=seed) <= 1e-3


def test_overfit_small_set(small_set):
    hyper = TrainConfig(epochs=300, batch_size=8, lr=1e-2, optimizer="adam", seed=0)
    model, report = train_masknet(small_set, [], hyper)
    assert report.final_loss < 0.1 * report.initial_loss
    assert report.steps == 300


def test_zero_epochs_returns_init(small_set):
    model, report = train_masknet(small_set, small_set[:2], TrainConfig(epochs=0, seed=7))
    init = init_masknet(seed=7)
    for k, v in init.params.items():
        np.testing.assert_array_equal(model.params[k], v)
    assert report.steps == 0


def test_training_deterministic(small_set):
    hyper = TrainConfig(epochs=3, batch_size=4, lr=0.5, seed=1)
    _, a = train_masknet(small_set, small_set[:2], hyper)
    _, b = train_masknet(small_set, small_set[:2], hyper)
    assert a.to_dict() == b.to_dict()


def test_max_steps_caps_updates(small_set):
    _, report = train_masknet(small_set, [], TrainConfig(epochs=50, batch_size=4, max_steps=7))
    assert report.steps == 7 and len(report.loss_curve) == 7


def test_empty_training_set():
    with pytest.raises(ParameterError):
        train_masknet([], [], TrainConfig())


def test_checkpoint_round_trip(tmp_path, small_set):
    model = init_masknet(seed=11)
    save_checkpoint(model, tmp_path / "m.ckpt", {"lr": 0.5})
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    for k in model.params:
        assert back.params[k].tobytes() == model.params[k].tobytes()
    x = [s[0] for s in small_set]
    assert predict_masks(back, x).tobytes() == predict_masks(model, x).tobytes()


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda b: b"NOTMAGIC" + b[8:],
        lambda b: b[:8] + (99).to_bytes(4, "little") + b[12:],
        lambda b: b[:-8],
        lambda b: b + b"\0" * 8,
        lambda b: b[:20] + b"[" + b[21:],
        lambda b: b[:10],
    ],
)
def test_checkpoint_corruption(tmp_path, corrupt):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_masknet(), path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_report_nan_without_validation(small_set):
    _, report = train_masknet(small_set, [], TrainConfig(epochs=1, batch_size=8))
    assert math.isnan(report.best_val_iou)

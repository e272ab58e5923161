"""Optimizer, losses, metrics, and the toy training loop."""

import math

import numpy as np
import pytest

from octmamba.data import make_octant_seg_dataset, make_shape_dataset
from octmamba.network import ModelConfig, init_model_params
from octmamba.tensor import Tape, Tensor
from octmamba.train import (
    Adam,
    TrainingDiverged,
    accuracy,
    cross_entropy_rows,
    cross_entropy_single,
    evaluate,
    mean_iou,
    train_model,
)

TOY_CFG = ModelConfig(
    stage_blocks=(1, 1), stage_channels=(8, 12), octree_depth=3, state_size=4
)


# ---------------------------------------------------------------------------
# metrics


def test_accuracy():
    assert accuracy([1, 2, 3], [1, 2, 0]) == pytest.approx(2 / 3)


def test_miou_perfect_prediction():
    pred = np.array([0, 1, 2, 1])
    assert mean_iou(pred, pred, 3) == 1.0


def test_miou_hand_confusion_matrix():
    # two classes, prediction all 0, truth half/half:
    # class 0: TP=2, FP=2, FN=0 -> 0.5; class 1: TP=0, FP=0, FN=2 -> 0
    pred = np.zeros(4, dtype=int)
    truth = np.array([0, 0, 1, 1])
    assert mean_iou(pred, truth, 2) == pytest.approx(0.25)


def test_miou_skips_absent_classes():
    pred = np.array([0, 0, 1])
    truth = np.array([0, 0, 1])
    # class 2 absent from both sides; mean over classes 0 and 1 only
    assert mean_iou(pred, truth, 3) == 1.0


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_single_matches_closed_form():
    logits = Tensor(np.array([1.0, 2.0, 0.5]))
    loss = cross_entropy_single(logits, 1)
    probs = np.exp(logits.data - logits.data.max())
    probs /= probs.sum()
    assert loss.item() == pytest.approx(-math.log(probs[1]), abs=1e-12)


def test_cross_entropy_rows_matches_closed_form():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 3))
    targets = np.array([0, 2, 1, 1, 0])
    loss = cross_entropy_rows(Tensor(logits), targets)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    want = -logp[np.arange(5), targets].mean()
    assert loss.item() == pytest.approx(want, abs=1e-12)


def test_cross_entropy_stable_for_large_logits():
    logits = Tensor(np.array([1000.0, 0.0]))
    assert cross_entropy_single(logits, 0).item() == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam([("x", x)], lr=0.1)
    from octmamba.tensor import mul, tsum

    for _ in range(200):
        opt.zero_grad()
        with Tape() as tape:
            loss = tsum(mul(x, x))
        tape.backward(loss)
        opt.step()
    assert np.max(np.abs(x.data)) < 1e-2


def test_adam_skips_parameters_without_grad():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam([("x", x), ("y", y)], lr=0.5)
    from octmamba.tensor import mul, tsum

    opt.zero_grad()
    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)
    opt.step()
    assert x.data[0] != 1.0
    assert y.data[0] == 2.0


# ---------------------------------------------------------------------------
# training loop


def test_zero_epochs_returns_initial_params_no_history():
    clouds = make_shape_dataset(1, 32, 0)
    params, history = train_model(TOY_CFG, clouds, epochs=0, batch_size=2, seed=0)
    assert history == []
    fresh = init_model_params(TOY_CFG, np.random.default_rng(0))
    for (_, a), (_, b) in zip(params.named(), fresh.named()):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_history_deterministic():
    clouds = make_shape_dataset(2, 64, 1)

    def run():
        _, history = train_model(TOY_CFG, clouds, epochs=2, batch_size=4, seed=7)
        return [(h.epoch, h.loss, h.acc) for h in history]

    assert run() == run()


def test_training_overfits_tiny_classification_set():
    clouds = make_shape_dataset(2, 256, 2)  # 8 clouds
    params, history = train_model(
        TOY_CFG, clouds, epochs=40, batch_size=4, seed=0,
        max_steps=150, stop_at_train_acc=1.0,
    )
    acc, name = evaluate(TOY_CFG, params, clouds)
    assert name == "accuracy"
    assert acc == 1.0


def test_training_segmentation_path_runs_and_improves():
    cfg = ModelConfig(
        task="segment", num_classes=8, stage_blocks=(1, 1), stage_channels=(8, 12),
        octree_depth=3, state_size=4,
    )
    clouds = make_octant_seg_dataset(4, 128, 3)
    params, history = train_model(cfg, clouds, epochs=60, batch_size=2, seed=0)
    miou, name = evaluate(cfg, params, clouds)
    assert name == "miou"
    assert history[-1].loss < history[0].loss
    assert miou > 0.5


def test_non_finite_loss_aborts_with_diagnostic():
    clouds = make_shape_dataset(1, 32, 4)
    params = init_model_params(TOY_CFG, np.random.default_rng(0))
    params.embed.weight.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_model(TOY_CFG, clouds, epochs=1, batch_size=2, seed=0, params=params)


def test_max_steps_caps_optimizer_updates():
    clouds = make_shape_dataset(2, 32, 5)  # 8 clouds, batch 2 -> 4 steps/epoch
    _, history = train_model(TOY_CFG, clouds, epochs=10, batch_size=2, seed=0, max_steps=3)
    assert len(history) == 1  # stopped inside the first epoch

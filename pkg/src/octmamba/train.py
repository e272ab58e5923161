"""Toy-scale training and evaluation: Adam, cross-entropy, accuracy, mIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PointCloud, augment
from .network import ModelConfig, ModelParams, init_model_params, model_forward
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    add,
    concat,
    exp,
    log,
    mul,
    sub,
    tmax,
    tmean,
    tsum,
)


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Standard Adam with bias correction, updating leaf tensors in place."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.items = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in self.items}
        self.v = {name: np.zeros_like(t.data) for name, t in self.items}
        self.t = 0

    def zero_grad(self) -> None:
        for _, t in self.items:
            t.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.items:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cross_entropy_single(logits: Tensor, target: int) -> Tensor:
    """Numerically stable -log softmax(logits)[target] for a (k,) vector."""
    m = tmax(logits)
    lse = add(log(tsum(exp(sub(logits, m)))), m)
    return sub(lse, logits[int(target)])


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows of (N, k) logits."""
    n, k = logits.shape
    m = tmax(logits, axis=1, keepdims=True)
    lse = add(log(tsum(exp(sub(logits, m)), axis=1)), m.reshape((n,)))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), np.asarray(targets, dtype=np.int64)] = 1.0
    picked = tsum(mul(logits, Tensor(onehot)), axis=1)
    return tmean(sub(lse, picked))


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float((pred == truth).mean())


def mean_iou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    """Mean over classes of TP/(TP+FP+FN); classes absent from both sides are skipped."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    ious = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        denom = tp + fp + fn
        if denom == 0:
            continue
        ious.append(tp / denom)
    if not ious:
        raise ValueError("mean_iou: no class present in prediction or ground truth")
    return float(np.mean(ious))


def _forward_cloud(cloud: PointCloud, config: ModelConfig, params: ModelParams) -> Tensor:
    normals = cloud.normals if config.use_normals else None
    return model_forward(cloud.positions, normals, config, params)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc: float


def train_model(
    config: ModelConfig,
    clouds: list[PointCloud],
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float = 1e-3,
    seed: int = 0,
    max_steps: int = 0,
    augment_data: bool = False,
    stop_at_train_acc: float | None = None,
    params: ModelParams | None = None,
    log=None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Minibatch training; returns final parameters and per-epoch metrics.

    Loss/accuracy per epoch are the running values over that epoch's
    forward passes. With ``stop_at_train_acc`` set, a clean full train-set
    evaluation runs whenever the running accuracy reaches the target and
    training stops once the evaluated accuracy does too. A non-finite loss
    aborts with ``TrainingDiverged``.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_model_params(config, rng)
    opt = Adam(params.named(), lr=learning_rate)
    history: list[EpochStats] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(clouds))
        losses: list[float] = []
        hits = 0
        seen = 0
        for lo in range(0, len(order), batch_size):
            if max_steps and step >= max_steps:
                break
            batch = order[lo : lo + batch_size]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    batch_losses = []
                    for idx in batch:
                        cloud = clouds[idx]
                        if augment_data:
                            cloud = augment(cloud, rng)
                        logits = _forward_cloud(cloud, config, params)
                        if config.task == "classify":
                            batch_losses.append(cross_entropy_single(logits, cloud.label))
                            hits += int(np.argmax(logits.data) == cloud.label)
                            seen += 1
                        else:
                            batch_losses.append(cross_entropy_rows(logits, cloud.label))
                            hits += int(np.sum(np.argmax(logits.data, axis=1) == cloud.label))
                            seen += len(cloud.label)
                    loss = tmean(concat([l.reshape((1,)) for l in batch_losses]))
                tape.backward(loss)
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}): {err}"
                ) from err
            opt.step()
            step += 1
            losses.append(loss.item())
        if not losses:
            break
        stats = EpochStats(epoch=epoch, loss=float(np.mean(losses)), acc=hits / max(seen, 1))
        history.append(stats)
        if log is not None:
            log(f"epoch {stats.epoch}: loss {stats.loss:.4f} acc {stats.acc:.4f} (step {step})")
        if stop_at_train_acc is not None and stats.acc >= stop_at_train_acc:
            if evaluate(config, params, clouds)[0] >= stop_at_train_acc:
                break
        if max_steps and step >= max_steps:
            break
    return params, history


def predict(config: ModelConfig, params: ModelParams, cloud: PointCloud) -> np.ndarray:
    logits = _forward_cloud(cloud, config, params)
    if config.task == "classify":
        return np.asarray(np.argmax(logits.data))
    return np.argmax(logits.data, axis=1)


def evaluate(
    config: ModelConfig, params: ModelParams, clouds: list[PointCloud]
) -> tuple[float, str]:
    """Returns (metric, name): accuracy for classification, mIoU for segmentation."""
    if config.task == "classify":
        preds = np.array([int(predict(config, params, c)) for c in clouds])
        truth = np.array([int(c.label) for c in clouds])
        return accuracy(preds, truth), "accuracy"
    preds = np.concatenate([predict(config, params, c) for c in clouds])
    truth = np.concatenate([np.asarray(c.label) for c in clouds])
    return mean_iou(preds, truth, config.num_classes), "miou"

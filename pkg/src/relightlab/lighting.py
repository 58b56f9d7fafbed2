"""Auxiliary light classifier: direction (8-way) and color (5-way) heads.

A four-stage conv/max-pool trunk maps [0,1] images to a feature map at
1/16 resolution.  That map is both the perceptual feature used by the
illumination loss and the proxy perceptual metric, and (frozen) the
guide-light conditioning input for the any-to-any relighting model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rng as rng_mod
from .autograd import Tape, Tensor, add, log, mul, reduce_sum, relu, reshape, softmax_logits
from .blocks import Conv2d, Linear
from .module import Module
from .nnops import pool
from .optim import Adam
from .scene import N_COLORS, N_DIRECTIONS, RenderedSample
from .imutil import to_chw

__all__ = [
    "LightingFeatures",
    "LightingPrediction",
    "LightingEstimator",
    "pretrain",
    "PretrainReport",
]

TRUNK_CHANNELS = (16, 32, 64, 64)
DOWNSCALE = 16  # two-fold pool per trunk stage


@dataclass
class LightingFeatures:
    """Penultimate convolutional activations, (B, C, H/16, W/16)."""

    feature_map: Tensor


@dataclass
class LightingPrediction:
    dir_logits: Tensor    # (B, 8)
    color_logits: Tensor  # (B, 5)


class LightingEstimator(Module):
    def __init__(self, rng, scale_divisor: int = 1, dtype=np.float32):
        super().__init__()
        chans = [max(4, c // scale_divisor) for c in TRUNK_CHANNELS]
        convs = []
        cin = 3
        for c in chans:
            convs.append(Conv2d(rng, cin, c, 3, pad=1, dtype=dtype))
            cin = c
        self.convs = convs
        self.dir_head = Linear(rng, cin, N_DIRECTIONS, dtype=dtype)
        self.color_head = Linear(rng, cin, N_COLORS, dtype=dtype)
        self.feature_channels = cin
        self.scale_divisor = scale_divisor

    def forward_features(self, image: Tensor) -> LightingFeatures:
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"estimator expects (B,3,H,W) images, got {image.shape}")
        if image.shape[2] % DOWNSCALE or image.shape[3] % DOWNSCALE:
            raise ValueError(
                f"estimator needs H,W divisible by {DOWNSCALE}, got {image.shape}"
            )
        x = image
        for conv in self.convs:
            x = pool("max", relu(conv.forward(x)), 2, 2)
        return LightingFeatures(feature_map=x)

    def forward_classify(self, image: Tensor) -> LightingPrediction:
        feat = self.forward_features(image).feature_map
        b, c = feat.shape[0], feat.shape[1]
        pooled = reshape(pool("global_avg", feat, 1), (b, c))
        return LightingPrediction(
            dir_logits=self.dir_head.forward(pooled),
            color_logits=self.color_head.forward(pooled),
        )


def nll_from_logits(logits: Tensor, labels: np.ndarray, n_classes: int) -> Tensor:
    """Mean negative log-likelihood of one-hot labels under softmax logits."""
    b = logits.shape[0]
    onehot = np.zeros((b, n_classes), dtype=logits.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    probs = add(softmax_logits(logits), Tensor(np.asarray(1e-12, dtype=logits.data.dtype)))
    picked = reduce_sum(mul(log(probs), Tensor(onehot)))
    return mul(picked, Tensor(np.asarray(-1.0 / b, dtype=logits.data.dtype)))


@dataclass
class PretrainReport:
    accuracy_direction: float
    accuracy_color: float
    epoch_losses: list


def _image_batch(samples: Sequence[RenderedSample], idx) -> tuple[Tensor, np.ndarray, np.ndarray]:
    imgs = np.stack([to_chw(samples[i].input_image) for i in idx])
    dirs = np.array([samples[i].input_light.direction_index for i in idx])
    cols = np.array([samples[i].input_light.color_index for i in idx])
    return Tensor(imgs), dirs, cols


def _accuracy(estimator: LightingEstimator, samples: Sequence[RenderedSample],
              batch: int = 16) -> tuple[float, float]:
    hits_d = hits_c = 0
    for start in range(0, len(samples), batch):
        idx = range(start, min(start + batch, len(samples)))
        images, dirs, cols = _image_batch(samples, idx)
        pred = estimator.forward_classify(images)
        hits_d += int((pred.dir_logits.data.argmax(axis=1) == dirs).sum())
        hits_c += int((pred.color_logits.data.argmax(axis=1) == cols).sum())
    return hits_d / len(samples), hits_c / len(samples)


def pretrain(estimator: LightingEstimator, train_samples: Sequence[RenderedSample],
             val_samples: Sequence[RenderedSample], epochs: int, seed: int,
             lr: float = 1e-3, batch: int = 16) -> PretrainReport:
    """Cross-entropy training of both heads; deterministic given the seed."""
    if not train_samples:
        raise ValueError("pretraining needs a non-empty dataset")
    opt = Adam(estimator.parameters())
    shuffle = rng_mod.stream(seed, "lighting.shuffle")
    losses = []
    for _ in range(epochs):
        order = shuffle.permutation(len(train_samples))
        total, steps = 0.0, 0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            images, dirs, cols = _image_batch(train_samples, idx)
            with Tape() as tape:
                pred = estimator.forward_classify(images)
                loss = add(nll_from_logits(pred.dir_logits, dirs, N_DIRECTIONS),
                           nll_from_logits(pred.color_logits, cols, N_COLORS))
                tape.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            total += loss.item()
            steps += 1
        losses.append(total / max(steps, 1))
    acc_d, acc_c = _accuracy(estimator, val_samples if val_samples else train_samples)
    return PretrainReport(accuracy_direction=acc_d, accuracy_color=acc_c,
                          epoch_losses=losses)

"""Small from-scratch 3D face recognizers and their training loop.

Two architectures: a permutation-invariant point network (shared per-point
MLP, max pool, dense head) and a small depth-image CNN. Both use smooth tanh
activations so attack gradients stay informative, and both run in float64 to
match the rest of the pipeline.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import InvalidConfig, ShapeMismatch, TrainingDiverged
from .pipeline import ScanDataset
from .reconstruct import TransformParams, apply_rigid_transform
from .util import DTYPE, rng_for, stable_seed


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)


def _init_conv(layer: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)


class PointNetMini(nn.Module):
    """Shared MLP 3 -> w -> 2w, max pool over points, head 2w -> w -> classes.

    ``input_scale`` spreads unit-sphere coordinates across the tanh
    nonlinearity; it is a fixed architecture constant, not a trained weight.
    """

    input_scale = 2.5

    def __init__(self, classes: int, width: int = 32, seed: int = 0):
        super().__init__()
        self.lin1 = nn.Linear(3, width, dtype=DTYPE)
        self.lin2 = nn.Linear(width, 2 * width, dtype=DTYPE)
        self.head1 = nn.Linear(2 * width, width, dtype=DTYPE)
        self.head2 = nn.Linear(width, classes, dtype=DTYPE)
        gen = torch.Generator().manual_seed(stable_seed("init-point", seed, width, classes))
        for layer in (self.lin1, self.lin2, self.head1, self.head2):
            _init_linear(layer, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, k, 3)
        h = torch.tanh(self.lin1(self.input_scale * x))
        h = torch.tanh(self.lin2(h))
        g = h.max(dim=1).values
        h = torch.tanh(self.head1(g))
        return self.head2(h)


class DepthNetMini(nn.Module):
    """Two stride-2 convolutions and two dense layers on square depth crops."""

    def __init__(self, classes: int, size: int = 64, width: int = 8, seed: int = 0):
        super().__init__()
        if size % 4 != 0:
            raise InvalidConfig("depth crop size must be divisible by 4")
        self.conv1 = nn.Conv2d(1, width, 3, stride=2, padding=1, dtype=DTYPE)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, dtype=DTYPE)
        flat = 2 * width * (size // 4) * (size // 4)
        self.dense1 = nn.Linear(flat, 64, dtype=DTYPE)
        self.dense2 = nn.Linear(64, classes, dtype=DTYPE)
        gen = torch.Generator().manual_seed(stable_seed("init-depth", seed, width, size, classes))
        _init_conv(self.conv1, gen)
        _init_conv(self.conv2, gen)
        _init_linear(self.dense1, gen)
        _init_linear(self.dense2, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 1, S, S)
        h = torch.tanh(self.conv1(x))
        h = torch.tanh(self.conv2(h))
        h = torch.tanh(self.dense1(h.reshape(h.shape[0], -1)))
        return self.dense2(h)


@dataclass
class ModelParams:
    """A frozen trained classifier plus its provenance."""

    arch: str
    class_count: int
    width: int
    input_size: int
    seed: int
    val_accuracy: float
    module: nn.Module

    def check_invariants(self) -> None:
        if self.arch not in ("point", "depth"):
            raise InvalidConfig(f"unknown architecture {self.arch!r}")
        if not (0.0 <= self.val_accuracy <= 1.0):
            raise InvalidConfig("val_accuracy must be a rate")


@dataclass
class TrainConfig:
    """Momentum SGD with a fixed step schedule."""

    epochs: int = 240
    batch_size: int = 64
    lr: float = 0.15
    momentum: float = 0.9
    lr_decay: float = 0.4
    decay_every: int = 80
    seed: int = 0
    width: int = 32
    augment: Optional[TransformParams] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise InvalidConfig("learning rate must be positive")


def _augment_clouds(batch: torch.Tensor, params: TransformParams, rng: np.random.Generator) -> torch.Tensor:
    out = []
    for i in range(batch.shape[0]):
        angles = [rng.normal(0.0, s) if s > 0 else 0.0 for s in params.rot_std]
        eta = [rng.normal(0.0, s) if s > 0 else 0.0 for s in params.trans_std]
        pts = batch[i]
        centroid = pts.mean(dim=0)
        radius = torch.linalg.norm(pts - centroid, dim=1).max()
        shift = torch.tensor([eta[0] * float(radius), eta[1] * float(radius), 0.0], dtype=DTYPE)
        moved = apply_rigid_transform(pts, angles, shift, pivot=centroid)
        c = moved.mean(dim=0)
        r = torch.linalg.norm(moved - c, dim=1).max()
        out.append((moved - c) / r)
    return torch.stack(out, dim=0)


def train(dataset: ScanDataset, config: TrainConfig) -> ModelParams:
    """Train a classifier for the dataset's modality.

    Deterministic for a fixed config: weight init, shuffling, and
    augmentation all derive from ``config.seed``. Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    classes = dataset.class_count
    if dataset.kind == "cloud":
        model = PointNetMini(classes, width=config.width, seed=config.seed)
        arch = "point"
        input_size = int(dataset.inputs.shape[1])
    else:
        size = int(dataset.inputs.shape[-1])
        model = DepthNetMini(classes, size=size, width=max(4, config.width // 4), seed=config.seed)
        arch = "depth"
        input_size = size

    x_train = dataset.inputs[dataset.train_mask]
    y_train = dataset.labels[dataset.train_mask]
    x_val = dataset.inputs[dataset.val_mask]
    y_val = dataset.labels[dataset.val_mask]
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise InvalidConfig("dataset must provide both train and val samples")

    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.decay_every, gamma=config.lr_decay)
    loss_fn = nn.CrossEntropyLoss()
    rng = rng_for("train-shuffle", config.seed)
    n = x_train.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size].copy())
            xb = x_train[idx]
            yb = y_train[idx]
            if config.augment is not None and dataset.kind == "cloud":
                xb = _augment_clouds(xb, config.augment, rng)
            opt.zero_grad()
            loss = loss_fn(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {float(loss)} at epoch {epoch}")
            loss.backward()
            opt.step()
        sched.step()

    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        acc = float((model(x_val).argmax(dim=1) == y_val).to(DTYPE).mean())
    return ModelParams(
        arch=arch,
        class_count=classes,
        width=config.width,
        input_size=input_size,
        seed=config.seed,
        val_accuracy=acc,
        module=model,
    )


def classify(model: ModelParams, x: torch.Tensor) -> torch.Tensor:
    """Logits for one input or a batch; gradients flow into ``x``."""
    single = (model.arch == "point" and x.ndim == 2) or (model.arch == "depth" and x.ndim == 3)
    xb = x[None] if single else x
    if model.arch == "point" and (xb.ndim != 3 or xb.shape[-1] != 3):
        raise ShapeMismatch(f"point model expects (B, k, 3), got {tuple(x.shape)}")
    if model.arch == "depth" and xb.ndim != 4:
        raise ShapeMismatch(f"depth model expects (B, 1, S, S), got {tuple(x.shape)}")
    logits = model.module(xb.to(DTYPE))
    return logits[0] if single else logits


def logits_loss(logits: torch.Tensor, target: int, mode: str, margin: float = 30.0) -> torch.Tensor:
    """Confidence-margin logits loss.

    ``impersonate``: ``max(max_{i != t} z_i - z_t, -margin)`` — minimizing
    drives the target class above all others by ``margin``.
    ``dodge``: ``max(z_y - max_{i != y} z_i, -margin)`` with ``target`` the
    true label — minimizing pushes the true class below the best other.
    At a tie for the runner-up max, the lowest index carries the gradient.
    Accepts (C,) -> scalar or (B, C) -> (B,).
    """
    if mode not in ("dodge", "impersonate"):
        raise InvalidConfig(f"unknown attack mode {mode!r}")
    single = logits.ndim == 1
    z = logits[None] if single else logits
    c = z.shape[-1]
    if not (0 <= target < c):
        raise InvalidConfig(f"target {target} outside {c} classes")
    others = z.clone()
    others[:, target] = -torch.inf
    best_idx = others.argmax(dim=-1)
    best = z.gather(-1, best_idx[:, None])[:, 0]
    if mode == "impersonate":
        raw = best - z[:, target]
    else:
        raw = z[:, target] - best
    out = torch.clamp(raw, min=-margin)
    return out[0] if single else out

"""One-dimensional two-cluster demo of averaging diverse single-unit classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, backward, concat_channels, make_optimizer, optimizer_step
from .autodiff.tensor import add, mul, reshape, sigmoid, sub
from .losses import LossSpec, compute_loss

CENTERS = (-10.0, 10.0)


@dataclass(frozen=True)
class ToyMember:
    loss: str
    weight_decay: float
    label_noise: float


MEMBERS = (
    ToyMember("cross_entropy", 0.0, 0.0),
    ToyMember("cross_entropy", 0.05, 0.1),
    ToyMember("soft_dice", 0.0, 0.0),
    ToyMember("soft_iou", 0.01, 0.2),
    ToyMember("soft_dice", 0.01, 0.1),
    ToyMember("cross_entropy", 2.0, 0.0),
)


def toy_data(rng: np.random.Generator, n_per_class: int = 100, spread: float = 2.5):
    x = np.concatenate([rng.normal(CENTERS[0], spread, n_per_class),
                        rng.normal(CENTERS[1], spread, n_per_class)])
    y = np.repeat([0, 1], n_per_class)
    return x, y


def flip_labels(y: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Flip the same number of labels in each class."""
    y = y.copy()
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        k = int(round(rate * idx.size))
        y[rng.choice(idx, k, replace=False)] = 1 - c
    return y


def _posterior(w: Tensor, b: Tensor, x: np.ndarray) -> Tensor:
    """``[2, n, 1, 1]`` two-class probabilities from one logistic unit."""
    xs = Tensor(x.reshape(1, -1, 1, 1), dtype=np.float64)
    p1 = sigmoid(add(mul(xs, reshape(w, (1, 1, 1, 1))), reshape(b, (1, 1, 1, 1))))
    return concat_channels(sub(1.0, p1), p1)


def train_unit(member: ToyMember, x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
               steps: int = 300, lr: float = 0.05) -> tuple[float, float]:
    params = {"w": Tensor(rng.normal(0.0, 0.1, 1), requires_grad=True, dtype=np.float64),
              "b": Tensor(rng.normal(0.0, 0.1, 1), requires_grad=True, dtype=np.float64)}
    y = flip_labels(y, member.label_noise, rng)
    target = y.reshape(-1, 1, 1)
    spec = LossSpec(member.loss)
    opt = make_optimizer("adam", lr=lr, weight_decay=member.weight_decay)
    for _ in range(steps):
        with Tape() as tape:
            loss = compute_loss(spec, _posterior(params["w"], params["b"], x), target)
        optimizer_step(opt, params, backward(tape, loss, params))
    return float(params["w"].data[0]), float(params["b"].data[0])


def crossing(grid: np.ndarray, curve: np.ndarray, level: float = 0.5) -> float | None:
    """First grid location where ``curve`` crosses ``level``, linearly interpolated."""
    d = curve - level
    hits = np.flatnonzero(np.sign(d[:-1]) != np.sign(d[1:]))
    if d[0] == 0:
        return float(grid[0])
    if hits.size == 0:
        return None
    i = hits[0]
    return float(grid[i] - d[i] * (grid[i + 1] - grid[i]) / (d[i + 1] - d[i]))


def toy_demo(seed: int = 0, members=MEMBERS, grid_step: float = 0.05) -> dict:
    rng = np.random.default_rng(seed)
    x, y = toy_data(rng)
    grid = np.arange(-20.0, 20.0 + grid_step / 2, grid_step)
    curves, units = [], []
    for m in members:
        w, b = train_unit(m, x, y, rng)
        units.append({"loss": m.loss, "weight_decay": m.weight_decay,
                      "label_noise": m.label_noise, "w": w, "b": b})
        curves.append(1.0 / (1.0 + np.exp(-(w * grid + b))))
    curves = np.asarray(curves)
    average = curves.mean(axis=0)
    cross = crossing(grid, average)
    midpoint = (CENTERS[0] + CENTERS[1]) / 2
    return {
        "seed": seed,
        "grid": grid.tolist(),
        "members": units,
        "member_curves": curves.tolist(),
        "member_crossings": [crossing(grid, c) for c in curves],
        "average": average.tolist(),
        "crossing": cross,
        "midpoint": midpoint,
        "between_centers": cross is not None and CENTERS[0] < cross < CENTERS[1],
    }

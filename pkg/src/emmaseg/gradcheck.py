"""Central finite-difference checks of the analytic gradients.

Each check reduces an op's output to a scalar through a fixed random
projection, differentiates it on a tape, and compares against
``(f(x + h) - f(x - h)) / 2h`` evaluated entry by entry in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses
from .autodiff import nn
from .autodiff.tensor import Tape, Tensor, exp, log, mean, sigmoid, tsum
from .autodiff.tensor import relu as relu_op
from .errors import ConfigError

STEP = 1e-4
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    instance: int
    rel_error: float
    passed: bool


def _scalar(out: Tensor, proj: np.ndarray) -> Tensor:
    return tsum(out * proj)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute discrepancy scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = STEP,
                    seed: int = 0) -> float:
    """Return the worst relative error over every input with ``requires_grad``."""
    out = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    with Tape() as tape:
        loss = _scalar(fn(*inputs), proj)
    table = tape.backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = table.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _scalar(fn(*inputs), proj).item()
            flat[i] = orig - h
            f_minus = _scalar(fn(*inputs), proj).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _param(rng, *shape, low=None) -> Tensor:
    x = rng.standard_normal(shape)
    if low is not None:
        x = np.where(np.abs(x) < low, np.sign(x + 1e-30) * low + x, x)
    return Tensor(x, requires_grad=True)


def _simplex(rng, shape) -> Tensor:
    logits = 0.5 * rng.standard_normal(shape)
    e = np.exp(logits)
    return Tensor(e / e.sum(axis=nn.channel_axis(len(shape)), keepdims=True), requires_grad=True)


def _labels(rng, K, shape) -> np.ndarray:
    return rng.integers(0, K, size=shape)


def _case_conv_valid(rng):
    C, O = rng.integers(1, 3, size=2)
    return (lambda x, k: nn.conv3d(x, k, padding="valid"),
            [_param(rng, C, 4, 4, 4), _param(rng, O, C, 3, 3, 3)])


def _case_conv_same(rng):
    C, O = rng.integers(1, 3, size=2)
    k = int(rng.choice([1, 3]))
    return (lambda x, w: nn.conv3d(x, w, padding="zero_same"),
            [_param(rng, 2, C, 3, 4, 3), _param(rng, O, C, k, k, k)])


def _case_conv_strided(rng):
    C, O = rng.integers(1, 3, size=2)
    pad = str(rng.choice(["valid", "zero_same"]))
    return (lambda x, w: nn.conv3d(x, w, stride=2, padding=pad),
            [_param(rng, C, 5, 4, 5), _param(rng, O, C, 3, 2, 3)])


def _case_max_pool(rng):
    # distinct, well separated values keep every window away from a tie
    n = 2 * 4 * 4 * 4
    vals = rng.permutation(n) * 0.01 + 0.001 * rng.random(n)
    x = Tensor(vals.reshape(2, 4, 4, 4), requires_grad=True)
    stride = int(rng.choice([1, 2]))
    return (lambda t: nn.max_pool3d(t, 2, stride), [x])


def _case_downsample(rng):
    f = int(rng.choice([2, 3]))
    return (lambda t: nn.downsample_average(t, f), [_param(rng, 2, 2 * f, f, 2 * f)])


def _case_upsample_repeat(rng):
    f = int(rng.choice([2, 3]))
    return (lambda t: nn.upsample(t, f, "repeat"), [_param(rng, 2, 2, 1, 2)])


def _case_upsample_trilinear(rng):
    f = int(rng.choice([2, 3]))
    return (lambda t: nn.upsample(t, f, "trilinear"), [_param(rng, 2, 3, 2, 2)])


def _case_bn_train(rng):
    lead = (2,) if rng.random() < 0.5 else ()
    x = _param(rng, *lead, 2, 3, 3, 3)
    gamma = Tensor(1.0 + 0.3 * rng.standard_normal(2), requires_grad=True)
    beta = _param(rng, 2)
    return (lambda a, g, b: nn.batch_norm(a, g, b, None, None, training=True), [x, gamma, beta])


def _case_bn_eval(rng):
    x = _param(rng, 2, 3, 3, 3)
    gamma = _param(rng, 2)
    beta = _param(rng, 2)
    rm, rv = rng.standard_normal(2), 0.5 + rng.random(2)
    return (lambda a, g, b: nn.batch_norm(a, g, b, rm, rv, training=False), [x, gamma, beta])


def _case_relu(rng):
    return (relu_op, [_param(rng, 2, 3, 3, 3, low=0.05)])


def _case_softmax(rng):
    return (nn.softmax_channels, [_param(rng, int(rng.integers(2, 5)), 2, 3, 2)])


def _case_concat(rng):
    return (lambda a, b: nn.concat_channels(a, b), [_param(rng, 2, 2, 2, 2), _param(rng, 3, 2, 2, 2)])


def _case_add(rng):
    return (nn.add, [_param(rng, 2, 3, 2, 2), _param(rng, 2, 3, 2, 2)])


def _case_crop(rng):
    return (lambda t: nn.crop_center(t, (2, 3, 2)), [_param(rng, 2, 4, 5, 4)])


def _case_dropout(rng):
    seed = int(rng.integers(1 << 30))
    return (lambda t: nn.dropout(t, 0.5, np.random.default_rng(seed), training=True),
            [_param(rng, 2, 3, 3, 3)])


def _case_elementwise(rng):
    a = _param(rng, 2, 3, 2)
    b = Tensor(1.0 + rng.random((2, 3, 2)), requires_grad=True)
    return (lambda x, y: sigmoid(x) * y + exp(x * 0.5) / y - log(y) + mean(x * x, axis=0), [a, b])


def _case_cross_entropy(rng):
    K = int(rng.integers(2, 5))
    p = _simplex(rng, (K, 3, 3, 2))
    y = _labels(rng, K, (3, 3, 2))
    w = None if rng.random() < 0.5 else rng.random(K) + 0.1
    return (lambda q: losses.cross_entropy_loss(q, y, w), [p])


def _case_soft_dice(rng):
    K = int(rng.integers(2, 5))
    p = _simplex(rng, (2, K, 3, 2, 3))
    y = _labels(rng, K, (2, 3, 2, 3))
    return (lambda q: losses.soft_dice_loss(q, y), [p])


def _case_soft_iou(rng):
    K = int(rng.integers(2, 5))
    p = _simplex(rng, (K, 3, 3, 3))
    y = _labels(rng, K, (3, 3, 3))
    return (lambda q: losses.soft_iou_loss(q, y), [p])


def _case_two_layer(rng):
    K = 3
    x = Tensor(rng.standard_normal((2, 2, 5, 5, 5)))
    k1 = _param(rng, 3, 2, 3, 3, 3)
    gamma = Tensor(1.0 + 0.2 * rng.standard_normal(3), requires_grad=True)
    beta = _param(rng, 3)
    k2 = _param(rng, K, 3, 1, 1, 1)
    y = _labels(rng, K, (2, 3, 3, 3))

    def net(w1, g, b, w2):
        h = nn.conv3d(x, w1)
        h = relu_op(nn.batch_norm(h, g, b, None, None, training=True))
        return losses.cross_entropy_loss(nn.softmax_channels(nn.conv3d(h, w2)), y)

    return net, [k1, gamma, beta, k2]


OP_CASES: dict[str, Callable] = {
    "conv3d_valid": _case_conv_valid,
    "conv3d_same": _case_conv_same,
    "conv3d_strided": _case_conv_strided,
    "max_pool3d": _case_max_pool,
    "downsample_average": _case_downsample,
    "upsample_repeat": _case_upsample_repeat,
    "upsample_trilinear": _case_upsample_trilinear,
    "batch_norm_train": _case_bn_train,
    "batch_norm_eval": _case_bn_eval,
    "relu": _case_relu,
    "softmax_channels": _case_softmax,
    "concat_channels": _case_concat,
    "add": _case_add,
    "crop_center": _case_crop,
    "dropout": _case_dropout,
    "elementwise": _case_elementwise,
    "two_layer_net": _case_two_layer,
}

LOSS_CASES: dict[str, Callable] = {
    "cross_entropy": _case_cross_entropy,
    "soft_dice": _case_soft_dice,
    "soft_iou": _case_soft_iou,
}

SCOPES = {"ops": OP_CASES, "losses": LOSS_CASES, "all": {**OP_CASES, **LOSS_CASES}}


def run_suite(scope: str = "all", instances: int = 20, seed: int = 0,
              tolerance: float = TOLERANCE) -> list[CheckResult]:
    if scope in SCOPES:
        cases = SCOPES[scope]
    elif scope in SCOPES["all"]:
        cases = {scope: SCOPES["all"][scope]}
    else:
        raise ConfigError(f"unknown gradient-check scope {scope!r}; choose from "
                          f"{sorted(SCOPES)} or a single op name")
    results = []
    for name, make in cases.items():
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        for i in range(instances):
            fn, inputs = make(rng)
            err = check_gradients(fn, inputs, seed=i)
            results.append(CheckResult(name, i, err, err <= tolerance))
    return results

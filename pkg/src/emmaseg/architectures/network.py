"""Parameter sets for a :class:`NetworkSpec` and the forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..autodiff import nn
from ..autodiff.tensor import Tensor, add as badd, relu, reshape
from ..errors import CheckpointError, DimensionError
from .spec import NetworkSpec, infer_shapes, parameter_shapes


@dataclass
class NetworkInstance:
    spec: NetworkSpec
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def check(self) -> None:
        """Every conv layer has tensors of exactly the declared shapes."""
        expected = parameter_shapes(self.spec)
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise CheckpointError(f"{self.spec.spec_id}: missing parameters {missing[:5]}, "
                                  f"unexpected {extra[:5]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"{self.spec.spec_id}: parameter {name!r} has shape "
                                      f"{self.params[name].shape}, expected {shape}")


def init_network(spec: NetworkSpec, seed: int | np.random.Generator = 0,
                 dtype=np.float32) -> NetworkInstance:
    """He-normal (fan-in) kernels, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for name, shape in parameter_shapes(spec).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "gamma":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
        if kind == "gamma":
            layer = name.rsplit(".", 1)[0]
            buffers[f"{layer}.running_mean"] = np.zeros(shape, dtype=dtype)
            buffers[f"{layer}.running_var"] = np.ones(shape, dtype=dtype)
    return NetworkInstance(spec, params, buffers)


def _pathway_inputs(spec: NetworkSpec, inputs) -> dict[str, np.ndarray | Tensor]:
    if not isinstance(inputs, Mapping):
        if len(spec.pathways) != 1:
            raise DimensionError(f"{spec.spec_id} needs inputs for pathways "
                                 f"{[p.name for p in spec.pathways]}")
        inputs = {spec.pathways[0].name: inputs}
    return dict(inputs)


def check_pathway_alignment(spec: NetworkSpec, extents: Mapping[str, tuple]) -> tuple[int, ...]:
    """Output extents implied by each pathway must agree."""
    implied = {}
    for p in spec.pathways:
        ext = extents[p.name]
        implied[p.name] = tuple((n - p.margin) * p.factor for n in ext)
        if any(n - p.margin < 1 for n in ext):
            raise DimensionError(f"{spec.spec_id}: pathway {p.name!r} input {tuple(ext)} is smaller "
                                 f"than its receptive margin {p.margin}")
    if len(set(implied.values())) > 1:
        detail = ", ".join(f"pathway {k!r} -> {v}" for k, v in implied.items())
        raise DimensionError(f"{spec.spec_id}: misaligned pathway outputs: {detail}")
    return next(iter(implied.values()))


def forward(instance: NetworkInstance, inputs, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Class-probability map for ``inputs`` (``[C,D,H,W]`` or ``[N,C,D,H,W]`` per pathway).

    Dropout and batch-statistics normalisation are only active in training
    mode; inference is a deterministic function of parameters and inputs.
    """
    spec = instance.spec
    feeds = _pathway_inputs(spec, inputs)
    dtype = instance.dtype
    tensors = {k: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=dtype))
               for k, v in feeds.items()}
    extents = {k: t.shape[-3:] for k, t in tensors.items()}
    missing = [p.name for p in spec.pathways if p.name not in tensors]
    if missing:
        raise DimensionError(f"{spec.spec_id}: missing inputs for pathways {missing}")
    check_pathway_alignment(spec, extents)
    infer_shapes(spec, extents)
    if training and rng is None:
        rng = np.random.default_rng(0)
    P = instance.params
    acts: dict[str, Tensor] = {}
    for layer in spec.layers:
        if layer.op == "input":
            x = tensors[layer.name]
            if x.shape[nn.channel_axis(x.ndim)] != layer.channels:
                raise DimensionError(f"pathway {layer.name!r} expects {layer.channels} channels, "
                                     f"got shape {x.shape}")
            acts[layer.name] = x
            continue
        srcs = [acts[n] for n in layer.inputs]
        x = srcs[0]
        if layer.op == "conv":
            y = nn.conv3d(x, P[f"{layer.name}.weight"], layer.stride, layer.padding)
            bshape = (-1, 1, 1, 1)
            y = badd(y, reshape(P[f"{layer.name}.bias"], bshape))
            if layer.norm:
                y = nn.batch_norm(y, P[f"{layer.name}.gamma"], P[f"{layer.name}.beta"],
                                  instance.buffers[f"{layer.name}.running_mean"],
                                  instance.buffers[f"{layer.name}.running_var"], training)
        elif layer.op == "pool":
            y = nn.max_pool3d(x, layer.kernel, layer.stride)
        elif layer.op == "up":
            y = nn.upsample(x, layer.factor, "repeat")
        elif layer.op == "add":
            ext = tuple(min(s.shape[-3 + i] for s in srcs) for i in range(3))
            y = srcs[0] if srcs[0].shape[-3:] == ext else nn.crop_center(srcs[0], ext)
            for s in srcs[1:]:
                y = nn.add(y, s if s.shape[-3:] == ext else nn.crop_center(s, ext))
        elif layer.op == "concat":
            y = nn.concat_channels(*srcs)
        elif layer.op == "dropout":
            y = nn.dropout(x, layer.rate, rng, training)
        elif layer.op == "softmax":
            y = nn.softmax_channels(x)
        else:  # pragma: no cover - rejected by infer_shapes
            raise DimensionError(f"unknown layer op {layer.op!r}")
        if layer.act == "relu":
            y = relu(y)
        acts[layer.name] = y
    return acts[spec.layers[-1].name]

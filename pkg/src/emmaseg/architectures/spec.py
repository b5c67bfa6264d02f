"""Declarative network descriptions for the seven ensemble members.

A :class:`NetworkSpec` is a small DAG of :class:`Layer` records.  Builders
only assemble layer lists; shape inference, parameter counting, receptive
fields and the forward pass all interpret the same records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from ..autodiff.nn import conv_output_extents
from ..errors import DimensionError, ParameterError

N_MODALITIES = 4

LAYER_OPS = ("input", "conv", "pool", "up", "add", "concat", "dropout", "softmax")


@dataclass(frozen=True)
class Layer:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: str = "valid"
    norm: bool = False
    act: str | None = None
    factor: int = 1
    rate: float = 0.0

    @property
    def has_params(self) -> bool:
        return self.op == "conv"


@dataclass(frozen=True)
class Pathway:
    """Input branch: ``factor`` is its downsampling w.r.t. the volume grid,
    ``margin`` the number of voxels (in its own grid) lost to valid convs."""

    name: str
    factor: int = 1
    margin: int = 0


@dataclass(frozen=True)
class NetworkSpec:
    family: str
    variant: str
    n_classes: int
    layers: tuple[Layer, ...]
    pathways: tuple[Pathway, ...]
    train_output: int
    granularity: int
    width_scale: float = 1.0
    in_channels: int = N_MODALITIES
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {l.name: l for l in self.layers})

    @property
    def spec_id(self) -> str:
        return f"{self.family}/{self.variant}"

    @property
    def same_padded(self) -> bool:
        return all(p.margin == 0 for p in self.pathways)

    def layer(self, name: str) -> Layer:
        return self._index[name]

    def input_extents(self, output_extents) -> dict[str, tuple[int, int, int]]:
        """Per-pathway input extents that produce ``output_extents``."""
        out = _triple(output_extents)
        if any(o % self.granularity for o in out):
            raise DimensionError(
                f"{self.spec_id}: output extents {out} must be multiples of {self.granularity}")
        return {p.name: tuple(o // p.factor + p.margin for o in out) for p in self.pathways}

    @property
    def train_input_extents(self) -> dict[str, tuple[int, int, int]]:
        return self.input_extents(self.train_output)

    def validate(self) -> None:
        infer_shapes(self, self.train_input_extents)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise DimensionError(f"expected a triple, got {v!r}")
    return t


def infer_shapes(spec: NetworkSpec, input_extents: Mapping[str, tuple]) -> dict[str, tuple[int, tuple]]:
    """Propagate ``(channels, extents)`` through the layer chain.

    Raises :class:`DimensionError` on any inconsistency (width mismatch on
    an add, misaligned pathways on a concat, kernels larger than inputs).
    """
    shapes: dict[str, tuple[int, tuple]] = {}
    for layer in spec.layers:
        ins = [shapes[n] for n in layer.inputs]
        if layer.op == "input":
            if layer.name not in input_extents:
                raise DimensionError(f"{spec.spec_id}: missing input for pathway {layer.name!r}")
            shapes[layer.name] = (layer.channels, _triple(input_extents[layer.name]))
        elif layer.op == "conv":
            c, ext = ins[0]
            shapes[layer.name] = (layer.channels,
                                  conv_output_extents(ext, layer.kernel, layer.stride, layer.padding))
        elif layer.op == "pool":
            c, ext = ins[0]
            shapes[layer.name] = (c, conv_output_extents(ext, layer.kernel, layer.stride, "valid"))
        elif layer.op == "up":
            c, ext = ins[0]
            shapes[layer.name] = (c, tuple(n * layer.factor for n in ext))
        elif layer.op == "add":
            widths = {c for c, _ in ins}
            if len(widths) != 1:
                raise DimensionError(
                    f"{spec.spec_id}: add {layer.name!r} merges unequal widths "
                    f"{[shapes[n][0] for n in layer.inputs]} from {layer.inputs}")
            exts = [e for _, e in ins]
            smallest = tuple(min(e[i] for e in exts) for i in range(3))
            if any((e[i] - smallest[i]) % 2 for e in exts for i in range(3)):
                raise DimensionError(f"{spec.spec_id}: add {layer.name!r} cannot centre-crop {exts}")
            shapes[layer.name] = (ins[0][0], smallest)
        elif layer.op == "concat":
            exts = {e for _, e in ins}
            if len(exts) != 1:
                detail = ", ".join(f"{n}={shapes[n][1]}" for n in layer.inputs)
                raise DimensionError(f"{spec.spec_id}: concat {layer.name!r} misaligned: {detail}")
            shapes[layer.name] = (sum(c for c, _ in ins), ins[0][1])
        elif layer.op in ("dropout", "softmax"):
            shapes[layer.name] = ins[0]
        else:
            raise DimensionError(f"unknown layer op {layer.op!r}")
    return shapes


def output_extents(spec: NetworkSpec, input_extents: Mapping[str, tuple]) -> tuple[int, int, int]:
    return infer_shapes(spec, input_extents)[spec.layers[-1].name][1]


def layer_param_shapes(layer: Layer, in_channels: int) -> dict[str, tuple[int, ...]]:
    if layer.op != "conv":
        return {}
    k = layer.kernel
    shapes = {"weight": (layer.channels, in_channels, k, k, k), "bias": (layer.channels,)}
    if layer.norm:
        shapes["gamma"] = (layer.channels,)
        shapes["beta"] = (layer.channels,)
    return shapes


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = infer_shapes(spec, spec.train_input_extents)
    out = {}
    for layer in spec.layers:
        if layer.op == "conv":
            c_in = shapes[layer.inputs[0]][0]
            for key, shape in layer_param_shapes(layer, c_in).items():
                out[f"{layer.name}.{key}"] = shape
    return out


def parameter_count(spec: NetworkSpec) -> int:
    """Closed form: ``C_out*C_in*k^3 + C_out`` per conv, plus ``2*C_out`` if normalised."""
    shapes = infer_shapes(spec, spec.train_input_extents)
    total = 0
    for layer in spec.layers:
        if layer.op == "conv":
            c_in = shapes[layer.inputs[0]][0]
            total += layer.channels * c_in * layer.kernel ** 3 + layer.channels
            if layer.norm:
                total += 2 * layer.channels
    return total


def receptive_field(spec: NetworkSpec) -> dict[str, tuple[int, int, int]]:
    """Receptive field of one output voxel, per pathway, in volume voxels."""
    state: dict[str, dict[str, tuple[float, float]]] = {}
    for layer in spec.layers:
        if layer.op == "input":
            f = next(p.factor for p in spec.pathways if p.name == layer.name)
            state[layer.name] = {layer.name: (f, f)}
            continue
        merged: dict[str, tuple[float, float]] = {}
        for name in layer.inputs:
            for p, (rf, jump) in state[name].items():
                if p not in merged or rf > merged[p][0]:
                    merged[p] = (rf, jump)
        if layer.op in ("conv", "pool"):
            merged = {p: (rf + (layer.kernel - 1) * jump, jump * layer.stride)
                      for p, (rf, jump) in merged.items()}
        elif layer.op == "up":
            merged = {p: (rf, jump / layer.factor) for p, (rf, jump) in merged.items()}
        state[layer.name] = merged
    final = state[spec.layers[-1].name]
    return {p: (int(rf),) * 3 for p, (rf, _) in final.items()}


class _Builder:
    def __init__(self, width_scale: float):
        if width_scale <= 0:
            raise ParameterError(f"width_scale must be > 0, got {width_scale}")
        self.scale = width_scale
        self.layers: list[Layer] = []
        self.widths: dict[str, int] = {}

    def w(self, n: int) -> int:
        return max(1, int(round(n * self.scale)))

    def add(self, layer: Layer) -> str:
        self.layers.append(layer)
        if layer.op in ("conv", "input"):
            self.widths[layer.name] = layer.channels
        elif layer.op == "concat":
            self.widths[layer.name] = sum(self.widths[n] for n in layer.inputs)
        else:
            self.widths[layer.name] = self.widths[layer.inputs[0]]
        return layer.name

    def input(self, name: str) -> str:
        return self.add(Layer(name, "input", channels=N_MODALITIES))

    def conv(self, name, src, width, kernel=3, padding="valid", stride=1, norm=True, act="relu",
             scaled=True) -> str:
        return self.add(Layer(name, "conv", (src,), channels=self.w(width) if scaled else width,
                              kernel=kernel, stride=stride, padding=padding, norm=norm, act=act))

    def residual(self, name, branch, shortcut, padding="valid", act=None) -> str:
        """``branch + shortcut``; a 1^3 projection is inserted when widths differ."""
        if self.widths[branch] != self.widths[shortcut]:
            shortcut = self.add(Layer(f"{name}.proj", "conv", (shortcut,),
                                      channels=self.widths[branch], kernel=1, padding=padding))
        return self.add(Layer(name, "add", (branch, shortcut), act=act))


def build_deepmedic(variant: str = "base", n_classes: int = 4, width_scale: float = 1.0) -> NetworkSpec:
    """Dual-pathway valid-convolution network (normal + 3x downsampled context)."""
    if variant not in ("base", "wide"):
        raise ParameterError(f"unknown DeepMedic variant {variant!r}")
    _check_classes(n_classes)
    mult = 2 if variant == "wide" else 1
    widths = [mult * w for w in (30, 30, 40, 40, 40, 40, 50, 50)]
    b = _Builder(width_scale)
    tails = {}
    for path in ("normal", "low"):
        prev = b.input(path)
        outs = {}
        for i, width in enumerate(widths, start=1):
            prev = outs[i] = b.conv(f"{path}.conv{i}", prev, width)
            if i in (4, 6, 8):
                skip = outs[i - 2] if i == 4 else f"{path}.res{i - 2}"
                prev = b.residual(f"{path}.res{i}", prev, skip)
        tails[path] = prev
    up = b.add(Layer("low.up", "up", (tails["low"],), factor=3))
    prev = b.add(Layer("merge", "concat", (tails["normal"], up)))
    prev = b.conv("fc1", prev, 150 * mult, kernel=1)
    prev = b.conv("fc2", prev, 150 * mult, kernel=1)
    prev = b.conv("classifier", prev, n_classes, kernel=1, norm=False, act=None, scaled=False)
    b.add(Layer("probs", "softmax", (prev,)))
    margin = 2 * len(widths)
    spec = NetworkSpec("deepmedic", variant, n_classes, tuple(b.layers),
                       (Pathway("normal", 1, margin), Pathway("low", 3, margin)),
                       train_output=9 if variant == "base" else 18, granularity=3,
                       width_scale=width_scale)
    spec.validate()
    return spec


FCN_SCALES = ((16, 16), (32, 32), (64, 64, 64), (128, 128, 128), (256, 256, 256))


def build_fcn(variant: str = "vgg", n_classes: int = 4, width_scale: float = 1.0) -> NetworkSpec:
    """Multi-scale FCN whose per-scale features are upsampled and concatenated."""
    if variant not in ("vgg", "residual", "residual_shallow"):
        raise ParameterError(f"unknown FCN variant {variant!r}")
    _check_classes(n_classes)
    n_scales = 4 if variant == "residual_shallow" else 5
    b = _Builder(width_scale)
    prev = b.input("normal")
    taps = []
    for s in range(n_scales):
        if s:
            prev = b.add(Layer(f"s{s + 1}.pool", "pool", (prev,), kernel=2, stride=2))
        if variant != "vgg" and s == 2:
            for blk in range(4):
                c1 = b.conv(f"s3.block{blk}.conv1", prev, 64, padding="zero_same")
                c2 = b.conv(f"s3.block{blk}.conv2", c1, 64, padding="zero_same", act=None)
                prev = b.residual(f"s3.block{blk}", c2, prev, padding="zero_same", act="relu")
        elif variant != "vgg" and s == 3:
            for blk in range(4):
                c1 = b.conv(f"s4.block{blk}.conv1", prev, 128, kernel=1, padding="zero_same")
                c2 = b.conv(f"s4.block{blk}.conv2", c1, 128, padding="zero_same")
                c3 = b.conv(f"s4.block{blk}.conv3", c2, 512, kernel=1, padding="zero_same", act=None)
                prev = b.residual(f"s4.block{blk}", c3, prev, padding="zero_same", act="relu")
        else:
            for i, width in enumerate(FCN_SCALES[s], start=1):
                prev = b.conv(f"s{s + 1}.conv{i}", prev, width, padding="zero_same")
        taps.append(prev if s == 0 else b.add(Layer(f"s{s + 1}.up", "up", (prev,), factor=2 ** s)))
    prev = b.add(Layer("merge", "concat", tuple(taps)))
    prev = b.conv("head1", prev, 64, kernel=1, padding="zero_same")
    prev = b.conv("head2", prev, 64, kernel=1, padding="zero_same")
    prev = b.conv("classifier", prev, n_classes, kernel=1, padding="zero_same", norm=False,
                  act=None, scaled=False)
    b.add(Layer("probs", "softmax", (prev,)))
    spec = NetworkSpec("fcn", variant, n_classes, tuple(b.layers), (Pathway("normal"),),
                       train_output=64 if variant == "vgg" else 80,
                       granularity=2 ** (n_scales - 1), width_scale=width_scale)
    spec.validate()
    return spec


def build_unet(variant: str = "sum_skip", n_classes: int = 4, width_scale: float = 1.0) -> NetworkSpec:
    """Three-level 3D U-Net with summed or concatenated skip connections."""
    if variant not in ("sum_skip", "concat_skip"):
        raise ParameterError(f"unknown U-Net variant {variant!r}")
    _check_classes(n_classes)
    b = _Builder(width_scale)
    same = {"padding": "zero_same"}
    prev = b.input("normal")
    skips = []
    for level, width in enumerate((16, 32, 64), start=1):
        if level > 1:
            if variant == "sum_skip":
                prev = b.add(Layer(f"enc{level}.pool", "pool", (prev,), kernel=2, stride=2))
            else:
                prev = b.conv(f"enc{level}.down", prev, width, stride=2, **same)
        prev = b.conv(f"enc{level}.conv1", prev, width, **same)
        prev = b.conv(f"enc{level}.conv2", prev, width, **same)
        skips.append(prev)
    if variant == "sum_skip":
        prev = b.add(Layer("bottom.pool", "pool", (prev,), kernel=2, stride=2))
    else:
        prev = b.conv("bottom.down", prev, 128, stride=2, **same)
    prev = b.conv("bottom.conv1", prev, 128, **same)
    prev = b.conv("bottom.conv2", prev, 128, **same)
    prev = b.add(Layer("bottom.dropout", "dropout", (prev,), rate=0.5))
    for level, width in ((3, 64), (2, 32), (1, 16)):
        prev = b.add(Layer(f"dec{level}.up", "up", (prev,), factor=2))
        prev = b.conv(f"dec{level}.conv1", prev, width, **same)
        skip = skips[level - 1]
        if variant == "sum_skip":
            if b.widths[prev] != b.widths[skip]:
                raise DimensionError(f"sum skip at level {level} needs equal widths, "
                                     f"got {b.widths[prev]} and {b.widths[skip]}")
            prev = b.add(Layer(f"dec{level}.merge", "add", (prev, skip)))
        else:
            prev = b.add(Layer(f"dec{level}.merge", "concat", (prev, skip)))
        prev = b.conv(f"dec{level}.conv2", prev, width, **same)
        if level > 1:
            prev = b.add(Layer(f"dec{level}.dropout", "dropout", (prev,), rate=0.5))
    prev = b.conv("classifier", prev, n_classes, norm=False, act=None, scaled=False, **same)
    b.add(Layer("probs", "softmax", (prev,)))
    spec = NetworkSpec("unet", variant, n_classes, tuple(b.layers), (Pathway("normal"),),
                       train_output=64, granularity=8, width_scale=width_scale)
    spec.validate()
    return spec


def _check_classes(n_classes: int) -> None:
    if n_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {n_classes}")


BUILDERS = {"deepmedic": build_deepmedic, "fcn": build_fcn, "unet": build_unet}

SPEC_IDS = ("deepmedic/base", "deepmedic/wide", "fcn/vgg", "fcn/residual",
            "fcn/residual_shallow", "unet/sum_skip", "unet/concat_skip")


def build_spec(spec_id: str, n_classes: int = 4, width_scale: float = 1.0) -> NetworkSpec:
    """Build a spec from its ``family/variant`` identifier."""
    try:
        family, variant = spec_id.split("/")
        builder = BUILDERS[family]
    except (ValueError, KeyError):
        raise ParameterError(f"unknown architecture {spec_id!r}; choose from {SPEC_IDS}") from None
    return builder(variant, n_classes, width_scale)

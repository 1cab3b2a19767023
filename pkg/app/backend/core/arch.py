"""Architecture strings such as ``C5@20-MP2S2-C5@50-MP2S2-FC500-D0.5-OUT``.

Grammar (case-sensitive, tokens joined by ``-``)::

    C<k>[(S<s>)][(P<p>)]@<n>    convolution, also C<k>(S<s>P<p>)@<n>
    MP<k>[S<s>] | MP<k>(S<s>)   max-pooling, stride defaults to k
    FC<n>                       fully-connected
    D<r>                        dropout with drop ratio r
    DCL<T>[D|S]@<M>[/<K2>]      DCL block, T branches of M filters fused to K2 (default 5*M)
    OUT                         output FC with num_classes filters

Conv and hidden FC layers carry a ReLU. A SoftmaxLoss closes every network.
"""

import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

from pydantic import ValidationError

from app.backend.core.errors import ParseError, ShapeChainError, ShapeMismatch
from app.backend.core.schemas import DclConfig, DclOverrides, Strategy
from app.backend.core.tensor import conv_output_extent, element_count, pool_output_extent

logger = logging.getLogger(__name__)

Shape = tuple[int, int, int]


class LayerKind(str, Enum):
    CONV = "Conv"
    MAXPOOL = "MaxPool"
    FC = "FullyConnected"
    RELU = "ReLU"
    DROPOUT = "Dropout"
    DCL = "DclBlock"
    LOSS = "SoftmaxLoss"


TRAINABLE = (LayerKind.CONV, LayerKind.FC, LayerKind.DCL)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    filters: int = 0
    relu: bool = False
    drop_ratio: Optional[float] = None
    dcl: Optional[DclConfig] = None
    is_output: bool = False

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ValueError(f"bad geometry kernel={self.kernel} stride={self.stride} pad={self.pad}")
        if self.kind in (LayerKind.CONV, LayerKind.FC) and self.filters < 1:
            raise ValueError(f"{self.kind.value} needs filters >= 1")
        if (self.drop_ratio is not None) != (self.kind is LayerKind.DROPOUT):
            raise ValueError("drop_ratio is set exactly for Dropout layers")
        if self.drop_ratio is not None and not 0.0 <= self.drop_ratio < 1.0:
            raise ValueError(f"drop ratio must lie in [0, 1), got {self.drop_ratio}")
        if (self.dcl is not None) != (self.kind is LayerKind.DCL):
            raise ValueError("dcl config is set exactly for DclBlock layers")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: Shape
    num_classes: int
    shapes: tuple[Shape, ...] = field(default=())   # shapes[i] is the input of layers[i]; last is the output

    def in_shape(self, index: int) -> Shape:
        return self.shapes[index]

    def out_shape(self, index: int) -> Shape:
        return self.shapes[index + 1]


def normalize_shape(shape: Sequence[int]) -> Shape:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 1:
        dims = (dims[0], 1, 1)
    if len(dims) != 3:
        raise ShapeMismatch(f"input shape must be (C, H, W) or (K,), got {shape}")
    element_count(dims)
    return dims


# --- shape chaining ---

def _chain_one(index: int, layer: LayerSpec, shape: Shape) -> tuple[LayerSpec, Shape]:
    c, h, w = shape
    try:
        if layer.kind is LayerKind.CONV:
            oh = conv_output_extent(h, layer.kernel, layer.stride, layer.pad)
            ow = conv_output_extent(w, layer.kernel, layer.stride, layer.pad)
            return layer, (layer.filters, oh, ow)
        if layer.kind is LayerKind.MAXPOOL:
            return layer, (c, pool_output_extent(h, layer.kernel, layer.stride),
                           pool_output_extent(w, layer.kernel, layer.stride))
        if layer.kind is LayerKind.FC:
            return layer, (layer.filters, 1, 1)
        if layer.kind in (LayerKind.RELU, LayerKind.DROPOUT, LayerKind.LOSS):
            return layer, shape
        if layer.kind is LayerKind.DCL:
            cfg = layer.dcl
            if cfg.kernel is None:
                if h != w:
                    raise ShapeChainError(f"full-extent DCL block needs a square input, got {shape}", index)
                layer = replace(layer, kernel=h, stride=1, pad=0)
            else:
                layer = replace(layer, kernel=cfg.kernel, stride=cfg.stride, pad=cfg.pad)
            oh = conv_output_extent(h, layer.kernel, layer.stride, layer.pad)
            ow = conv_output_extent(w, layer.kernel, layer.stride, layer.pad)
            return layer, (cfg.K2, oh, ow)
    except ShapeMismatch as e:
        raise ShapeChainError(str(e), index) from e
    raise ShapeChainError(f"unknown layer kind {layer.kind}", index)


def build_network_spec(layers: Sequence[LayerSpec], input_shape: Sequence[int], num_classes: int) -> NetworkSpec:
    """Chain shapes through the layers and check the SoftmaxLoss closes the network."""
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    shape = normalize_shape(input_shape)
    shapes = [shape]
    resolved = []
    for i, layer in enumerate(layers):
        if layer.kind is LayerKind.LOSS and i != len(layers) - 1:
            raise ShapeChainError("SoftmaxLoss must be the last layer", i)
        layer, shape = _chain_one(i, layer, shape)
        resolved.append(layer)
        shapes.append(shape)
    if not resolved or resolved[-1].kind is not LayerKind.LOSS:
        raise ShapeChainError("network must end with a SoftmaxLoss", len(resolved))
    last = len(resolved) - 1
    if shapes[last] != (num_classes, 1, 1):
        raise ShapeChainError(f"loss input {shapes[last]} does not match {num_classes} classes", last)
    return NetworkSpec(tuple(resolved), shapes[0], num_classes, tuple(shapes))


# --- parsing ---

_CONV = re.compile(r"C(\d+)((?:\([SP0-9]+\))*)@(\d+)")
_CONV_GROUP = re.compile(r"\(((?:S\d+)?(?:P\d+)?)\)")
_POOL = re.compile(r"MP(\d+)(?:S(\d+)|\(S(\d+)\))?")
_FC = re.compile(r"FC(\d+)")
_DROP = re.compile(r"D(\d*\.?\d+)")
_DCL = re.compile(r"DCL(\d+)([DS]?)@(\d+)(?:/(\d+))?")


def _conv_geometry(groups: str, position: int) -> tuple[int, int]:
    stride, pad = 1, 0
    if not groups:
        return stride, pad
    consumed = 0
    for m in _CONV_GROUP.finditer(groups):
        if m.start() != consumed or not m.group(1):
            raise ParseError(f"malformed stride/pad group {groups!r}", position)
        consumed = m.end()
        s = re.search(r"S(\d+)", m.group(1))
        p = re.search(r"P(\d+)", m.group(1))
        if s:
            stride = int(s.group(1))
        if p:
            pad = int(p.group(1))
    if consumed != len(groups):
        raise ParseError(f"malformed stride/pad group {groups!r}", position)
    return stride, pad


def _dcl_layer(m: re.Match, position: int, overrides: Optional[DclOverrides]) -> LayerSpec:
    T, letter, M = int(m.group(1)), m.group(2), int(m.group(3))
    K2 = int(m.group(4)) if m.group(4) else 5 * M
    strategy = Strategy.STOCHASTIC if letter == "S" else Strategy.DETERMINISTIC
    fields: dict = {"T": T, "M": (M,) * T, "K2": K2, "strategy": strategy}
    if overrides is not None:
        fields.update({k: v for k, v in overrides.model_dump().items() if v is not None})
    try:
        cfg = DclConfig(**fields)
    except ValidationError as e:
        raise ParseError(f"invalid DCL block: {e.errors()[0]['msg']}", position) from e
    return LayerSpec(LayerKind.DCL, dcl=cfg)


def _tokenize(text: str) -> list[str]:
    cleaned = "".join(text.split()).rstrip(".")
    if not cleaned:
        raise ParseError("empty architecture string", 1)
    return cleaned.split("-")


def _parse_token(token: str, position: int, num_classes: int,
                 dcl_overrides: Optional[DclOverrides]) -> LayerSpec:
    if token == "OUT":
        return LayerSpec(LayerKind.FC, filters=num_classes, is_output=True)
    if m := _DCL.fullmatch(token):
        return _dcl_layer(m, position, dcl_overrides)
    if m := _CONV.fullmatch(token):
        stride, pad = _conv_geometry(m.group(2), position)
        return LayerSpec(LayerKind.CONV, kernel=int(m.group(1)), stride=stride, pad=pad,
                         filters=int(m.group(3)), relu=True)
    if m := _POOL.fullmatch(token):
        kernel = int(m.group(1))
        stride = int(m.group(2) or m.group(3) or kernel)
        return LayerSpec(LayerKind.MAXPOOL, kernel=kernel, stride=stride)
    if m := _FC.fullmatch(token):
        return LayerSpec(LayerKind.FC, filters=int(m.group(1)), relu=True)
    if m := _DROP.fullmatch(token):
        return LayerSpec(LayerKind.DROPOUT, drop_ratio=float(m.group(1)))
    raise ParseError(f"unrecognised token {token!r}", position)


def parse_layers(text: str, num_classes: int, dcl_overrides: Optional[DclOverrides] = None) -> list[LayerSpec]:
    tokens = _tokenize(text)
    layers: list[LayerSpec] = []
    for position, token in enumerate(tokens, start=1):
        if layers and layers[-1].is_output:
            raise ParseError("OUT must be the last token", position)
        try:
            layers.append(_parse_token(token, position, num_classes, dcl_overrides))
        except ParseError:
            raise
        except ValueError as e:
            # LayerSpec geometry checks: zero kernels, ratios outside [0, 1)
            raise ParseError(f"{token!r}: {e}", position) from e

    # the final trainable layer produces logits: no ReLU on it
    last = layers[-1]
    if last.kind is LayerKind.FC:
        layers[-1] = replace(last, relu=False)
    elif last.kind is not LayerKind.DCL:
        raise ParseError("network must end with OUT, FC<n> or a DCL block", len(tokens))
    layers.append(LayerSpec(LayerKind.LOSS))
    return layers


def parse_arch(
    text: str,
    input_shape: Sequence[int] = (1, 28, 28),
    num_classes: int = 100,
    dcl_overrides: Optional[DclOverrides] = None,
) -> NetworkSpec:
    layers = parse_layers(text, num_classes, dcl_overrides)
    return build_network_spec(layers, input_shape, num_classes)


# --- rendering ---

def _render_layer(layer: LayerSpec) -> str:
    if layer.kind is LayerKind.CONV:
        group = ""
        if layer.stride != 1 and layer.pad:
            group = f"(S{layer.stride}P{layer.pad})"
        elif layer.stride != 1:
            group = f"(S{layer.stride})"
        elif layer.pad:
            group = f"(P{layer.pad})"
        return f"C{layer.kernel}{group}@{layer.filters}"
    if layer.kind is LayerKind.MAXPOOL:
        return f"MP{layer.kernel}S{layer.stride}"
    if layer.kind is LayerKind.FC:
        return "OUT" if layer.is_output else f"FC{layer.filters}"
    if layer.kind is LayerKind.DROPOUT:
        return f"D{layer.drop_ratio:g}"
    if layer.kind is LayerKind.DCL:
        cfg = layer.dcl
        if len(set(cfg.M)) != 1:
            raise ValueError("unequal branch widths have no token form; use the JSON dcl section")
        if cfg.kernel is not None:
            raise ValueError("convolutional DCL geometry has no token form; use the JSON dcl section")
        letter = "" if cfg.T == 2 else ("S" if cfg.strategy is Strategy.STOCHASTIC else "D")
        return f"DCL{cfg.T}{letter}@{cfg.M[0]}/{cfg.K2}"
    raise ValueError(f"{layer.kind.value} has no token form")


def render_arch(spec: NetworkSpec) -> str:
    return "-".join(_render_layer(layer) for layer in spec.layers if layer.kind is not LayerKind.LOSS)


# --- named architectures ---

LENET = "C5@20-MP2S2-C5@50-MP2S2-FC500-D0.5-OUT"
LENET_TINY = "C5@4-MP2S2-C5@8-MP2S2-FC16-D0.5-OUT"
LENET_CIFAR = "C5(P2)@32-MP3(S2)-C5(P2)@64-MP3(S2)-C5(P2)@128-MP3(S2)-FC512-D0.5-OUT"
ALEXNET = (
    "C11(S4)@96-MP3(S2)-C5(S1P2)@256-MP3(S2)-"
    "C3(S1P1)@384-C3(S1P1)@384-C3(S1P1)@256-"
    "MP3(S2)-FC4096-D0.5-FC4096-D0.5-FC1000"
)

NAMED_ARCHS = {
    "lenet": (LENET, (1, 28, 28)),
    "lenet-tiny": (LENET_TINY, (1, 16, 16)),
    "lenet-cifar": (LENET_CIFAR, (3, 32, 32)),
    "alexnet": (ALEXNET, (3, 227, 227)),
}

# A: замена FC500, B: замена выходного слоя
VARIANTS = ("baseline", "DCL-A2", "DCL-A3D", "DCL-A3S", "DCL-B2", "DCL-B3D", "DCL-B3S")


def variant_arch(variant: str, num_classes: int, tiny: bool = False) -> str:
    """LeNet with its first (A) or second (B) FC layer replaced by a DCL block.

    Each branch keeps 1/5 of the replaced layer's filters.
    """
    base = LENET_TINY if tiny else LENET
    if variant == "baseline":
        return base
    m = re.fullmatch(r"DCL-([AB])(2|3D|3S)", variant)
    if not m:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    position, form = m.groups()
    T = int(form[0])
    letter = form[1:] if T > 2 else ""
    tokens = base.split("-")
    if position == "A":
        index = next(i for i, t in enumerate(tokens) if t.startswith("FC"))
        width = int(tokens[index][2:])
    else:
        index = tokens.index("OUT")
        width = num_classes
    tokens[index] = f"DCL{T}{letter}@{max(1, width // 5)}/{width}"
    return "-".join(tokens)


def resolve_arch(name: str, num_classes: int) -> tuple[str, Optional[Shape]]:
    """Architecture string for a named arch, a variant (``DCL-A2``, ``DCL-B3S-tiny``) or a literal string.

    The shape is the named arch's native input, or None when the data decides.
    """
    if name in NAMED_ARCHS:
        text, shape = NAMED_ARCHS[name]
        return text, shape
    tiny = name.endswith("-tiny")
    variant = name[:-len("-tiny")] if tiny else name
    if variant in VARIANTS:
        return variant_arch(variant, num_classes, tiny=tiny), None
    return name, None

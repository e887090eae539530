"""
Architecture notation: parsing, rendering, shape inference and network building.

Grammar (whitespace is ignored, brace groups only group):

    arch  := group+ ['.']
    group := '{' layer ('-' layer)* '}'
    layer := C<k>(S<s>[P<p>])@<d> | MP<k>(S<s>) | AP<k>(S<s>) | FC<n> | D<ratio>
           | G1(<sigma>) | G2(<sigma>) | GB(<std>)
"""

import logging
import re
from typing import Iterable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from ..core.exceptions import ArchParseError, PlacementError, ShapeError
from ..schemas.arch import (
    POOL_TYPES,
    ArchSpec,
    AvgPool,
    Conv,
    Dropout,
    Fc,
    GaussBlur,
    Gnpp,
    MaxPool,
)
from ..schemas.gnpp import NeighborhoodType
from .layer_service import (
    Conv2D,
    DropoutLayer,
    FullyConnected,
    GaussianBlurLayer,
    GnppLayer,
    Pool2D,
    ReLU,
    conv_out_dim,
    pool_out_dim,
)
from .network_service import Network
from .tensor_service import Shape4, validate_shape

logger = logging.getLogger(__name__)

ARCH_PRESETS = {
    "lenet2": "{C5(S1P0)@20-MP2(S2)}{C5(S1P0)@50-MP2(S2)}{FC500}{FC10}",
    "lenet3": "{C5(S1P2)@32-MP3(S2)}{C5(S1P2)@32-AP3(S2)}{C5(S1P2)@64-AP3(S2)}{FC10}",
    "lenet3-c100": "{C5(S1P2)@32-MP3(S2)}{C5(S1P2)@32-AP3(S2)}{C5(S1P2)@64-AP3(S2)}{FC100}",
    "alexnet": (
        "{C11(S4)@96-MP3(S2)}{C5(S1P2)@256-MP3(S2)}{C3(S1P1)@384}{C3(S1P1)@384}"
        "{C3(S1P1)@256-MP3(S2)}{FC4096-D0.5}{FC4096-D0.5}{FC1000}"
    ),
    "alexnet2": (
        "{C11(S4)@96-MP3(S2)}{C5(S1P2)@256-MP3(S2)}{C3(S1P1)@384}{C3(S1P1)@384}"
        "{C3(S1P1)@512-MP3(S2)}{FC4096-D0.5}{FC4096-D0.5}{FC1000}"
    ),
}

_INT = re.compile(rb"\d+")
_FLOAT = re.compile(rb"(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.data = text.encode("utf-8")
        self.pos = 0

    def fail(self, detail: str, offset: Optional[int] = None):
        raise ArchParseError(detail, self.pos if offset is None else offset)

    def skip_ws(self):
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isspace():
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.data)

    def peek(self, literal: str) -> bool:
        self.skip_ws()
        return self.data.startswith(literal.encode(), self.pos)

    def expect(self, literal: str, context: str = ""):
        if not self.peek(literal):
            if self.pos >= len(self.data):
                if literal == "}":
                    self.fail("unbalanced brace: expected '}' before end of input")
                self.fail(f"expected '{literal}'{context} but reached end of input")
            found = self.data[self.pos:self.pos + 1].decode("utf-8", "replace")
            self.fail(f"expected '{literal}'{context}, found '{found}'")
        self.pos += len(literal)

    def number(self, pattern: re.Pattern, what: str) -> str:
        self.skip_ws()
        match = pattern.match(self.data, self.pos)
        if not match:
            self.fail(f"malformed number: expected {what}")
        self.pos = match.end()
        return match.group().decode()

    def integer(self, what: str) -> int:
        return int(self.number(_INT, what))

    def real(self, what: str) -> float:
        return float(self.number(_FLOAT, what))

    def layer(self):
        self.skip_ws()
        start = self.pos
        try:
            if self.peek("MP") or self.peek("AP"):
                cls = MaxPool if self.peek("MP") else AvgPool
                self.pos += 2
                k = self.integer("pool size")
                self.expect("(")
                self.expect("S")
                stride = self.integer("stride")
                self.expect(")")
                return cls(k=k, stride=stride)
            if self.peek("FC"):
                self.pos += 2
                return Fc(out=self.integer("output width"))
            if self.peek("GB"):
                self.pos += 2
                self.expect("(")
                std = self.real("blur std")
                self.expect(")")
                return GaussBlur(std=std)
            if self.peek("G1") or self.peek("G2"):
                nb_type = NeighborhoodType.TYPE1 if self.peek("G1") else NeighborhoodType.TYPE2
                self.pos += 2
                self.expect("(")
                sigma = self.real("smoothing parameter")
                self.expect(")")
                return Gnpp(nb_type=nb_type, sigma=sigma)
            if self.peek("C"):
                self.pos += 1
                k = self.integer("kernel size")
                self.expect("(")
                self.expect("S")
                stride = self.integer("stride")
                pad = 0
                if self.peek("P"):
                    self.pos += 1
                    pad = self.integer("padding")
                self.expect(")")
                self.expect("@")
                out_channels = self.integer("output channels")
                return Conv(k=k, stride=stride, pad=pad, out_channels=out_channels)
            if self.peek("D"):
                self.pos += 1
                return Dropout(ratio=self.real("dropout ratio"))
        except ValidationError as e:
            message = e.errors()[0].get("msg", str(e))
            self.fail(f"invalid layer parameters: {message}", offset=start)
        if self.at_end():
            self.fail("expected a layer token but reached end of input")
        self.fail("unknown token: expected one of C, MP, AP, FC, D, G1, G2, GB")

    def parse(self) -> ArchSpec:
        layers = []
        if self.at_end():
            self.fail("empty architecture: expected '{'")
        while not self.at_end():
            if self.peek("."):
                self.pos += 1
                if not self.at_end():
                    self.fail("unexpected text after the final '.'")
                break
            if self.peek("}"):
                self.fail("unbalanced brace: '}' without matching '{'")
            self.expect("{")
            layers.append(self.layer())
            while self.peek("-"):
                self.pos += 1
                layers.append(self.layer())
            self.expect("}", " or '-' after layer token")
        if not isinstance(layers[-1], Fc):
            self.fail("final layer must be a fully-connected classifier (FC<n>)", offset=len(self.data))
        return ArchSpec(layers=layers, source_text=self.text)


def parse_arch(text: str) -> ArchSpec:
    return _Parser(text).parse()


def resolve_arch(text: str) -> ArchSpec:
    """Accept a preset name or a literal architecture string."""
    return parse_arch(ARCH_PRESETS.get(text.strip(), text))


def layer_token(layer) -> str:
    if isinstance(layer, Conv):
        return f"C{layer.k}(S{layer.stride}P{layer.pad})@{layer.out_channels}"
    if isinstance(layer, MaxPool):
        return f"MP{layer.k}(S{layer.stride})"
    if isinstance(layer, AvgPool):
        return f"AP{layer.k}(S{layer.stride})"
    if isinstance(layer, Fc):
        return f"FC{layer.out}"
    if isinstance(layer, Dropout):
        return f"D{layer.ratio!r}"
    if isinstance(layer, Gnpp):
        return f"{layer.nb_type.token}({layer.sigma!r})"
    if isinstance(layer, GaussBlur):
        return f"GB({layer.std!r})"
    raise TypeError(f"unknown layer descriptor {layer!r}")


def render_arch(arch: ArchSpec) -> str:
    """Text form of an ArchSpec; a new brace group starts at every Conv and Fc."""
    groups: List[List[str]] = []
    for layer in arch.layers:
        if not groups or isinstance(layer, (Conv, Fc)):
            groups.append([])
        groups[-1].append(layer_token(layer))
    return "".join("{" + "-".join(group) + "}" for group in groups)


def _rebuild(layers: Sequence) -> ArchSpec:
    arch = ArchSpec(layers=list(layers))
    return arch.model_copy(update={"source_text": render_arch(arch)})


def strip_gnpp(arch: ArchSpec) -> ArchSpec:
    return _rebuild([layer for layer in arch.layers if not isinstance(layer, Gnpp)])


def insert_before_pools(arch: ArchSpec, pool_ordinals: Iterable[int], make_layer) -> ArchSpec:
    """Insert `make_layer()` before the selected pools (0-based among pools).

    A layer of the same kind already sitting in front of a selected pool is replaced.
    """
    pools = arch.pool_indices()
    chosen = set(pool_ordinals)
    bad = [o for o in chosen if not 0 <= o < len(pools)]
    if bad:
        raise PlacementError(f"pool ordinals {sorted(bad)} out of range; arch has {len(pools)} pools", bad[0])
    targets = {pools[o] for o in chosen}
    new_layer = make_layer()
    layers = []
    for i, layer in enumerate(arch.layers):
        if i in targets:
            if layers and type(layers[-1]) is type(new_layer):
                layers.pop()
            layers.append(new_layer)
        layers.append(layer)
    return _rebuild(layers)


def with_gnpp(arch: ArchSpec, pool_ordinals: Iterable[int], nb_type: NeighborhoodType, sigma: float) -> ArchSpec:
    return insert_before_pools(arch, pool_ordinals, lambda: Gnpp(nb_type=nb_type, sigma=sigma))


def with_blur(arch: ArchSpec, pool_ordinals: Iterable[int], std: float) -> ArchSpec:
    return insert_before_pools(arch, pool_ordinals, lambda: GaussBlur(std=std))


def validate_placement(arch: ArchSpec) -> None:
    """GNPP may only sit directly in front of a pooling layer."""
    for i, layer in enumerate(arch.layers):
        if not isinstance(layer, Gnpp):
            continue
        nxt = arch.layers[i + 1] if i + 1 < len(arch.layers) else None
        if not isinstance(nxt, POOL_TYPES):
            following = layer_token(nxt) if nxt is not None else "end of network"
            raise PlacementError(f"GNPP must be followed by a pooling layer, found {following}", i)


def shape_infer(arch: ArchSpec, input_shape) -> List[Shape4]:
    """Output shape of every arch layer for the given (n, c, h, w) input."""
    shape = validate_shape(input_shape)
    shapes = []
    for i, layer in enumerate(arch.layers):
        n, c, h, w = shape
        try:
            if isinstance(layer, Conv):
                shape = Shape4(
                    n,
                    layer.out_channels,
                    conv_out_dim(h, layer.k, layer.stride, layer.pad),
                    conv_out_dim(w, layer.k, layer.stride, layer.pad),
                )
            elif isinstance(layer, POOL_TYPES):
                if layer.k > h and layer.k > w:
                    raise ShapeError(f"pool window {layer.k} larger than input {h}x{w}")
                shape = Shape4(n, c, pool_out_dim(h, layer.k, layer.stride), pool_out_dim(w, layer.k, layer.stride))
            elif isinstance(layer, Fc):
                shape = Shape4(n, layer.out, 1, 1)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({layer_token(layer)}): {e.detail}") from e
        shapes.append(shape)
    return shapes


def count_params(arch: ArchSpec, input_shape) -> int:
    total = 0
    prev = validate_shape(input_shape)
    for layer, shape in zip(arch.layers, shape_infer(arch, input_shape)):
        if isinstance(layer, Conv):
            total += layer.out_channels * prev.c * layer.k * layer.k + layer.out_channels
        elif isinstance(layer, Fc):
            total += layer.out * prev.c * prev.h * prev.w + layer.out
        prev = shape
    return total


def seed_streams(seed: int) -> List[np.random.Generator]:
    """Independent generators for (initialization, dropout, data order/augmentation)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def build_network(
    arch: ArchSpec,
    input_shape,
    seed: int = 0,
    dtype=np.float32,
    strict_placement: bool = True,
) -> Network:
    """Instantiate the layer pipeline with He-normal weights drawn from `seed`.

    A ReLU follows every Conv and every Fc except the final classifier.
    """
    if strict_placement:
        validate_placement(arch)
    input_shape = validate_shape(input_shape).with_batch(1)
    shapes = shape_infer(arch, input_shape)
    init_rng, dropout_rng, _ = seed_streams(seed)

    layers, labels, arch_end = [], [], []
    counters = {}

    def add(layer, kind):
        counters[kind] = counters.get(kind, 0) + 1
        layers.append(layer)
        labels.append(f"{kind}{counters[kind]}")

    prev = input_shape
    last = len(arch.layers) - 1
    for i, (desc, shape) in enumerate(zip(arch.layers, shapes)):
        if isinstance(desc, Conv):
            add(Conv2D(prev.c, desc, init_rng, dtype), "conv")
            add(ReLU(), "relu")
        elif isinstance(desc, POOL_TYPES):
            add(Pool2D(desc), "pool")
        elif isinstance(desc, Fc):
            add(FullyConnected(prev.c * prev.h * prev.w, desc.out, init_rng, dtype), "fc")
            if i != last:
                add(ReLU(), "relu")
        elif isinstance(desc, Dropout):
            add(DropoutLayer(desc.ratio, dropout_rng), "dropout")
        elif isinstance(desc, Gnpp):
            add(GnppLayer(desc.config), "gnpp")
        elif isinstance(desc, GaussBlur):
            add(GaussianBlurLayer(desc.std), "blur")
        arch_end.append(len(layers) - 1)
        prev = shape

    network = Network(arch, input_shape, layers, labels, arch_end, dtype=dtype, seed=seed)
    logger.info(f"Built network with {len(layers)} stages and {network.param_count} parameters")
    return network

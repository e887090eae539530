"""
Architecture notation: parsing, rendering, GNPP insertion, shapes and network building.
"""

import numpy as np
import pytest

from src.core.exceptions import ArchParseError, PlacementError, ShapeError
from src.schemas.arch import AvgPool, Conv, Dropout, Fc, GaussBlur, Gnpp, MaxPool
from src.schemas.gnpp import NeighborhoodType
from src.services.arch_service import (
    ARCH_PRESETS,
    build_network,
    count_params,
    parse_arch,
    render_arch,
    resolve_arch,
    seed_streams,
    shape_infer,
    strip_gnpp,
    validate_placement,
    with_blur,
    with_gnpp,
)

MNIST_LENET = "{C5(S1P0)@20-MP2(S2)}{C5(S1P0)@50-MP2(S2)}{FC500}{FC10}."
CIFAR_LENET = "{C5(S1P2)@32-MP3(S2)}{C5(S1P2)@32-AP3(S2)}{C5(S1P2)@64-AP3(S2)}{FC10}."
ALEXNET = (
    "{C11(S4)@96-MP3(S2)}{C5(S1P2)@256-MP3(S2)}{C3(S1P1)@384}{C3(S1P1)@384}\n"
    "{C3(S1P1)@256-MP3(S2)}{FC4096-D0.5}{FC4096-D0.5}{FC1000}."
)


@pytest.mark.parametrize("text", [MNIST_LENET, CIFAR_LENET, ALEXNET])
def test_published_architecture_strings_parse(text):
    arch = parse_arch(text)
    assert isinstance(arch.layers[-1], Fc)
    assert arch.source_text == text


def test_mnist_lenet_layers():
    arch = parse_arch(MNIST_LENET)
    assert arch.layers == [
        Conv(k=5, stride=1, pad=0, out_channels=20),
        MaxPool(k=2, stride=2),
        Conv(k=5, stride=1, pad=0, out_channels=50),
        MaxPool(k=2, stride=2),
        Fc(out=500),
        Fc(out=10),
    ]


def test_gnpp_tokens_parse_in_place():
    arch = parse_arch("{C5(S1P2)@32-G1(0.8)-MP3(S2)}{C5(S1P2)@32-AP3(S2)}{C5(S1P2)@64-G1(0.8)-AP3(S2)}{FC10}")
    gnpp = [i for i, layer in enumerate(arch.layers) if isinstance(layer, Gnpp)]
    assert gnpp == [1, 6]
    assert arch.layers[1] == Gnpp(nb_type=NeighborhoodType.TYPE1, sigma=0.8)
    assert isinstance(arch.layers[2], MaxPool) and isinstance(arch.layers[7], AvgPool)


def test_extension_tokens_and_whitespace():
    arch = parse_arch(" { C3 (S1) @4 - G2(1.0) - MP2(S2) } { GB(1.5) } {FC10 - D0.5} {FC2}")
    assert arch.layers == [
        Conv(k=3, stride=1, pad=0, out_channels=4),
        Gnpp(nb_type=NeighborhoodType.TYPE2, sigma=1.0),
        MaxPool(k=2, stride=2),
        GaussBlur(std=1.5),
        Fc(out=10),
        Dropout(ratio=0.5),
        Fc(out=2),
    ]


@pytest.mark.parametrize(
    "text,offset,message",
    [
        ("{C5(S1P0)@20-MP2(S2)", 20, "unbalanced brace"),
        ("{X5}{FC10}", 1, "unknown token"),
        ("{C5(S1P0)@-MP2(S2)}{FC10}", 10, "malformed number"),
        ("{FC10}}", 6, "unbalanced brace"),
        ("{C5(S1P0)@20}", 13, "fully-connected"),
        ("{D1.5}{FC10}", 1, "invalid layer parameters"),
        ("", 0, "empty architecture"),
    ],
)
def test_parse_errors_report_byte_offset(text, offset, message):
    with pytest.raises(ArchParseError) as info:
        parse_arch(text)
    assert info.value.offset == offset
    assert message in info.value.detail
    assert f"byte offset {offset}" in str(info.value)


@pytest.mark.parametrize("name", sorted(ARCH_PRESETS))
def test_render_round_trip(name):
    arch = resolve_arch(name)
    again = parse_arch(render_arch(arch))
    assert again.layers == arch.layers


def test_round_trip_keeps_gnpp_and_float_parameters():
    arch = with_gnpp(resolve_arch("lenet3"), [0, 2], NeighborhoodType.TYPE2, 0.8)
    assert parse_arch(render_arch(arch)).layers == arch.layers
    assert "G2(0.8)" in arch.source_text


def test_specs_compare_by_layers_not_source_text():
    arch = parse_arch(ALEXNET)
    again = parse_arch(render_arch(arch))
    assert again.source_text != arch.source_text
    assert again == arch
    assert hash(again) == hash(arch)
    assert parse_arch(MNIST_LENET) != arch


def test_mnist_lenet_shape_chain():
    shapes = shape_infer(parse_arch(MNIST_LENET), (1, 1, 28, 28))
    assert [tuple(s)[1:] for s in shapes] == [
        (20, 24, 24),
        (20, 12, 12),
        (50, 8, 8),
        (50, 4, 4),
        (500, 1, 1),
        (10, 1, 1),
    ]


def test_alexnet_conv5_blob():
    shapes = shape_infer(parse_arch(ALEXNET), (1, 3, 227, 227))
    assert tuple(shapes[6]) == (1, 256, 13, 13)


def test_shape_errors_name_the_layer():
    with pytest.raises(ShapeError, match="layer 0"):
        shape_infer(parse_arch("{C5(S1)@4}{FC10}"), (1, 1, 3, 3))


def test_mnist_lenet_parameter_count():
    arch = parse_arch(MNIST_LENET)
    assert count_params(arch, (1, 1, 28, 28)) == 431_080
    assert build_network(arch, (1, 1, 28, 28)).param_count == 431_080


def test_gnpp_insertion_changes_no_shape_or_parameter_count():
    base = parse_arch(CIFAR_LENET)
    shape = (1, 3, 32, 32)
    for nb_type in NeighborhoodType:
        equipped = with_gnpp(base, [0, 1, 2], nb_type, 0.8)
        assert len(equipped.layers) == len(base.layers) + 3
        assert count_params(equipped, shape) == count_params(base, shape)
        kept = [s for s, layer in zip(shape_infer(equipped, shape), equipped.layers) if not isinstance(layer, Gnpp)]
        assert kept == shape_infer(base, shape)
        assert strip_gnpp(equipped).layers == base.layers


def test_with_gnpp_replaces_existing_gnpp_in_front_of_a_pool():
    once = with_gnpp(resolve_arch("lenet2"), [0], NeighborhoodType.TYPE1, 1.0)
    twice = with_gnpp(once, [0, 1], NeighborhoodType.TYPE2, 0.5)
    gnpp = [layer for layer in twice.layers if isinstance(layer, Gnpp)]
    assert gnpp == [Gnpp(nb_type=NeighborhoodType.TYPE2, sigma=0.5)] * 2


def test_with_gnpp_rejects_unknown_pool():
    with pytest.raises(PlacementError):
        with_gnpp(resolve_arch("lenet2"), [2], NeighborhoodType.TYPE1, 1.0)


def test_with_blur_inserts_blur_layers():
    arch = with_blur(resolve_arch("lenet3"), [0, 1, 2], 1.0)
    assert sum(isinstance(layer, GaussBlur) for layer in arch.layers) == 3


def test_gnpp_after_fc_violates_placement():
    arch = parse_arch("{C3(S1P1)@4-MP2(S2)}{FC10-G1(1.0)}{FC10}")
    with pytest.raises(PlacementError) as info:
        build_network(arch, (1, 1, 8, 8))
    assert info.value.layer_index == 3
    # ablations may switch the rule off
    net = build_network(arch, (1, 1, 8, 8), strict_placement=False)
    assert net.forward(np.zeros((2, 1, 8, 8), dtype=np.float32)).shape == (2, 10, 1, 1)


def test_gnpp_before_pool_is_valid_placement():
    validate_placement(with_gnpp(resolve_arch("lenet3"), [0, 1, 2], NeighborhoodType.TYPE1, 0.8))


def test_build_is_reproducible_from_seed():
    arch = parse_arch(MNIST_LENET)
    a = build_network(arch, (1, 1, 28, 28), seed=7)
    b = build_network(arch, (1, 1, 28, 28), seed=7)
    c = build_network(arch, (1, 1, 28, 28), seed=8)
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()
    assert a.params()[0].tobytes() != c.params()[0].tobytes()


def test_builder_inserts_relu_after_conv_and_hidden_fc():
    net = build_network(parse_arch(MNIST_LENET), (1, 1, 28, 28))
    assert net.labels == ["conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "fc1", "relu3", "fc2"]
    assert [name for name, _ in net.named_params()][:2] == ["conv1.weight", "conv1.bias"]
    biases = [p for name, p in net.named_params() if name.endswith("bias")]
    assert all(np.all(b == 0) for b in biases)


def test_forward_until_stops_at_arch_layer():
    net = build_network(parse_arch(MNIST_LENET), (1, 1, 28, 28))
    x = np.random.default_rng(0).random((3, 1, 28, 28)).astype(np.float32)
    assert net.forward(x, until=2).shape == (3, 50, 8, 8)
    assert net.predict(x).shape == (3,)


def test_seed_streams_are_independent_and_reproducible():
    first = [g.random(3) for g in seed_streams(5)]
    second = [g.random(3) for g in seed_streams(5)]
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(first[0], first[1])

"""
Central-difference gradient checks, run in 64-bit mode through the same layer code used for training.
"""

import logging
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..core.exceptions import ConfigError, VerificationError
from ..schemas.analysis import GradcheckRow
from ..schemas.arch import ArchSpec
from ..schemas.run import Precision
from .arch_service import build_network
from .layer_service import Layer, softmax_xent
from .network_service import Network
from .tensor_service import Tensor4, dtype_for, validate_shape

logger = logging.getLogger(__name__)

REL_FLOOR = 1e-6
# Attempts per requested sample before giving up on finding a kink-free entry
MAX_DRAWS = 8


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def _routing(layers: List[Layer]) -> List[Optional[np.ndarray]]:
    return [layer.routing() for layer in layers]


def _same_routing(a, b) -> bool:
    return all((x is None and y is None) or np.array_equal(x, y) for x, y in zip(a, b))


def _row(layer: str, checked: int, worst: float, tolerance: float) -> GradcheckRow:
    # A row with no kink-free entry verified nothing and counts as a failure
    return GradcheckRow(layer=layer, checked=checked, max_rel_error=worst, passed=checked > 0 and worst < tolerance)


def check_tensor(
    target: np.ndarray,
    analytic: np.ndarray,
    loss_fn: Callable[[], float],
    routing_fn: Callable[[], list],
    rng: np.random.Generator,
    samples: int,
    epsilon: float,
) -> Tuple[int, float]:
    """Compare `analytic` against central differences on sampled entries of `target`.

    `target` is perturbed in place and restored. Entries whose perturbation flips a
    ReLU or changes an argmax between the two evaluations are skipped. Returns
    (entries checked, max relative error).
    """
    wanted = min(samples, target.size)
    candidates = rng.permutation(target.size)[: wanted * MAX_DRAWS]
    flat = target.reshape(-1)
    checked, worst = 0, 0.0
    for index in candidates:
        if checked == wanted:
            break
        original = flat[index]
        flat[index] = original + epsilon
        plus = loss_fn()
        plus_routing = routing_fn()
        flat[index] = original - epsilon
        minus = loss_fn()
        minus_routing = routing_fn()
        flat[index] = original
        if not _same_routing(plus_routing, minus_routing):
            continue
        numeric = (plus - minus) / (2 * epsilon)
        worst = max(worst, relative_error(float(analytic.reshape(-1)[index]), numeric))
        checked += 1
    return checked, worst


def layer_gradcheck(
    layer: Layer,
    x: Tensor4,
    seed: int = 0,
    samples: int = 12,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    training: bool = False,
) -> pd.DataFrame:
    """Check one layer against the scalar loss sum(forward(x) * R) for a fixed random R."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    direction = rng.standard_normal(layer.forward(x, training).shape)

    def loss_fn() -> float:
        return float(np.sum(layer.forward(x, training) * direction))

    def routing_fn():
        return [layer.routing()]

    layer.forward(x, training)
    grad_x = np.array(layer.backward(direction))
    grads = [np.array(g) for g in layer.grads()]

    rows = []
    checked, worst = check_tensor(x, grad_x, loss_fn, routing_fn, rng, samples, epsilon)
    rows.append(_row("input", checked, worst, tolerance))
    for suffix, p, g in zip(("weight", "bias"), layer.params(), grads):
        checked, worst = check_tensor(p, g, loss_fn, routing_fn, rng, samples, epsilon)
        rows.append(_row(f"{layer.name}.{suffix}", checked, worst, tolerance))
    return pd.DataFrame([row.model_dump() for row in rows])


def fix_dropout_masks(net: Network, x: Tensor4) -> None:
    """Draw one set of dropout masks and pin them so repeated forwards are deterministic."""
    for layer in net.dropout_layers():
        layer.fixed_mask = None
    net.forward(x, training=True)
    for layer in net.dropout_layers():
        layer.fixed_mask = layer._mask.copy()


def network_gradcheck(
    arch: ArchSpec,
    input_shape=(2, 1, 16, 16),
    seed: int = 0,
    samples: int = 12,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    strict_placement: bool = True,
) -> pd.DataFrame:
    """Per-layer report of the worst relative error between backprop and central differences.

    The network is built in float64 from `seed`; inputs and labels come from the same seed.
    """
    if epsilon <= 0 or tolerance <= 0 or samples < 1:
        raise ConfigError("epsilon, tolerance and samples must be positive")
    shape = validate_shape(input_shape)
    net = build_network(
        arch, shape, seed=seed, dtype=dtype_for(Precision.DOUBLE), strict_placement=strict_placement
    )
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(tuple(shape))
    labels = rng.integers(0, arch.num_classes, size=shape.n)
    fix_dropout_masks(net, x)

    def loss_fn() -> float:
        return softmax_xent(net.forward(x, training=True), labels)[0]

    def routing_fn():
        return _routing(net.layers)

    _, grad_x = net.loss_and_grads(x, labels, training=True)
    grad_x = np.array(grad_x)
    grads = {id(p): np.array(g) for p, g in zip(net.params(), net.grads())}

    rows = []
    for label, layer in zip(net.labels, net.layers):
        tensors = layer.params()
        if not tensors:
            continue
        checked_total, worst = 0, 0.0
        for p in tensors:
            checked, err = check_tensor(p, grads[id(p)], loss_fn, routing_fn, rng, samples, epsilon)
            checked_total += checked
            worst = max(worst, err)
        rows.append(_row(label, checked_total, worst, tolerance))

    checked, worst = check_tensor(x, grad_x, loss_fn, routing_fn, rng, samples, epsilon)
    rows.append(_row("input", checked, worst, tolerance))

    report = pd.DataFrame([row.model_dump() for row in rows])
    logger.info(f"Gradient check on {len(report)} layers, worst error {report['max_rel_error'].max():.3e}")
    return report


def assert_passed(report: pd.DataFrame, tolerance: float = 1e-4) -> None:
    failed = report[(report["max_rel_error"] >= tolerance) | (report["checked"] == 0)]
    if not failed.empty:
        names = ", ".join(failed["layer"])
        raise VerificationError(f"gradient check failed for {names} (tolerance {tolerance:g})")

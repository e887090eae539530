import logging
from typing import List, Optional, Tuple

import numpy as np

from ..schemas.arch import ArchSpec
from .layer_service import DropoutLayer, Layer, softmax_xent
from .tensor_service import Shape4, Tensor4

logger = logging.getLogger(__name__)


class Network:
    """A built layer pipeline.

    `layers` holds every stage including the ReLUs the builder inserts; `arch_end[i]`
    is the position in `layers` of the last stage produced by arch layer i.
    """

    def __init__(
        self,
        arch: ArchSpec,
        input_shape: Shape4,
        layers: List[Layer],
        labels: List[str],
        arch_end: List[int],
        dtype=np.float32,
        seed: int = 0,
    ):
        self.arch = arch
        self.input_shape = Shape4(*input_shape).with_batch(1)
        self.layers = layers
        self.labels = labels
        self.arch_end = arch_end
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.epoch = 0

    def forward(self, x: Tensor4, training: bool = False, until: Optional[int] = None) -> Tensor4:
        """Run the pipeline; `until` stops after the given arch layer."""
        stop = len(self.layers) if until is None else self.arch_end[until] + 1
        out = x.astype(self.dtype, copy=False)
        for layer in self.layers[:stop]:
            out = layer.forward(out, training)
        return out

    def backward(self, grad: Tensor4) -> Tensor4:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def loss_and_grads(self, x: Tensor4, labels: np.ndarray, training: bool = True) -> Tuple[float, Tensor4]:
        """Forward, softmax loss, backward. Returns the loss and the input gradient."""
        logits = self.forward(x, training=training)
        loss, grad_logits = softmax_xent(logits, labels)
        grad_x = self.backward(grad_logits.reshape(logits.shape))
        return loss, grad_x

    def predict(self, x: Tensor4, batch_size: int = 500) -> np.ndarray:
        predictions = []
        for start in range(0, x.shape[0], batch_size):
            logits = self.forward(x[start:start + batch_size], training=False)
            predictions.append(logits.reshape(logits.shape[0], -1).argmax(axis=1))
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def params(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> List[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def named_params(self) -> List[Tuple[str, np.ndarray]]:
        named = []
        for label, layer in zip(self.labels, self.layers):
            for suffix, p in zip(("weight", "bias"), layer.params()):
                named.append((f"{label}.{suffix}", p))
        return named

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def dropout_layers(self) -> List[DropoutLayer]:
        return [layer for layer in self.layers if isinstance(layer, DropoutLayer)]

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        for layer in self.dropout_layers():
            layer.rng = rng

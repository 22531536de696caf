"""Bias-free convolutional stack used by the simulated training protocols.

A stack is a sequence of blocks, each made of two 3x3 convolutions with ReLU activations,
followed by a global average pool and a linear classifier. Layers are identified as
`block{b}.conv{k}` with `k` in `{0, 1}`.

Blocks flagged as sensitive (always the first block and any strided block) are never partitioned
or pruned. In the other blocks the filters of `conv0`, and the matching input channels of `conv1`,
are the unit of partitioning and pruning.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import KERNEL_SIZE, conv2d_backward, conv2d_forward, relu

LOSSES = ("cross_entropy", "mse")
WIRE_DTYPES = {"float64": np.dtype("<f8"), "float32": np.dtype("<f4")}


@dataclass(frozen=True)
class BlockSpec:
    """Channel counts of one block: `in -> mid -> out`."""
    in_channels: int
    mid_channels: int
    out_channels: int
    sensitive: bool = False
    stride: int = 1


@dataclass(frozen=True)
class ConvStackSpec:
    """Architecture of a convolutional stack.

    Attributes:
        in_channels (int): Channels of the input images.
        height (int): Image height.
        width (int): Image width.
        blocks (tuple[BlockSpec]): Blocks in order.
        num_classes (int): Number of logits.
        loss (str): `cross_entropy` or `mse`.
    """
    in_channels: int
    height: int
    width: int
    blocks: tuple
    num_classes: int
    loss: str = "cross_entropy"

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("A conv stack needs at least one block.", field="channels")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got '{self.loss}'.", field="loss")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}.", field="num_classes")
        channels = self.in_channels
        for b, block in enumerate(self.blocks):
            if block.in_channels != channels:
                raise ConfigError(f"Block {b} expects {block.in_channels} input channels, previous layer gives {channels}.", field="channels")
            if min(block.mid_channels, block.out_channels) < 1:
                raise ConfigError(f"Block {b} has an empty layer.", field="channels")
            if (b == 0 or block.stride != 1) and not block.sensitive:
                raise ConfigError(f"Block {b} must be sensitive (first or strided block).", field="sensitive_blocks")
            channels = block.out_channels

    @classmethod
    def from_channels(cls, in_channels, height, width, channels, num_classes,
                      sensitive_blocks=(0,), strided_blocks=(), loss="cross_entropy"):
        """Build a spec from the flat list of conv output channels (two per block).

        The first block and strided blocks are always marked sensitive.

        Args:
            in_channels (int): Channels of the input images.
            height (int): Image height.
            width (int): Image width.
            channels (list[int]): Output channels of every conv layer, e.g. `[8, 16, 16, 32]`.
            num_classes (int): Number of logits.
            sensitive_blocks (tuple[int]): Blocks excluded from partitioning and pruning.
            strided_blocks (tuple[int]): Blocks declared with stride 2.
            loss (str): `cross_entropy` or `mse`.

        Returns:
            (ConvStackSpec): The spec.
        """
        channels = list(channels)
        if len(channels) == 0 or len(channels) % 2:
            raise ConfigError(f"channels must list two output counts per block, got {channels}.", field="channels")
        num_blocks = len(channels) // 2
        for b in tuple(sensitive_blocks) + tuple(strided_blocks):
            if not 0 <= b < num_blocks:
                raise ConfigError(f"Block index {b} out of range for {num_blocks} blocks.", field="sensitive_blocks")
        blocks, previous = [], in_channels
        for b in range(num_blocks):
            strided = b in strided_blocks
            blocks.append(BlockSpec(previous, channels[2 * b], channels[2 * b + 1],
                                    sensitive=(b == 0 or strided or b in sensitive_blocks),
                                    stride=2 if strided else 1))
            previous = channels[2 * b + 1]
        return cls(in_channels, height, width, tuple(blocks), num_classes, loss)

    @property
    def layer_ids(self):
        return [f"block{b}.conv{k}" for b in range(len(self.blocks)) for k in (0, 1)]

    @property
    def conv_shapes(self):
        shapes = []
        for block in self.blocks:
            shapes.append((block.mid_channels, block.in_channels, KERNEL_SIZE, KERNEL_SIZE))
            shapes.append((block.out_channels, block.mid_channels, KERNEL_SIZE, KERNEL_SIZE))
        return shapes

    @property
    def head_shape(self):
        return (self.num_classes, self.blocks[-1].out_channels)

    @property
    def partitionable_blocks(self):
        return [b for b, block in enumerate(self.blocks) if not block.sensitive]

    @property
    def prunable_layers(self):
        return [f"block{b}.conv0" for b in self.partitionable_blocks]

    @property
    def input_shape(self):
        return (self.in_channels, self.height, self.width)

    def validate_workers(self, S):
        """Check that every partitionable block can be split into `S` equal filter groups."""
        if int(S) != S or S < 1:
            raise ConfigError(f"Number of workers must be a positive integer, got {S}.", field="workers")
        for b in self.partitionable_blocks:
            mid = self.blocks[b].mid_channels
            if S > mid:
                raise ConfigError(f"Cannot split {mid} filters of block {b} across {S} workers.", field="workers")
            if mid % S:
                raise ConfigError(f"Filters of block {b} ({mid}) are not divisible by {S} workers.", field="workers")

    def with_mid_channels(self, mids):
        """Copy of the spec with the `conv0` widths of some blocks replaced.

        Args:
            mids (dict[int, int]): New width per block index.
        """
        blocks = tuple(replace(block, mid_channels=mids.get(b, block.mid_channels))
                       for b, block in enumerate(self.blocks))
        return replace(self, blocks=blocks)

    def num_params(self):
        return sum(math.prod(s) for s in self.conv_shapes) + math.prod(self.head_shape)


@dataclass(eq=False)
class ConvStackWeights:
    """Weights of a conv stack.

    Attributes:
        convs (list[np.ndarray]): Filter banks in layer order, two per block.
        head (np.ndarray): Classifier weights `(num_classes, channels)`.
    """
    convs: list
    head: np.ndarray

    def arrays(self):
        return list(self.convs) + [self.head]

    def bank(self, layer_id):
        """Filter bank of a layer given as `block{b}.conv{k}`."""
        b, k = _parse_layer_id(layer_id)
        return self.convs[2 * b + k]

    def copy(self):
        return ConvStackWeights([c.copy() for c in self.convs], self.head.copy())

    def freeze(self):
        """Make every array read-only; later in-place updates raise."""
        for array in self.arrays():
            array.flags.writeable = False
        return self

    def num_params(self):
        return sum(a.size for a in self.arrays())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def serialize(self, wire_dtype="float64"):
        """Little-endian flat encoding used for communication accounting."""
        return self.flat().astype(WIRE_DTYPES[wire_dtype]).tobytes()

    def nbytes(self, wire_dtype="float64"):
        return self.num_params() * WIRE_DTYPES[wire_dtype].itemsize

    def check_shapes(self, spec):
        shapes = [c.shape for c in self.convs]
        if shapes != spec.conv_shapes or self.head.shape != spec.head_shape:
            raise DimensionError(f"Weights {shapes + [self.head.shape]} do not match spec {spec.conv_shapes + [spec.head_shape]}.")


def _parse_layer_id(layer_id):
    try:
        block, conv = layer_id.split(".")
        return int(block[len("block"):]), int(conv[len("conv"):])
    except (ValueError, AttributeError) as e:
        raise ConfigError(f"Malformed layer id '{layer_id}'.") from e


def init_weights(spec, rng):
    """He-normal filters and a `1/sqrt(fan_in)` head, drawn in layer order."""
    convs = [rng.standard_normal(shape) * math.sqrt(2.0 / (shape[1] * KERNEL_SIZE**2)) for shape in spec.conv_shapes]
    head = rng.standard_normal(spec.head_shape) / math.sqrt(spec.head_shape[1])
    return ConvStackWeights(convs, head)


@dataclass(eq=False)
class ForwardCache:
    inputs: list
    preactivations: list
    pooled: np.ndarray
    spatial: tuple


def convstack_forward(weights, spec, batch):
    """Logits of a batch.

    Args:
        weights (ConvStackWeights): Weights matching `spec`.
        spec (ConvStackSpec): Architecture.
        batch (np.ndarray): Images `(b, c, h, w)`.

    Returns:
        (tuple): `(logits, cache)` with logits of shape `(b, num_classes)`.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != spec.input_shape:
        raise DimensionError(f"Batch must have shape (b, {spec.input_shape}), got {batch.shape}.")
    if any(block.stride != 1 for block in spec.blocks):
        raise ConfigError("Strided blocks can be declared but not executed.", field="strided_blocks")
    weights.check_shapes(spec)
    inputs, preactivations = [], []
    activation = batch
    for filters in weights.convs:
        inputs.append(activation)
        z = conv2d_forward(activation, filters)
        preactivations.append(z)
        activation = relu(z)
    pooled = activation.mean(axis=(2, 3))
    logits = pooled @ weights.head.T
    return logits, ForwardCache(inputs, preactivations, pooled, activation.shape[2:])


def convstack_backward(weights, spec, cache, grad_logits):
    """Gradients of a scalar loss given its gradient with respect to the logits.

    Args:
        weights (ConvStackWeights): Weights used in the forward pass.
        spec (ConvStackSpec): Architecture.
        cache (ForwardCache): Cache returned by `convstack_forward`.
        grad_logits (np.ndarray): Gradient `(b, num_classes)`.

    Returns:
        (ConvStackWeights): Gradients with the shapes of `weights`.
    """
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != (cache.pooled.shape[0], spec.num_classes):
        raise DimensionError(f"grad_logits must have shape {(cache.pooled.shape[0], spec.num_classes)}, got {grad_logits.shape}.")
    grad_head = grad_logits.T @ cache.pooled
    h, w = cache.spatial
    grad_pooled = grad_logits @ weights.head
    grad_activation = np.broadcast_to(grad_pooled[:, :, None, None] / (h * w), cache.preactivations[-1].shape)
    grad_convs = [None] * len(weights.convs)
    for layer in reversed(range(len(weights.convs))):
        grad_z = grad_activation * (cache.preactivations[layer] > 0)
        grad_activation, grad_convs[layer] = conv2d_backward(cache.inputs[layer], weights.convs[layer], grad_z)
    return ConvStackWeights(grad_convs, grad_head)


def loss_and_grad(logits, labels, kind):
    """Mean loss over the batch and its gradient with respect to the logits.

    `cross_entropy` is softmax cross-entropy; `mse` is half the squared distance to the one-hot target.

    Args:
        logits (np.ndarray): Logits `(b, num_classes)`.
        labels (np.ndarray): Integer labels `(b,)`.
        kind (str): `cross_entropy` or `mse`.

    Returns:
        (tuple): `(loss, grad_logits)`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, num_classes = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"Expected {b} labels, got shape {labels.shape}.")
    onehot = np.zeros_like(logits)
    onehot[np.arange(b), labels] = 1.0
    if kind == "cross_entropy":
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -float(np.mean(log_probs[np.arange(b), labels]))
        return loss, (np.exp(log_probs) - onehot) / b
    if kind == "mse":
        diff = logits - onehot
        return 0.5 * float(np.mean(np.sum(diff**2, axis=1))), diff / b
    raise ConfigError(f"loss must be one of {LOSSES}, got '{kind}'.", field="loss")


def loss_gradient(weights, spec, batch, labels):
    """Loss of a batch and the gradients of all weights."""
    logits, cache = convstack_forward(weights, spec, batch)
    loss, grad_logits = loss_and_grad(logits, labels, spec.loss)
    return loss, convstack_backward(weights, spec, cache, grad_logits)


def sgd_update(weights, grads, eta):
    """New weights `w - eta * g`; the inputs are left untouched."""
    return ConvStackWeights([w - eta * g for w, g in zip(weights.convs, grads.convs)],
                            weights.head - eta * grads.head)


def accuracy(weights, spec, X, y, batch_size=256):
    """Fraction of correctly classified samples."""
    if len(X) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(X), batch_size):
        logits, _ = convstack_forward(weights, spec, X[start:start + batch_size])
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == y[start:start + batch_size]))
    return correct / len(X)

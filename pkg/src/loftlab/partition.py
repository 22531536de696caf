"""Filter-wise partition of a conv stack into independent subnetworks.

For every partitionable block a random permutation of the `conv0` filters is chunked into `S`
equal groups. Worker `s` receives its group of `conv0` filters, the matching input channels of all
`conv1` filters, and a full copy of every shared array (sensitive blocks and the head). After local
training the groups are written back to their original positions and the shared arrays are
averaged.
"""

from dataclasses import dataclass

import numpy as np

from .convstack import ConvStackWeights, loss_gradient, sgd_update
from .errors import ConfigError, CorruptionError, DivergenceError, IncompletePartitionError, NumericalError
from .util import Logger


@dataclass(frozen=True, eq=False)
class SubnetworkSpec:
    """What one worker trains.

    Attributes:
        worker_id (int): Worker index.
        kept (dict[int, np.ndarray]): Per partitioned block, the sorted `conv0` filter indices kept.
            They are also the `conv1` input channels kept.
        stack (ConvStackSpec): Architecture of the subnetwork.
        shared (tuple[str]): Arrays copied to every worker (`block{b}.conv{k}` and `head`).
    """
    worker_id: int
    kept: dict
    stack: object
    shared: tuple

    @classmethod
    def full(cls, spec, worker_id=0):
        """Spec of a worker holding the whole model, as in data-parallel training."""
        return cls(worker_id=worker_id, kept={}, stack=spec, shared=tuple(spec.layer_ids) + ("head",))


def draw_partition(spec, S, rng):
    """Draw the `S` subnetwork specs of one round.

    Args:
        spec (ConvStackSpec): Full architecture.
        S (int): Number of workers.
        rng (np.random.Generator): Random generator; one permutation per partitionable block.

    Returns:
        (list[SubnetworkSpec]): Specs in worker order.
    """
    spec.validate_workers(S)
    groups = {}
    for b in spec.partitionable_blocks:
        mid = spec.blocks[b].mid_channels
        groups[b] = [np.sort(chunk) for chunk in rng.permutation(mid).reshape(S, mid // S)]
    shared = tuple(f"block{b}.conv{k}" for b, block in enumerate(spec.blocks) if block.sensitive for k in (0, 1)) + ("head",)
    sub_stack = spec.with_mid_channels({b: spec.blocks[b].mid_channels // S for b in groups})
    return [SubnetworkSpec(worker_id=s, kept={b: groups[b][s] for b in groups}, stack=sub_stack, shared=shared)
            for s in range(S)]


def extract_subnetwork(weights, sub):
    """Copy the weights a worker trains."""
    convs = [c.copy() for c in weights.convs]
    for b, kept in sub.kept.items():
        convs[2 * b] = weights.convs[2 * b][kept].copy()
        convs[2 * b + 1] = weights.convs[2 * b + 1][:, kept].copy()
    return ConvStackWeights(convs, weights.head.copy())


def filter_partition(weights, spec, S, rng, specs=None):
    """Split the global weights into `S` subnetworks.

    Args:
        weights (ConvStackWeights): Global weights.
        spec (ConvStackSpec): Full architecture.
        S (int): Number of workers.
        rng (np.random.Generator): Random generator for the permutations.
        specs (list[SubnetworkSpec], optional): Reuse these specs instead of drawing new ones.

    Returns:
        (list[tuple]): `(SubnetworkSpec, sub-weights)` in worker order.
    """
    weights.check_shapes(spec)
    if specs is None:
        specs = draw_partition(spec, S, rng)
    elif len(specs) != S:
        raise ConfigError(f"Expected {S} subnetwork specs, got {len(specs)}.", field="workers")
    Logger.debug(f"Partitioned blocks {spec.partitionable_blocks} across {S} workers")
    return [(sub, extract_subnetwork(weights, sub)) for sub in specs]


def _check_cover(parts, block, size):
    indices = np.concatenate([sub.kept[block] for sub, _ in parts])
    if len(np.unique(indices)) != len(indices):
        raise CorruptionError(f"Kept filter lists of block {block} overlap.")
    if len(indices) != size or not np.array_equal(np.sort(indices), np.arange(size)):
        raise IncompletePartitionError(f"Kept filter lists of block {block} do not cover its {size} filters.")


def _mean(arrays):
    # equal copies average to themselves bit for bit
    base = arrays[0]
    total = np.zeros_like(base)
    for array in arrays[1:]:
        total += array - base
    return base + total / len(arrays)


def aggregate(global_weights, parts):
    """Merge trained subnetworks back into a new global model.

    Partitioned filters and channels go back to their original indices; shared arrays become the
    mean over workers, taken in worker order.

    Args:
        global_weights (ConvStackWeights): Weights the round started from.
        parts (list[tuple]): `(SubnetworkSpec, trained sub-weights)` pairs.

    Returns:
        (ConvStackWeights): The merged weights.
    """
    if not parts:
        raise IncompletePartitionError("Nothing to aggregate.")
    parts = sorted(parts, key=lambda part: part[0].worker_id)
    blocks = set(parts[0][0].kept)
    if any(set(sub.kept) != blocks for sub, _ in parts):
        raise CorruptionError("Subnetworks disagree on which blocks are partitioned.")
    for b in blocks:
        _check_cover(parts, b, global_weights.convs[2 * b].shape[0])

    merged = global_weights.copy()
    for layer in range(len(merged.convs)):
        if layer // 2 not in blocks:
            merged.convs[layer] = _mean([w.convs[layer] for _, w in parts])
    merged.head = _mean([w.head for _, w in parts])
    for sub, w in parts:
        for b, kept in sub.kept.items():
            merged.convs[2 * b][kept] = w.convs[2 * b]
            merged.convs[2 * b + 1][:, kept] = w.convs[2 * b + 1]
    return merged


def make_batches(X, y, batch_size, rng=None):
    """Split a dataset into minibatches, shuffled first when `rng` is given."""
    if len(X) == 0:
        raise ConfigError("Cannot build batches from an empty dataset.", field="batch_size")
    order = rng.permutation(len(X)) if rng is not None else np.arange(len(X))
    return [(X[idx], y[idx]) for idx in np.array_split(order, max(1, -(-len(X) // batch_size)))]


def train_local(sub_weights, sub, batches, ell, eta, rng=None):
    """Run `ell` plain SGD steps on a subnetwork.

    Step `k` uses `batches[k % len(batches)]`, or a batch drawn from `rng` when given.

    Args:
        sub_weights (ConvStackWeights): Weights owned by the worker.
        sub (SubnetworkSpec): The worker's spec.
        batches (list[tuple]): Non-empty list of `(X, y)` minibatches.
        ell (int): Number of local steps.
        eta (float): Step size.
        rng (np.random.Generator, optional): Batch sampler.

    Returns:
        (ConvStackWeights): The trained weights.
    """
    if int(ell) != ell or ell < 1:
        raise ConfigError(f"Local iterations must be a positive integer, got {ell}.", field="local_iterations")
    if not batches:
        raise ConfigError("Local training needs at least one batch.", field="batch_size")
    if eta < 0:
        raise ConfigError(f"Step size must be non-negative, got {eta}.", field="eta")
    weights = sub_weights
    for k in range(ell):
        X, y = batches[int(rng.integers(len(batches)))] if rng is not None else batches[k % len(batches)]
        try:
            loss, grads = loss_gradient(weights, sub.stack, X, y)
        except NumericalError as e:
            raise DivergenceError(f"Worker {sub.worker_id} produced non-finite values at local step {k}: {e}",
                                  iteration=k, eta=eta, worker_id=sub.worker_id) from e
        if not np.isfinite(loss):
            raise DivergenceError(f"Worker {sub.worker_id} loss is not finite at local step {k}.",
                                  iteration=k, eta=eta, worker_id=sub.worker_id)
        weights = sgd_update(weights, grads, eta)
    Logger.debug(f"Worker {sub.worker_id}: {ell} local steps, last loss {loss:.6f}")
    return weights

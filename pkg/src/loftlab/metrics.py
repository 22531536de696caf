"""Filter ranking, rank distances and magnitude pruning.

Filters of a layer are ranked by their l2 norm. Two rankings of the same layer, taken at different
points of training, are compared through a rank map `sigma`: `sigma[i]` is the 1-based position in
the second list of the element ranked `i` in the first list, or 0 when the element is missing there.
"""

import math
from dataclasses import dataclass

import numpy as np

from .convstack import ConvStackWeights
from .errors import ConfigError, CorruptionError, OverPruneError, PreconditionError
from .util import njit


@dataclass(frozen=True, eq=False)
class RankedFilterList:
    """Filters of one layer ordered by decreasing l2 norm, ties by ascending index.

    Attributes:
        indices (np.ndarray): Filter indices in rank order.
        norms (np.ndarray): Matching l2 norms.
        layer_id (str): Layer the filters belong to.
        epoch (int): When the ranking was taken.
    """
    indices: np.ndarray
    norms: np.ndarray
    layer_id: str = ""
    epoch: int = 0

    @classmethod
    def from_indices(cls, indices, layer_id="", epoch=0):
        """List with the given order and placeholder norms."""
        indices = np.asarray(indices, dtype=np.int64)
        return cls(indices, np.arange(len(indices), 0, -1, dtype=np.float64), layer_id, epoch)

    @property
    def entries(self):
        return list(zip(self.indices.tolist(), self.norms.tolist()))

    def __len__(self):
        return len(self.indices)

    def truncated(self, length):
        return RankedFilterList(self.indices[:length], self.norms[:length], self.layer_id, self.epoch)


@dataclass(frozen=True, eq=False)
class RankMap:
    """Positions of the elements of one list in another.

    Attributes:
        sigma (np.ndarray): 1-based positions in the second list, 0 where missing.
        l (int): Length of the second list.
        missing (tuple[int]): 1-based positions in the first list whose element is missing.
    """
    sigma: np.ndarray
    l: int
    missing: tuple


def rank_filters(bank, layer_id="", epoch=0):
    """Rank the filters of a bank by l2 norm.

    Args:
        bank (np.ndarray): Filter bank with filters along the first axis.
        layer_id (str): Layer identifier.
        epoch (int): Snapshot time.

    Returns:
        (RankedFilterList): The ranking.
    """
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim == 0 or len(bank) == 0:
        raise PreconditionError("Cannot rank an empty filter bank.")
    norms = np.sqrt(np.sum(bank.reshape(len(bank), -1) ** 2, axis=1))
    order = np.lexsort((np.arange(len(bank)), -norms))
    return RankedFilterList(order.astype(np.int64), norms[order], layer_id, epoch)


def _check_unique(ranked, name):
    if len(np.unique(ranked.indices)) != len(ranked.indices):
        raise CorruptionError(f"Ranked list {name} of layer '{ranked.layer_id}' has duplicate filter indices.")


def build_rank_map(list_a, list_b):
    """Rank map from `list_a` to `list_b`, matching elements by filter index."""
    _check_unique(list_a, "A")
    _check_unique(list_b, "B")
    position = {int(index): k + 1 for k, index in enumerate(list_b.indices)}
    sigma = np.array([position.get(int(index), 0) for index in list_a.indices], dtype=np.int64)
    missing = tuple(int(i) + 1 for i in np.flatnonzero(sigma == 0))
    return RankMap(sigma=sigma, l=len(list_b), missing=missing)


def _require_complete(rank_map):
    if rank_map.missing:
        raise PreconditionError(f"Rank map has {len(rank_map.missing)} missing positions; use filter_distance for partial lists.")


def footrule(rank_map):
    """Total displacement `sum_i |i - sigma(i)|`."""
    _require_complete(rank_map)
    positions = np.arange(1, len(rank_map.sigma) + 1)
    return float(np.sum(np.abs(positions - rank_map.sigma)))


def weighted_footrule(rank_map, weights):
    """Weighted displacement `sum_i w_i |sum_{j<i} w_j - sum_{sigma(j)<sigma(i)} w_j|`.

    Args:
        rank_map (RankMap): Complete rank map.
        weights (np.ndarray): Positive weights aligned with the first list.

    Returns:
        (float): The distance.
    """
    _require_complete(rank_map)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != rank_map.sigma.shape:
        raise ConfigError(f"Expected {len(rank_map.sigma)} weights, got {weights.shape}.", field="weights")
    if np.any(weights <= 0):
        raise ConfigError("Footrule weights must be positive.", field="weights")
    before_a = np.cumsum(weights) - weights
    order = np.argsort(rank_map.sigma, kind="stable")
    before_b = np.empty_like(weights)
    before_b[order] = np.cumsum(weights[order]) - weights[order]
    return float(np.sum(weights * np.abs(before_a - before_b)))


@njit
def _filter_distance_kernel(sigma, l):
    total = 0.0
    for k in range(len(sigma)):
        i = k + 1
        target = sigma[k] if sigma[k] > 0 else l + 1
        total += abs(math.log(i) - math.log(target)) / i
    return total


def filter_distance(list_a, list_b):
    """Position-weighted log displacement `sum_i (1/i) |ln i - ln sigma(i)|`.

    An element of `list_a` missing from `list_b` is placed just past its end, at `l + 1`.

    Args:
        list_a (RankedFilterList): Earlier ranking.
        list_b (RankedFilterList): Later ranking.

    Returns:
        (float): Non-negative distance, 0 only for identical order with nothing missing.
    """
    rank_map = build_rank_map(list_a, list_b)
    return float(_filter_distance_kernel(rank_map.sigma, rank_map.l))


def keep_count(size, ratio):
    """Filters kept out of `size` when removing a fraction `ratio`, rounded up."""
    return int(math.ceil(round((1.0 - ratio) * size, 9)))


def pairwise_heatmap(snapshots, prune_ratio=None):
    """Filter distance between every pair of snapshots of one layer.

    Args:
        snapshots (list[RankedFilterList]): At least two snapshots of the same layer.
        prune_ratio (float, optional): Restrict every list to its top `1 - prune_ratio` prefix.

    Returns:
        (np.ndarray): `E x E` matrix with entry `(i, j) = filter_distance(snapshots[i], snapshots[j])`.
    """
    if len(snapshots) < 2:
        raise PreconditionError("A heatmap needs at least two snapshots.")
    if len({s.layer_id for s in snapshots}) != 1:
        raise PreconditionError("Heatmap snapshots must all belong to the same layer.")
    if prune_ratio is not None:
        _check_ratio(prune_ratio)
        snapshots = [s.truncated(keep_count(len(s), prune_ratio)) for s in snapshots]
    E = len(snapshots)
    heatmap = np.zeros((E, E))
    for i in range(E):
        for j in range(E):
            if i != j:
                heatmap[i, j] = filter_distance(snapshots[i], snapshots[j])
    return heatmap


def distance_to_final(snapshots):
    """Distance of every snapshot to the last one, averaged over layers.

    Args:
        snapshots (list[RankedFilterList] | dict[str, list[RankedFilterList]]): Snapshots of one layer,
            or snapshots per layer with equal counts.

    Returns:
        (np.ndarray): Curve of length `E` ending in 0.
    """
    per_layer = snapshots if isinstance(snapshots, dict) else {"": snapshots}
    lengths = {len(s) for s in per_layer.values()}
    if len(lengths) != 1 or lengths.pop() < 2:
        raise PreconditionError("Every tracked layer needs the same number (at least two) of snapshots.")
    curves = [[filter_distance(s, series[-1]) for s in series] for series in per_layer.values()]
    return np.mean(np.array(curves), axis=0)


@dataclass(frozen=True)
class TicketMask:
    """Filters kept by magnitude pruning.

    Attributes:
        kept (dict[str, np.ndarray]): Sorted kept filter indices per pruned layer.
        ratio (float): Fraction of filters removed.
        skipped (tuple[str]): Layers left untouched.
    """
    kept: dict
    ratio: float
    skipped: tuple


def _check_ratio(ratio):
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"pruning ratio outside [0,1): {ratio}", field="pruning_ratios")


def prune_filters(weights, spec, ratio):
    """Keep the largest-norm `conv0` filters of every partitionable block.

    Args:
        weights (ConvStackWeights): Trained weights.
        spec (ConvStackSpec): Architecture.
        ratio (float): Fraction of filters removed per layer, in `[0, 1)`.

    Returns:
        (TicketMask): The mask.
    """
    _check_ratio(ratio)
    kept = {}
    for layer in spec.prunable_layers:
        ranked = rank_filters(weights.bank(layer), layer)
        count = keep_count(len(ranked), ratio)
        if count == 0:
            raise OverPruneError(f"Pruning ratio {ratio} leaves no filter in layer '{layer}'.")
        kept[layer] = np.sort(ranked.indices[:count])
    skipped = tuple(layer for layer in spec.layer_ids if layer not in kept)
    return TicketMask(kept=kept, ratio=float(ratio), skipped=skipped)


def apply_ticket(weights, spec, mask):
    """Remove the pruned filters and the matching input channels of the next layer.

    Returns:
        (tuple): `(pruned weights, pruned spec)`.
    """
    convs = [c.copy() for c in weights.convs]
    widths = {}
    for layer, kept in mask.kept.items():
        b = int(layer.split(".")[0][len("block"):])
        convs[2 * b] = weights.convs[2 * b][kept].copy()
        convs[2 * b + 1] = weights.convs[2 * b + 1][:, kept].copy()
        widths[b] = len(kept)
    return ConvStackWeights(convs, weights.head.copy()), spec.with_mid_channels(widths)

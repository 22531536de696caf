"""Simulated multi-worker training protocols.

Workers are plain function calls. The result of a worker depends only on the master seed, its
round, its seed offset and its inputs, and results are merged in worker order, so sequential and
concurrent runs produce identical weights.
"""

from dataclasses import replace

import numpy as np

from ..errors import ConfigError
from ..partition import SubnetworkSpec, aggregate, draw_partition, filter_partition, make_batches, train_local
from ..util import Logger, Randomizer
from .protocol import Protocol


class LoftProtocol(Protocol):
    """Filter-wise partitioned training.

    Every round the global model is split into `S` subnetworks, each worker trains its subnetwork
    for `local_iterations` steps on minibatches of the full training set, and the subnetworks are
    merged back. The global weights are read-only while a round runs; no gradient is ever taken
    with respect to them.
    """
    name = "loft"

    def __init__(self, weights, spec, data, schedule, seed=0):
        spec.validate_workers(schedule.workers)
        super().__init__(weights, spec, data, schedule, seed)
        self._frozen_specs = None

    def _partition_specs(self):
        if self.schedule.freeze_partition:
            if self._frozen_specs is None:
                self._frozen_specs = draw_partition(self.spec, self.schedule.workers, Randomizer.stream(self.seed, "partition", 1))
            return self._frozen_specs
        return None

    def _worker(self, round_id, sub, sub_weights):
        sched = self.schedule
        rng = Randomizer.stream(self.seed, "worker", round_id, sched.seed_offset(sub.worker_id))
        batches = make_batches(self.X, self.y, sched.batch_size, rng)
        return train_local(sub_weights, sub, batches, sched.local_iterations, sched.step_size(round_id))

    def step(self):
        round_id = self.round_id + 1
        wire = self.schedule.wire_dtype
        global_weights = self.weights.freeze()
        parts = filter_partition(global_weights, self.spec, self.schedule.workers,
                                 Randomizer.stream(self.seed, "partition", round_id),
                                 specs=self._partition_specs())
        trained = self._run_workers([lambda sub=sub, w=w: self._worker(round_id, sub, w) for sub, w in parts])
        for (sub, sent), received in zip(parts, trained):
            down, up = len(sent.serialize(wire)), len(received.serialize(wire))
            self.ledger.record(round_id, sub.worker_id, up, down, max(up, down))
        self.weights = aggregate(global_weights, [(sub, w) for (sub, _), w in zip(parts, trained)])


class LocalSGDProtocol(Protocol):
    """Data-parallel local SGD.

    Samples are dealt round-robin to the workers. Each worker trains a full copy of the model on
    its shard for `local_iterations` steps, then all copies are averaged.
    """
    name = "local_sgd"

    def __init__(self, weights, spec, data, schedule, seed=0):
        super().__init__(weights, spec, data, schedule, seed)
        S = schedule.workers
        if len(self.X) < S:
            raise ConfigError(f"Cannot shard {len(self.X)} samples across {S} workers.", field="workers")
        self.shards = [np.arange(s, len(self.X), S) for s in range(S)]

    def _worker(self, round_id, worker_id, weights):
        sched = self.schedule
        rng = Randomizer.stream(self.seed, "worker", round_id, sched.seed_offset(worker_id))
        shard = self.shards[worker_id]
        batches = make_batches(self.X[shard], self.y[shard], sched.batch_size, rng)
        return train_local(weights, SubnetworkSpec.full(self.spec, worker_id), batches, sched.local_iterations,
                           sched.step_size(round_id))

    def step(self):
        round_id = self.round_id + 1
        nbytes = len(self.weights.serialize(self.schedule.wire_dtype))
        global_weights = self.weights.freeze()
        workers = range(self.schedule.workers)
        trained = self._run_workers([lambda s=s: self._worker(round_id, s, global_weights.copy()) for s in workers])
        for s in workers:
            self.ledger.record(round_id, s, nbytes, nbytes, nbytes)
        self.weights = aggregate(global_weights, [(SubnetworkSpec.full(self.spec, s), w) for s, w in zip(workers, trained)])


PROTOCOL_CLASSES = {"loft": LoftProtocol, "local_sgd": LocalSGDProtocol}


def make_protocol(name, weights, spec, data, schedule, seed=0):
    """Build a protocol by name; `dense` is local SGD on a single worker."""
    if name == "dense":
        schedule = replace(schedule, workers=1, seed_offsets=())
        name = "local_sgd"
    if name not in PROTOCOL_CLASSES:
        raise ConfigError(f"Unknown protocol '{name}'. Valid protocols: {sorted(PROTOCOL_CLASSES) + ['dense']}", field="protocols")
    Logger.debug(f"Building protocol {name} with {schedule.workers} workers")
    return PROTOCOL_CLASSES[name](weights, spec, data, schedule, seed)


def run_loft_pretrain(weights, spec, data, schedule, seed=0):
    """Pretrain with filter-wise partitioned training.

    Returns:
        (tuple): `(weights, ledger, snapshots)`.
    """
    return LoftProtocol(weights, spec, data, schedule, seed).run()


def run_local_sgd(weights, spec, data, schedule, seed=0):
    """Pretrain with data-parallel local SGD.

    Returns:
        (tuple): `(weights, ledger, snapshots)`.
    """
    return LocalSGDProtocol(weights, spec, data, schedule, seed).run()

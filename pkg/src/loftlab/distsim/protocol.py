"""Base class and schedule of the simulated training protocols.

This module contains the [`ScheduleConfig`][loftlab.distsim.protocol.ScheduleConfig] shared by all
protocols and the base [`Protocol`][loftlab.distsim.protocol.Protocol] class that the protocols in
[`simulation`][loftlab.distsim.simulation] inherit from.
"""

import asyncio
import math
from dataclasses import dataclass

from ..convstack import WIRE_DTYPES
from ..errors import ConfigError, LoftError
from ..metrics import rank_filters
from ..util import Logger
from .ledger import CommLedger

ETA_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class ScheduleConfig:
    """How a protocol is run.

    Attributes:
        workers (int): Number of simulated workers `S`.
        rounds (int): Synchronization rounds `T`.
        local_iterations (int): Local SGD steps per round.
        eta (float): Step size of the first round.
        eta_schedule (str): `constant`, or `cosine` to anneal the step size towards 0 over the rounds.
        batch_size (int): Minibatch size.
        seed_offsets (tuple[int]): Stream index of every worker; defaults to the worker id.
        concurrent (bool): Run the workers of a round concurrently.
        freeze_partition (bool): Draw the filter partition once and reuse it every round.
        wire_dtype (str): Parameter encoding used for accounting.
        checkpoint_rounds (tuple[int]): Rounds after which the global weights are kept.
    """
    workers: int = 2
    rounds: int = 20
    local_iterations: int = 1
    eta: float = 0.05
    eta_schedule: str = "constant"
    batch_size: int = 32
    seed_offsets: tuple = ()
    concurrent: bool = False
    freeze_partition: bool = False
    wire_dtype: str = "float64"
    checkpoint_rounds: tuple = ()

    def __post_init__(self):
        for name in ("workers", "rounds", "local_iterations", "batch_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}.", field=name)
        if self.eta < 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}.", field="eta")
        if self.eta_schedule not in ETA_SCHEDULES:
            raise ConfigError(f"eta_schedule must be one of {ETA_SCHEDULES}, got '{self.eta_schedule}'.", field="eta_schedule")
        if self.seed_offsets and len(self.seed_offsets) != self.workers:
            raise ConfigError(f"Expected {self.workers} seed offsets, got {len(self.seed_offsets)}.", field="seed_offsets")
        if any(offset < 0 for offset in self.seed_offsets):
            raise ConfigError("Seed offsets must be non-negative.", field="seed_offsets")
        if self.wire_dtype not in WIRE_DTYPES:
            raise ConfigError(f"wire_dtype must be one of {sorted(WIRE_DTYPES)}, got '{self.wire_dtype}'.", field="wire_dtype")
        for r in self.checkpoint_rounds:
            if not 0 <= r <= self.rounds:
                raise ConfigError(f"Checkpoint round {r} outside [0, {self.rounds}].", field="ticket_rounds")

    def seed_offset(self, worker_id):
        return self.seed_offsets[worker_id] if self.seed_offsets else worker_id

    def step_size(self, round_id):
        """Step size used by the local steps of round `round_id` (1-based)."""
        if self.eta_schedule == "constant":
            return self.eta
        return 0.5 * self.eta * (1.0 + math.cos(math.pi * (round_id - 1) / self.rounds))


class Protocol:
    """Base class for round-based training protocols.

    A protocol owns the global weights and, for every round, hands work to `S` simulated workers
    and merges what they return. Subclasses must implement
    [`step`][loftlab.distsim.protocol.Protocol.step].

    Args:
        weights (ConvStackWeights): Initial global weights; never modified.
        spec (ConvStackSpec): Architecture.
        data (tuple): Training set `(X, y)`.
        schedule (ScheduleConfig): Schedule.
        seed (int): Master seed for the `partition` and `worker` streams.

    Attributes:
        ledger (CommLedger): Traffic recorded so far.
        snapshots (dict[str, list[RankedFilterList]]): Rankings of every prunable layer, one per round,
            starting with the initial weights.
        checkpoints (dict[int, ConvStackWeights]): Global weights after the rounds in
            `schedule.checkpoint_rounds`.
        round_id (int): Rounds completed.
    """
    name = None

    def __init__(self, weights, spec, data, schedule, seed=0):
        weights.check_shapes(spec)
        self.weights = weights.copy()
        self.spec = spec
        self.X, self.y = data
        self.schedule = schedule
        self.seed = seed
        self.round_id = 0
        self.ledger = CommLedger(self.name, schedule.workers, schedule.wire_dtype)
        self.snapshots = {layer: [] for layer in spec.prunable_layers}
        self.checkpoints = {}
        self._observe()

    def _observe(self):
        for layer, series in self.snapshots.items():
            series.append(rank_filters(self.weights.bank(layer), layer, self.round_id))
        if self.round_id in self.schedule.checkpoint_rounds:
            self.checkpoints[self.round_id] = self.weights.copy()

    def _run_workers(self, jobs):
        """Call every job and return the results in job order."""
        if not self.schedule.concurrent:
            return [job() for job in jobs]

        async def gather():
            return await asyncio.gather(*[asyncio.to_thread(job) for job in jobs])
        return list(asyncio.run(gather()))

    def step(self):
        """Run one synchronization round and replace `self.weights`."""
        raise NotImplementedError

    def run(self):
        """Run all rounds of the schedule.

        Returns:
            (tuple): `(weights, ledger, snapshots)`.
        """
        Logger.info(f"{self.name}: {self.schedule.rounds} rounds on {self.schedule.workers} workers (seed {self.seed})")
        for _ in range(self.schedule.rounds):
            round_id = self.round_id + 1
            try:
                self.step()
            except LoftError as e:
                if getattr(e, "round_id", False) is None:
                    e.round_id = round_id
                e.add_note(f"{self.name} round {round_id}")
                raise
            self.round_id = round_id
            self._observe()
            Logger.debug(f"{self.name}: round {round_id} done")
        Logger.info(f"{self.name}: finished, {self.ledger.total_bytes} bytes exchanged")
        return self.weights, self.ledger, self.snapshots

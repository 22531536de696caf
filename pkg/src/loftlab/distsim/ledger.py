"""Byte-level communication and memory accounting.

Every simulated protocol fills a [`CommLedger`][loftlab.distsim.ledger.CommLedger] with one record
per (round, worker). Bytes are the lengths of the serialized arrays that cross the wire, so the
ledger of a simulated run can be checked against the analytic counts of
[`analytic_round_bytes`][loftlab.distsim.ledger.analytic_round_bytes] exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ..convstack import WIRE_DTYPES
from ..errors import ConfigError, PreconditionError
from ..util import Logger

PROTOCOLS = ("loft", "local_sgd", "gpipe_model")


@dataclass(frozen=True)
class RoundRecord:
    """Traffic of one worker (or one pipeline boundary) in one round."""
    round_id: int
    worker_id: int
    bytes_up: int
    bytes_down: int
    peak_param_bytes: int


@dataclass
class CommLedger:
    """Communication ledger of one run.

    Attributes:
        protocol (str): `loft`, `local_sgd` or `gpipe_model`.
        num_workers (int): Workers, or pipeline stages for `gpipe_model`.
        wire_dtype (str): Encoding of the parameters on the wire.
        records (list[RoundRecord]): Per-round records.
    """
    protocol: str
    num_workers: int
    wire_dtype: str = "float64"
    records: list = field(default_factory=list)

    HEADERS = ["protocol", "round", "worker", "bytes_up", "bytes_down", "peak_param_bytes"]

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"Unknown protocol '{self.protocol}'. Valid protocols: {PROTOCOLS}", field="protocols")
        if self.wire_dtype not in WIRE_DTYPES:
            raise ConfigError(f"wire_dtype must be one of {sorted(WIRE_DTYPES)}, got '{self.wire_dtype}'.", field="wire_dtype")

    def record(self, round_id, worker_id, bytes_up, bytes_down, peak_param_bytes):
        self.records.append(RoundRecord(int(round_id), int(worker_id), int(bytes_up), int(bytes_down), int(peak_param_bytes)))

    @property
    def label(self):
        return f"{self.protocol}-{self.num_workers}"

    @property
    def rounds(self):
        return len({r.round_id for r in self.records})

    @property
    def total_up(self):
        return sum(r.bytes_up for r in self.records)

    @property
    def total_down(self):
        return sum(r.bytes_down for r in self.records)

    @property
    def total_bytes(self):
        return self.total_up + self.total_down

    @property
    def peak_param_bytes(self):
        return max((r.peak_param_bytes for r in self.records), default=0)

    def to_rows(self):
        return [[self.protocol, r.round_id, r.worker_id, r.bytes_up, r.bytes_down, r.peak_param_bytes]
                for r in self.records]


def analytic_round_bytes(spec, S, protocol, wire_dtype="float64"):
    """Bytes one worker receives (and sends back) in one synchronization round.

    Args:
        spec (ConvStackSpec): Full architecture.
        S (int): Number of workers.
        protocol (str): `loft` or `local_sgd`.
        wire_dtype (str): Parameter encoding.

    Returns:
        (int): Bytes in one direction for one worker.
    """
    itemsize = WIRE_DTYPES[wire_dtype].itemsize
    if protocol == "local_sgd":
        return spec.num_params() * itemsize
    if protocol == "loft":
        spec.validate_workers(S)
        sub = spec.with_mid_channels({b: spec.blocks[b].mid_channels // S for b in spec.partitionable_blocks})
        return sub.num_params() * itemsize
    raise ConfigError(f"No per-round parameter traffic for protocol '{protocol}'.", field="protocols")


def comm_cost_gpipe(spec, batch_shape, iterations, S, wire_dtype="float64"):
    """Analytic ledger of a pipeline split of the conv stack into `S` stages.

    Conv layers are cut into `S` contiguous stages of near-equal length. At every iteration each
    boundary carries the activation forward and its gradient backward, both of shape
    `(batch, channels, height, width)`.

    Args:
        spec (ConvStackSpec): Architecture.
        batch_shape (int | tuple): Batch size, or a full `(batch, c, h, w)` shape.
        iterations (int): Training iterations.
        S (int): Pipeline stages, at least 2.
        wire_dtype (str): Encoding of activations and gradients.

    Returns:
        (CommLedger): One record per (iteration, boundary).
    """
    if int(S) != S or S < 2:
        raise ConfigError(f"A pipeline needs at least 2 stages, got {S}.", field="workers")
    if iterations < 0:
        raise ConfigError(f"iterations must be non-negative, got {iterations}.")
    shapes = spec.conv_shapes
    if len(shapes) < S:
        raise ConfigError(f"Cannot cut {len(shapes)} conv layers into {S} stages.", field="workers")
    batch = batch_shape if isinstance(batch_shape, (int, np.integer)) else batch_shape[0]
    itemsize = WIRE_DTYPES[wire_dtype].itemsize
    stages = np.array_split(np.arange(len(shapes)), S)
    stage_params = [sum(math.prod(shapes[k]) for k in stage) for stage in stages]
    stage_params[-1] += math.prod(spec.head_shape)
    peak = max(stage_params) * itemsize
    boundary_bytes = [batch * shapes[stage[-1]][0] * spec.height * spec.width * itemsize for stage in stages[:-1]]

    ledger = CommLedger("gpipe_model", S, wire_dtype)
    for it in range(iterations):
        for boundary, nbytes in enumerate(boundary_bytes):
            ledger.record(it + 1, boundary, nbytes, nbytes, peak)
    Logger.debug(f"GPipe model: {S} stages, boundaries {boundary_bytes} bytes, {iterations} iterations")
    return ledger


def ledger_report(ledgers):
    """Compare ledgers by total traffic.

    The ratio of a ledger is its total over the total of the LoFT ledger with the same number of
    workers, or over the first ledger when there is no such LoFT ledger.

    Args:
        ledgers (list[CommLedger]): At least one ledger.

    Returns:
        (list[list]): Rows matching `REPORT_HEADERS`.
    """
    if not ledgers:
        raise PreconditionError("ledger_report needs at least one ledger.")
    loft = {l.num_workers: l for l in ledgers if l.protocol == "loft"}
    rows = []
    for ledger in ledgers:
        reference = loft.get(ledger.num_workers, ledgers[0])
        ratio = ledger.total_bytes / reference.total_bytes if reference.total_bytes else float("nan")
        rows.append([ledger.protocol, ledger.num_workers, ledger.rounds, ledger.total_up, ledger.total_down,
                     ledger.total_bytes, ratio, ledger.peak_param_bytes])
    return rows


REPORT_HEADERS = ["protocol", "workers", "rounds", "bytes_up", "bytes_down", "total_bytes", "ratio", "peak_param_bytes"]

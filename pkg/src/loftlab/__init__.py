"""LOFTLAB
Filter-wise partitioned training, filter rankings and lottery-ticket pruning on simulated workers
"""
from .util import FileManager, Randomizer, Logger
from .errors import (LoftError, DimensionError, ConfigError, PreconditionError, DegenerateInputError,
                     DegenerateKernelError, NumericalError, DivergenceError, PartitionError, CorruptionError,
                     IncompletePartitionError, OverPruneError, FormatError)
from .convstack import ConvStackSpec, ConvStackWeights, init_weights
from .partition import SubnetworkSpec, filter_partition, aggregate, train_local
from .distsim import ScheduleConfig, CommLedger, run_loft_pretrain, run_local_sgd, comm_cost_gpipe, ledger_report
from . import metrics, tensor, theory

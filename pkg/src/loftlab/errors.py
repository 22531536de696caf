"""Exception hierarchy for loftlab.

Every error raised by the library derives from [`LoftError`][loftlab.errors.LoftError] and from the
built-in exception the same condition would raise in plain Python code.
"""


class LoftError(Exception):
    """Base class of all loftlab errors."""


class DimensionError(LoftError, ValueError):
    """Shapes or lengths do not match."""


class ConfigError(LoftError, ValueError):
    """Invalid parameter or configuration file.

    Args:
        message (str): Description of the problem.
        field (str, optional): Name of the offending field.
        lineno (int, optional): Line of the configuration file, when known.
    """
    def __init__(self, message, field=None, lineno=None):
        super().__init__(message)
        self.field = field
        self.lineno = lineno


class PreconditionError(LoftError, ValueError):
    """An operation was called outside its precondition."""


class DegenerateInputError(LoftError, ValueError):
    """A sample has zero norm."""


class DegenerateKernelError(LoftError, ArithmeticError):
    """The infinite-width kernel is not positive definite.

    Args:
        message (str): Description of the problem.
        lambda0 (float): The smallest eigenvalue found.
        dataset_seed (int, optional): Seed of the dataset that produced the kernel.
    """
    def __init__(self, message, lambda0, dataset_seed=None):
        super().__init__(message)
        self.lambda0 = lambda0
        self.dataset_seed = dataset_seed


class NumericalError(LoftError, ArithmeticError):
    """Non-finite values appeared in a computation.

    Args:
        message (str): Description of the problem.
        iteration (int, optional): Iteration at which it happened.
    """
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DivergenceError(NumericalError):
    """Training diverged.

    Args:
        message (str): Description of the problem.
        iteration (int, optional): Iteration at which it happened.
        eta (float, optional): Step size in use.
        lambda0 (float, optional): Smallest kernel eigenvalue (theory runs).
        worker_id (int, optional): Worker that diverged (simulated runs).
        round_id (int, optional): Synchronization round (simulated runs).
    """
    def __init__(self, message, iteration=None, eta=None, lambda0=None, worker_id=None, round_id=None):
        super().__init__(message, iteration)
        self.eta = eta
        self.lambda0 = lambda0
        self.worker_id = worker_id
        self.round_id = round_id


class PartitionError(LoftError, ValueError):
    """Base class for filter partition bookkeeping failures."""


class CorruptionError(PartitionError):
    """Index sets overlap or contain duplicates."""


class IncompletePartitionError(PartitionError):
    """Index sets do not cover a partitioned layer."""


class OverPruneError(LoftError, ValueError):
    """Pruning would leave a layer without filters."""


class FormatError(LoftError, ValueError):
    """A data file does not follow its declared format."""

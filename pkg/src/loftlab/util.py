"""Shared plumbing of loftlab: the package logger, seeded random streams and artifact files.

`Logger` is the `loftlab` logger. Its handler colours records by level (see
[CustomFormatter][loftlab.util.CustomFormatter]) and uncaught exceptions are routed to it by
[handle_exception][loftlab.util.handle_exception]. The CLI sets its level from `--log-level`.

[numba](https://numba.pydata.org/) and [zarr](https://zarr.readthedocs.io/en/stable/) are optional.
Without numba, `njit` returns the function unchanged and the rank-distance kernel runs as plain
Python. Without zarr, a warning is logged once and rank histories are not written.
"""

import os
import sys
import json
import hashlib
import logging
from contextlib import contextmanager

import dill as pickle
import numpy as np

try:
    import zarr
    from zarr import ZipStore
    zarr_available = True
except ImportError:
    logging.warning("zarr >=2,<3 not installed. Zarr functionality will be disabled.")
    zarr_available = False

# If numba is installed import it and use njit decorator otherwise use a dummy decorator
try:
    from numba import njit
except ImportError:
    logging.warning("numba package is not installed. The code will run slower.")
    def njit(f=None, *args, **kwargs):
        def dummy_decorator(func):
            return func

        if callable(f):
            return f
        else:
            return dummy_decorator


class CustomFormatter(logging.Formatter):
    """ Custom logging formatter to add colors based on log level.

    Notes:
        DEBUG and INFO messages are grey, WARNING messages are yellow, ERROR messages are red,
        and CRITICAL messages are bold red.

        The log is formatted as:

        `%(asctime)s - %(name)s - %(levelname)s - %(message)s (%(filename)s:%(lineno)d)`

        For example:

        `2026-01-01 12:00:00,000 - loftlab - INFO - LoFT pretraining: 20 rounds, 2 workers (simulation.py:143)`
    """
    grey = "\x1b[38;20m"
    yellow = "\x1b[33;20m"
    red = "\x1b[31;20m"
    bold_red = "\x1b[31;1m"
    reset = "\x1b[0m"
    string_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s (%(filename)s:%(lineno)d)"

    FORMATS = {
        logging.DEBUG: grey + string_format + reset,
        logging.INFO: grey + string_format + reset,
        logging.WARNING: yellow + string_format + reset,
        logging.ERROR: red + string_format + reset,
        logging.CRITICAL: bold_red + string_format + reset
    }

    def format(self, record):
        log_fmt = self.FORMATS.get(record.levelno)
        formatter = logging.Formatter(log_fmt)
        return formatter.format(record)


Logger = logging.getLogger("loftlab")
handler = logging.StreamHandler()
handler.setFormatter(CustomFormatter())
Logger.addHandler(handler)


def handle_exception(exc_type, exc_value, exc_traceback):
    """ Global exception handler to log uncaught exceptions.

    Args:
        exc_type (type): The exception type.
        exc_value (Exception): The exception instance.
        exc_traceback (traceback): The traceback object.
    """
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return
    Logger.error("Uncaught exception", exc_info=(
        exc_type, exc_value, exc_traceback))


sys.excepthook = handle_exception


class Randomizer:
    """ Random number generator utility class.

    Derives independent reproducible streams from a master seed.

    Streams are counter based: the stream for `(master_seed, purpose, *counters)` is built from
    `np.random.SeedSequence(master_seed, spawn_key=(PURPOSES[purpose], *counters))`.
    A stream depends only on its own key, so adding workers, rounds or cells never perturbs
    the streams that already exist.

    For example, the generator of worker 1 in round 3 of a run seeded with 42:
    ```python
    rng = Randomizer.stream(42, "worker", 3, 1)
    ```
    """
    PURPOSES = {
        "data": 0,
        "init": 1,
        "masks": 2,
        "partition": 3,
        "worker": 4,
        "finetune": 5,
        "moments": 6,
    }

    @classmethod
    def stream(cls, master_seed, purpose, *counters):
        """ Build the generator for one key of the counter-based scheme.

        Args:
            master_seed (int): Non-negative master seed of the run.
            purpose (str): One of the keys of `PURPOSES`.
            *counters (int): Non-negative counters (round, worker, cell, ...).

        Returns:
            (np.random.Generator): A freshly seeded generator.
        """
        if purpose not in cls.PURPOSES:
            raise ValueError(f"Unknown random stream purpose '{purpose}'. Valid purposes: {sorted(cls.PURPOSES)}")
        key = (cls.PURPOSES[purpose],) + tuple(int(c) for c in counters)
        return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=key))


def _csv_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value).replace(",", ";").replace("\n", " ")


class FileManager:
    """ Reads and writes the artifacts of a run under `working_dir`.

    Result tables go to CSV, manifests to JSON, pretrained weights to dill pickles and rank
    histories to Zarr zip stores. Every writer returns the path it wrote, or None when its switch
    is off, so callers only list files that exist.

    Attributes:
        saving_enabled (bool): Master switch for every writer.
        saving_csv_enabled (bool): Result tables.
        saving_json_enabled (bool): Manifests.
        saving_zarr_enabled (bool): Rank histories (off by default, needs zarr 2.x).
        saving_pickle_enabled (bool): Weight checkpoints.
        headers_enabled (bool): First CSV row holds the column names.
        working_dir (str): Directory every filename is relative to.
    """

    saving_enabled = True
    saving_csv_enabled = True
    saving_json_enabled = True
    saving_zarr_enabled = False
    saving_pickle_enabled = True
    headers_enabled = True
    working_dir = "tmp"

    @classmethod
    @contextmanager
    def working_directory(cls, path):
        """ Temporarily point `working_dir` at `path`.

        Args:
            path (str): Directory used inside the `with` block.
        """
        previous = cls.working_dir
        cls.working_dir = str(path)
        try:
            yield cls.working_dir
        finally:
            cls.working_dir = previous

    @classmethod
    def _enabled(cls, kind):
        if cls.saving_enabled and getattr(cls, f"saving_{kind}_enabled"):
            return True
        Logger.debug("Saving %s is disabled.", kind)
        return False

    @classmethod
    def _prepare(cls, filename):
        full_path = os.path.join(cls.working_dir, filename)
        folder = os.path.dirname(full_path)
        if folder:
            os.makedirs(folder, exist_ok=True)
        Logger.debug("Saving to '%s'", full_path)
        return full_path

    @classmethod
    def _existing(cls, filename):
        full_path = os.path.join(cls.working_dir, filename)
        if not os.path.exists(full_path):
            raise FileNotFoundError(f"The file '{full_path}' does not exist.")
        Logger.debug("Loading from '%s'", full_path)
        return full_path

    @classmethod
    def save_csv(cls, csv_list, filename="file.csv", headers=None):
        """ Write a long-format table.

        Rows may mix strings, integers and floats. Floats are written with their shortest exact
        representation so that identical data always yields identical bytes. Commas inside strings
        become semicolons.

        Args:
            csv_list (list[list] | np.ndarray): Rows.
            filename (str): Path relative to `working_dir`.
            headers (list[str], optional): Column names, written when `headers_enabled`.

        Returns:
            (str | None): The full path written, or None when saving is disabled.
        """
        if not cls._enabled("csv"):
            return None
        full_path = cls._prepare(filename)
        cells = np.array([[_csv_cell(v) for v in row] for row in csv_list], dtype=object)
        try:
            with open(full_path, 'w', encoding='utf-8', newline='\n') as f:
                if cls.headers_enabled and headers is not None:
                    f.write(','.join(headers) + '\n')
                if len(cells):
                    np.savetxt(f, cells, fmt='%s', delimiter=',')
        except OSError as e:
            raise OSError(f"Cannot write '{full_path}': {e}") from e
        return full_path

    @classmethod
    def load_csv(cls, filename):
        """ Read a table written by `save_csv`.

        Args:
            filename (str): Path relative to `working_dir`.

        Returns:
            (tuple): The rows as a 2-D array of strings and the headers (None unless `headers_enabled`).
        """
        full_path = cls._existing(filename)
        if not cls.headers_enabled:
            return np.atleast_2d(np.genfromtxt(full_path, delimiter=',', dtype=str, comments=None)), None
        headers = np.atleast_1d(np.genfromtxt(full_path, delimiter=',', dtype=str, max_rows=1, comments=None))
        data = np.genfromtxt(full_path, delimiter=',', dtype=str, skip_header=1, comments=None)
        return np.atleast_2d(data).reshape(-1, headers.size), headers

    @classmethod
    def save_json(cls, dictionary, filename):
        """ Write a dictionary as indented JSON with sorted keys.

        Returns:
            (str | None): The full path written, or None when saving is disabled.
        """
        if not cls._enabled("json"):
            return None
        full_path = cls._prepare(filename)
        with open(full_path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(dictionary, f, indent=4, sort_keys=True)
            f.write('\n')
        return full_path

    @classmethod
    def load_json(cls, filename):
        with open(cls._existing(filename), encoding='utf-8') as f:
            return json.load(f)

    @classmethod
    def save_pickle(cls, obj, filename):
        """ Pickle an object with dill, e.g. the pretrained weights of one seed and protocol.

        Returns:
            (str | None): The full path written, or None when saving is disabled.
        """
        if not cls._enabled("pickle"):
            return None
        full_path = cls._prepare(filename)
        with open(full_path, 'wb') as f:
            pickle.dump(obj, f, recurse=True)
        return full_path

    @classmethod
    def load_pickle(cls, filename):
        with open(cls._existing(filename), 'rb') as f:
            return pickle.load(f)

    @classmethod
    def save_zarr(cls, obj, filename, **kwargs):
        """ Write a dictionary of arrays to a Zarr zip store, one group per key.

        Used for rank histories: one `(rounds + 1, filters)` array of filter indices per layer.
        Integer keys are prefixed with "round_".

        Args:
            obj (dict): Arrays to store.
            filename (str): Path relative to `working_dir`.
            **kwargs (): Attributes of the root group, e.g. the config hash.

        Returns:
            (str | None): The full path written, or None when saving is disabled or zarr is missing.
        """
        if not cls._enabled("zarr"):
            return None
        if not zarr_available:
            Logger.warning("zarr package is not installed. Skipping Zarr saving.")
            return None
        full_path = cls._prepare(filename)
        store = ZipStore(full_path, mode='w')
        try:
            root = zarr.group(store=store)
            for key, value in obj.items():
                name = f"round_{key}" if isinstance(key, int) else str(key)
                root.create_group(name).create_dataset("data", data=np.asarray(value), overwrite=True)
            root.attrs.update(kwargs)
        finally:
            store.close()
        return full_path

    @classmethod
    def sha256(cls, filename):
        """ SHA-256 hex digest of an artifact, as listed in `manifest.json`."""
        digest = hashlib.sha256()
        with open(cls._existing(filename), 'rb') as f:
            for chunk in iter(lambda: f.read(1 << 16), b''):
                digest.update(chunk)
        return digest.hexdigest()

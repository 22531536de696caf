"""Experiment configuration files.

Configurations are INI files read with `configparser`: `key = value` pairs grouped in
`[experiment]`, `[dataset]`, `[model]`, `[schedule]`, `[finetune]` and `[theory]` sections. Lists
are comma separated and `#` or `;` start a comment. Every value is validated in
[`load_config`][loftlab.harness.config.load_config] before anything is computed, and errors name
the offending key and, when known, its line.

A minimal theory configuration:
```ini
[experiment]
mode = theory
seeds = 0, 1, 2

[theory]
m = 256
n = 8
```
"""

import configparser
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, replace

from ..convstack import ConvStackSpec
from ..distsim.protocol import ScheduleConfig
from ..errors import ConfigError
from ..theory.model import TheoryConfig
from ..util import Logger

OUTPUT_DIR_ENV = "LOFTLAB_OUTPUT_DIR"
MODES = ("theory", "system")
SOURCES = ("synthetic_theory", "synthetic_images", "idx_files", "csv_file")
SYSTEM_PROTOCOLS = ("loft", "local_sgd", "dense")


def _int(value):
    return int(value)


def _float(value):
    return float(value)


def _bool(value):
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{value}'")


def _str(value):
    return value.strip()


def _optional_float(value):
    return float(value) if value.strip() else None


def _optional_str(value):
    return value.strip() or None


def _list(cast):
    def parse(value):
        return tuple(cast(item.strip()) for item in value.split(",") if item.strip())
    return parse


# section -> key -> parser
SCHEMA = {
    "experiment": {
        "mode": _str, "seeds": _list(int), "output_dir": _str, "pretrain_epochs": _int,
        "finetune_epochs": _int, "pruning_ratios": _list(float), "protocols": _list(str),
        "ticket_rounds": _list(int), "heatmap_prune_ratio": _optional_float, "max_jobs": _int,
    },
    "dataset": {
        "source": _str, "n": _int, "d_hat": _int, "h": _int, "w": _int, "num_classes": _int,
        "label_bound": _float, "normalize": _bool, "images_path": _optional_str,
        "labels_path": _optional_str, "csv_path": _optional_str, "test_fraction": _float, "noise": _float,
    },
    "model": {
        "channels": _list(int), "sensitive_blocks": _list(int), "strided_blocks": _list(int), "loss": _str,
    },
    "schedule": {
        "workers": _int, "rounds_per_epoch": _int, "local_iterations": _int, "eta": _float,
        "batch_size": _int, "seed_offsets": _list(int), "concurrent": _bool, "freeze_partition": _bool,
        "wire_dtype": _str, "eta_schedule": _str,
    },
    "finetune": {"eta": _float, "batch_size": _int},
    "theory": {
        "m": _int, "n": _int, "d_hat": _int, "p": _int, "q": _int, "kappa": _optional_float, "xi": _float,
        "eta_coeff": _float, "S": _int, "T": _int, "delta": _float, "label_bound": _float, "mask_mode": _str,
        "m_grid": _list(int), "S_grid": _list(int), "moment_trials": _int,
    },
}


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from and what it must look like.

    Attributes:
        source (str): `synthetic_theory`, `synthetic_images`, `idx_files` or `csv_file`.
        n (int): Number of samples (train and test together for image datasets).
        d_hat (int): Channels.
        h (int): Image height.
        w (int): Image width.
        num_classes (int): Classes of image datasets.
        label_bound (float): Bound `C` of theory labels.
        normalize (bool): Normalize every sample to the theory scale.
        images_path (str): IDX image file.
        labels_path (str): IDX label file.
        csv_path (str): CSV file with the label in the first column.
        test_fraction (float): Held-out fraction of image datasets.
        noise (float): Noise level of `synthetic_images`.
    """
    source: str = "synthetic_images"
    n: int = 400
    d_hat: int = 1
    h: int = 8
    w: int = 8
    num_classes: int = 4
    label_bound: float = 1.0
    normalize: bool = False
    images_path: str = None
    labels_path: str = None
    csv_path: str = None
    test_fraction: float = 0.2
    noise: float = 0.5

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got '{self.source}'.", field="source")
        for name in ("n", "d_hat", "h", "w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}.", field=name)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}.", field="num_classes")
        if self.label_bound <= 0:
            raise ConfigError(f"label_bound must be positive, got {self.label_bound}.", field="label_bound")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}.", field="test_fraction")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}.", field="noise")
        if self.source == "idx_files" and not (self.images_path and self.labels_path):
            raise ConfigError("idx_files needs images_path and labels_path.", field="images_path")
        if self.source == "csv_file" and not self.csv_path:
            raise ConfigError("csv_file needs csv_path.", field="csv_path")

    @property
    def p(self):
        return self.h * self.w


@dataclass(frozen=True)
class FinetuneConfig:
    eta: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"finetune eta must be non-negative, got {self.eta}.", field="eta")
        if self.batch_size < 1:
            raise ConfigError(f"finetune batch_size must be positive, got {self.batch_size}.", field="batch_size")


@dataclass(frozen=True)
class TheorySuiteConfig:
    """Sweep of paired-trajectory runs around a base configuration.

    Attributes:
        base (TheoryConfig): Values used where the grids do not override them.
        m_grid (tuple[int]): Widths swept.
        S_grid (tuple[int]): Worker counts swept.
        moment_trials (int): Trials of the mask-moment table.
    """
    base: TheoryConfig
    m_grid: tuple = ()
    S_grid: tuple = ()
    moment_trials: int = 100_000

    def __post_init__(self):
        if not self.m_grid:
            object.__setattr__(self, "m_grid", (self.base.m,))
        if not self.S_grid:
            object.__setattr__(self, "S_grid", (self.base.S,))
        for name in ("m_grid", "S_grid"):
            if any(v < 1 for v in getattr(self, name)):
                raise ConfigError(f"{name} values must be positive, got {getattr(self, name)}.", field=name)
        if self.moment_trials < 10_000:
            raise ConfigError(f"moment_trials must be at least 10000, got {self.moment_trials}.", field="moment_trials")

    def cells(self):
        """Grid points as `(m, S)` pairs in sweep order."""
        return [(m, S) for m in self.m_grid for S in self.S_grid]


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment.

    Attributes:
        mode (str): `theory` or `system`.
        seeds (tuple[int]): Master seeds, one replicate each.
        output_dir (str): Where artifacts go.
        dataset (DatasetSpec): Data.
        pretrain_epochs (int): Pretraining epochs.
        finetune_epochs (int): Finetuning epochs of every ticket.
        rounds_per_epoch (int): Synchronization rounds per pretraining epoch.
        pruning_ratios (tuple[float]): Ratios swept.
        protocols (tuple[str]): Pretraining protocols compared.
        ticket_rounds (tuple[int]): Extra pretraining rounds whose weights are pruned and finetuned.
        heatmap_prune_ratio (float): Truncate heatmap lists to their kept prefix.
        max_jobs (int): Cells run at once.
        stack (ConvStackSpec): Architecture (system mode).
        schedule (ScheduleConfig): Pretraining schedule (system mode).
        finetune (FinetuneConfig): Finetuning hyperparameters.
        theory (TheorySuiteConfig): Theory sweep (theory mode).
    """
    mode: str
    seeds: tuple
    output_dir: str = "loftlab-out"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain_epochs: int = 20
    finetune_epochs: int = 10
    rounds_per_epoch: int = 1
    pruning_ratios: tuple = (0.3, 0.5, 0.8)
    protocols: tuple = SYSTEM_PROTOCOLS
    ticket_rounds: tuple = ()
    heatmap_prune_ratio: float = None
    max_jobs: int = 1
    stack: ConvStackSpec = None
    schedule: ScheduleConfig = None
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    theory: TheorySuiteConfig = None

    def to_dict(self):
        """Canonical form without the output directory."""
        data = asdict(self)
        data.pop("output_dir")
        return data

    def config_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _key_lines(text):
    lines, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        header = _SECTION.match(line)
        if header:
            section = header.group(1).strip()
            continue
        key = _KEY.match(line)
        if key and section is not None and not line[:1].isspace():
            lines[(section, key.group(1).strip())] = lineno
    return lines


def _parse_error_line(error):
    if getattr(error, "errors", None):
        return error.errors[0][0]
    return getattr(error, "lineno", None)


def _read_sections(text, source):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        lineno = _parse_error_line(e)
        raise ConfigError(f"{source}:{lineno}: cannot parse configuration: {e.message}", lineno=lineno) from e
    lines = _key_lines(text)
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"Unknown section [{section}]. Valid sections: {sorted(SCHEMA)}", field=section)
        values[section] = {}
        for key, raw in parser.items(section):
            lineno = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"Unknown key '{key}' in [{section}] (line {lineno}).", field=key, lineno=lineno)
            try:
                values[section][key] = SCHEMA[section][key](raw)
            except ValueError as e:
                raise ConfigError(f"Invalid value for '{key}' in [{section}] (line {lineno}): {e}", field=key, lineno=lineno) from e
    return values, lines


def _with_line(error, section, lines):
    if error.lineno is None and error.field is not None:
        error.lineno = lines.get((section, error.field)) or next(
            (lineno for (_, key), lineno in lines.items() if key == error.field), None)
        if error.lineno is not None:
            error.add_note(f"line {error.lineno}")
    return error


def _build_theory(values):
    section = dict(values.get("theory", {}))
    if "m" not in section or "n" not in section:
        raise ConfigError("[theory] needs at least m and n.", field="m" if "m" not in section else "n")
    grids = {k: section.pop(k) for k in ("m_grid", "S_grid", "moment_trials") if k in section}
    base = TheoryConfig(**section)
    suite = TheorySuiteConfig(base=base, **grids)
    if base.mask_mode == "disjoint" and any(S > m for m in suite.m_grid for S in suite.S_grid):
        raise ConfigError("disjoint masks need S <= m on every grid point.", field="S_grid")
    return suite


def _build_system(values, dataset, pretrain_epochs, ticket_rounds, protocols):
    model = values.get("model", {})
    stack = ConvStackSpec.from_channels(dataset.d_hat, dataset.h, dataset.w, model.get("channels", (8, 16, 16, 32)),
                                        dataset.num_classes, sensitive_blocks=model.get("sensitive_blocks", (0,)),
                                        strided_blocks=model.get("strided_blocks", ()),
                                        loss=model.get("loss", "cross_entropy"))
    sched = dict(values.get("schedule", {}))
    rounds_per_epoch = sched.pop("rounds_per_epoch", 1)
    if rounds_per_epoch < 1:
        raise ConfigError(f"rounds_per_epoch must be positive, got {rounds_per_epoch}.", field="rounds_per_epoch")
    schedule = ScheduleConfig(rounds=pretrain_epochs * rounds_per_epoch, checkpoint_rounds=ticket_rounds, **sched)
    if "loft" in protocols:
        stack.validate_workers(schedule.workers)
    return stack, schedule, rounds_per_epoch


def parse_config(text, source="<string>"):
    """Parse and validate configuration text.

    Args:
        text (str): INI text.
        source (str): Name used in error messages.

    Returns:
        (ExperimentConfig): The validated configuration.
    """
    values, lines = _read_sections(text, source)
    experiment = dict(values.get("experiment", {}))
    section = "experiment"
    try:
        mode = experiment.pop("mode", None)
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{mode}'.", field="mode")
        if not experiment.get("seeds"):
            raise ConfigError("seeds must list at least one seed.", field="seeds")
        if any(s < 0 for s in experiment["seeds"]):
            raise ConfigError("seeds must be non-negative.", field="seeds")
        for ratio in experiment.get("pruning_ratios", ()) + tuple(filter(None, [experiment.get("heatmap_prune_ratio")])):
            if not 0.0 <= ratio < 1.0:
                raise ConfigError(f"pruning ratio outside [0,1): {ratio}", field="pruning_ratios")
        for name in ("pretrain_epochs", "finetune_epochs", "max_jobs"):
            if experiment.get(name, 1) < (0 if name == "finetune_epochs" else 1):
                raise ConfigError(f"{name} is out of range: {experiment[name]}.", field=name)
        unknown = set(experiment.get("protocols", ())) - set(SYSTEM_PROTOCOLS)
        if unknown:
            raise ConfigError(f"Unknown protocols {sorted(unknown)}. Valid protocols: {SYSTEM_PROTOCOLS}", field="protocols")
        if "output_dir" in experiment:
            experiment["output_dir"] = experiment["output_dir"] or "loftlab-out"

        if mode == "theory":
            section = "theory"
            theory = _build_theory(values)
            section = "dataset"
            side = theory.base.side if theory.base.side**2 == theory.base.p else 1
            dataset = DatasetSpec(**{"source": "synthetic_theory", "n": theory.base.n, "d_hat": theory.base.d_hat,
                                     "h": side, "w": theory.base.p // side, "label_bound": theory.base.label_bound,
                                     "normalize": True, **values.get("dataset", {})})
            if (dataset.n, dataset.d_hat, dataset.p) != (theory.base.n, theory.base.d_hat, theory.base.p):
                raise ConfigError("[dataset] dimensions disagree with [theory] n, d_hat and p.", field="n")
            return ExperimentConfig(mode=mode, dataset=dataset, theory=theory, **experiment)

        section = "dataset"
        dataset = DatasetSpec(**values.get("dataset", {}))
        if dataset.source == "synthetic_theory":
            raise ConfigError("system mode needs an image dataset, not synthetic_theory.", field="source")
        section = "model"
        stack, schedule, rounds_per_epoch = _build_system(values, dataset, experiment.get("pretrain_epochs", 20),
                                                          experiment.get("ticket_rounds", ()),
                                                          experiment.get("protocols", SYSTEM_PROTOCOLS))
        section = "finetune"
        finetune = FinetuneConfig(**values.get("finetune", {}))
        return ExperimentConfig(mode=mode, dataset=dataset, stack=stack, schedule=schedule, finetune=finetune,
                                rounds_per_epoch=rounds_per_epoch, **experiment)
    except ConfigError as e:
        raise _with_line(e, section, lines)


def load_config(path, env=None):
    """Read and validate a configuration file.

    `LOFTLAB_OUTPUT_DIR` in the environment overrides `output_dir`.

    Args:
        path (str): Path of the INI file.
        env (dict, optional): Environment to read the override from, `os.environ` by default.

    Returns:
        (ExperimentConfig): The validated configuration.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"The file '{path}' does not exist.")
    with open(path, encoding="utf-8") as f:
        cfg = parse_config(f.read(), source=str(path))
    env = os.environ if env is None else env
    if env.get(OUTPUT_DIR_ENV):
        cfg = with_overrides(cfg, output_dir=env[OUTPUT_DIR_ENV])
    Logger.info(f"Loaded {cfg.mode} configuration from '{path}' ({len(cfg.seeds)} seeds)")
    return cfg


def with_overrides(cfg, seed=None, output_dir=None):
    """Copy of a configuration with the seeds or the output directory replaced."""
    changes = {}
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}.", field="seeds")
        changes["seeds"] = (int(seed),)
    if output_dir is not None:
        changes["output_dir"] = str(output_dir)
    return replace(cfg, **changes)

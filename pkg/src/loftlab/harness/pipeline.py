"""Experiment pipelines.

[`run_ticket_pipeline`][loftlab.harness.pipeline.run_ticket_pipeline] pretrains a conv stack with
every configured protocol, prunes the result at every ratio and finetunes each ticket.
[`run_theory_suite`][loftlab.harness.pipeline.run_theory_suite] sweeps paired masked/dense
trajectories of the theory model over a grid of widths and worker counts.

Both return a [`ResultBundle`][loftlab.harness.pipeline.ResultBundle] of long-format rows. A
failing cell is logged, recorded with an `error:` status and skipped; the other cells still run.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..convstack import accuracy, init_weights
from ..distsim import REPORT_HEADERS, CommLedger, comm_cost_gpipe, ledger_report, make_protocol
from ..errors import LoftError, PreconditionError
from ..metrics import apply_ticket, distance_to_final, pairwise_heatmap, prune_filters
from ..partition import SubnetworkSpec, make_batches, train_local
from ..theory.loft import MomentTable, mask_moments, run_paired_trajectories
from ..util import Logger, Randomizer
from .datasets import load_dataset

RESULT_HEADERS = ["mode", "seed", "cell", "epoch", "metric", "value", "status"]
CURVE_HEADERS = ["metric", "t", "value", "seed"]
HEATMAP_HEADERS = ["layer", "t1", "t2", "distance"]
TICKET_SUMMARY_HEADERS = ["protocol", "ratio", "ticket_round", "median_accuracy", "seeds_ok"]
THEORY_SUMMARY_HEADERS = ["m", "S", "median_weight_dev", "median_output_dev_sum", "median_weight_drift",
                          "median_final_loss", "seeds_ok"]
OK = "ok"


@dataclass
class ResultBundle:
    """Everything a pipeline produced, ready to be written out.

    Attributes:
        mode (str): `system` or `theory`.
        config_hash (str): Hash of the configuration that produced the bundle.
        results (list[list]): Rows of `results.csv`.
        curves (list[list]): Rows of `curves.csv`.
        heatmap (list[list]): Rows of `heatmap.csv`.
        ledger (list[list]): Rows of `ledger.csv`.
        ledger_summary (list[list]): Rows of `ledger_summary.csv`.
        moments (list[list]): Rows of `moments.csv`.
        summary (list[list]): Rows of `summary.csv`.
        summary_headers (list[str]): Columns of `summary.csv`.
        weights (dict): Objects pickled under `checkpoint/`.
        snapshots (dict): Rank histories written as Zarr stores when enabled.
        failures (int): Number of failed cells.
    """
    mode: str = ""
    config_hash: str = ""
    results: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    heatmap: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    ledger_summary: list = field(default_factory=list)
    moments: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    summary_headers: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)
    failures: int = 0

    @property
    def ok(self):
        return self.failures == 0


def _cell(**items):
    return ";".join(f"{key}={value}" for key, value in items.items())


def _status(error):
    return f"error:{type(error).__name__}: {error}"


def _median(values):
    return float(np.median(values)) if len(values) else float("nan")


def _run_jobs(jobs, max_jobs):
    if max_jobs <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=max_jobs) as executor:
        return list(executor.map(lambda job: job(), jobs))


def finetune(weights, spec, data, finetune_cfg, epochs, rng):
    """Plain SGD on a ticket, one pass over the shuffled training set per epoch.

    Args:
        weights (ConvStackWeights): Ticket weights.
        spec (ConvStackSpec): Ticket architecture.
        data (Dataset): Train and test samples.
        finetune_cfg (FinetuneConfig): Step size and batch size.
        epochs (int): Number of epochs.
        rng (np.random.Generator): Shuffling generator.

    Returns:
        (tuple): Final weights and the test accuracy before training and after every epoch.
    """
    sub = SubnetworkSpec.full(spec)
    accuracies = [accuracy(weights, spec, *data.test)]
    for epoch in range(epochs):
        batches = make_batches(*data.train, finetune_cfg.batch_size, rng)
        weights = train_local(weights, sub, batches, len(batches), finetune_cfg.eta)
        accuracies.append(accuracy(weights, spec, *data.test))
        Logger.debug(f"Finetune epoch {epoch + 1}: accuracy {accuracies[-1]:.4f}")
    return weights, accuracies


@dataclass
class _JobOutput:
    results: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    heatmap: list = field(default_factory=list)
    ledger: CommLedger = None
    weights: object = None
    snapshots: dict = None
    accuracies: dict = field(default_factory=dict)
    failures: int = 0


def _ticket_job(cfg, seed, protocol, data, initial, first_seed):
    out = _JobOutput()
    stack = cfg.stack
    try:
        runner = make_protocol(protocol, initial, stack, data.train, cfg.schedule, seed)
        weights, ledger, snapshots = runner.run()
    except LoftError as e:
        Logger.warning(f"Pretraining {protocol} failed for seed {seed}: {e}")
        out.results.append(["system", seed, _cell(protocol=protocol, stage="pretrain"), 0, "test_accuracy", float("nan"), _status(e)])
        out.failures += 1
        return out

    T = cfg.schedule.rounds
    out.ledger, out.weights = ledger, weights
    out.snapshots = {layer: np.stack([s.indices for s in series]) for layer, series in snapshots.items()}
    out.results.append(["system", seed, _cell(protocol=protocol, stage="pretrain"), cfg.pretrain_epochs,
                        "test_accuracy", accuracy(weights, stack, *data.test), OK])
    if snapshots:
        for t, value in enumerate(distance_to_final(snapshots)):
            out.curves.append([f"distance_to_final/{protocol}", t, value, seed])
        if first_seed:
            for layer, series in snapshots.items():
                heatmap = pairwise_heatmap(series, cfg.heatmap_prune_ratio)
                out.heatmap += [[f"{protocol}/{layer}", i, j, heatmap[i, j]]
                                for i in range(len(series)) for j in range(len(series))]

    sources = [(r, runner.checkpoints[r]) for r in sorted(set(cfg.ticket_rounds)) if r != T] + [(T, weights)]
    for ticket_round, source in sources:
        for ratio in cfg.pruning_ratios:
            cell = _cell(protocol=protocol, ratio=ratio, ticket_round=ticket_round)
            try:
                mask = prune_filters(source, stack, ratio)
                pruned, pruned_spec = apply_ticket(source, stack, mask)
                _, accuracies = finetune(pruned, pruned_spec, data, cfg.finetune, cfg.finetune_epochs,
                                         Randomizer.stream(seed, "finetune", ticket_round))
            except LoftError as e:
                Logger.warning(f"Cell {cell} failed for seed {seed}: {e}")
                out.results.append(["system", seed, cell, cfg.finetune_epochs, "test_accuracy", float("nan"), _status(e)])
                out.failures += 1
                continue
            out.results += [["system", seed, cell, epoch, "test_accuracy", value, OK]
                            for epoch, value in enumerate(accuracies)]
            out.accuracies[(protocol, ratio, ticket_round)] = accuracies[-1]
    Logger.info(f"Seed {seed}, {protocol}: {len(sources) * len(cfg.pruning_ratios)} tickets finetuned")
    return out


def _gpipe_ledger(cfg):
    """Pipeline-parallel traffic for the same number of optimizer steps, with one stage per worker."""
    sched = cfg.schedule
    stages = min(len(cfg.stack.conv_shapes), max(2, sched.workers))
    return comm_cost_gpipe(cfg.stack, sched.batch_size, sched.rounds * sched.local_iterations, stages, sched.wire_dtype)


def run_ticket_pipeline(cfg):
    """Pretrain, prune and finetune for every seed, protocol and ratio.

    Args:
        cfg (ExperimentConfig): A `system` mode configuration.

    Returns:
        (ResultBundle): Rows of all cells.
    """
    if cfg.mode != "system":
        raise PreconditionError(f"run_ticket_pipeline needs a system configuration, got mode '{cfg.mode}'.")
    bundle = ResultBundle(mode="system", config_hash=cfg.config_hash(), summary_headers=TICKET_SUMMARY_HEADERS)
    jobs, keys = [], []
    for seed in cfg.seeds:
        data = load_dataset(cfg.dataset, Randomizer.stream(seed, "data"))
        initial = init_weights(cfg.stack, Randomizer.stream(seed, "init"))
        for protocol in cfg.protocols:
            jobs.append(lambda seed=seed, protocol=protocol, data=data, initial=initial:
                        _ticket_job(cfg, seed, protocol, data, initial, seed == cfg.seeds[0]))
            keys.append((seed, protocol))
    Logger.info(f"Ticket pipeline: {len(jobs)} pretraining jobs, max {cfg.max_jobs} at once")
    outputs = _run_jobs(jobs, cfg.max_jobs)

    ledgers, names = [], []
    for (seed, protocol), out in zip(keys, outputs):
        bundle.results += out.results
        bundle.curves += out.curves
        bundle.heatmap += out.heatmap
        bundle.failures += out.failures
        if out.weights is not None:
            bundle.weights[f"checkpoint/seed{seed}_{protocol}.pkl"] = out.weights
            bundle.snapshots[f"snapshots/seed{seed}_{protocol}.zarr"] = out.snapshots
        if seed == cfg.seeds[0] and out.ledger is not None:
            ledgers.append(out.ledger)
            names.append(protocol)
            bundle.ledger += [[protocol] + row[1:] for row in out.ledger.to_rows()]
    gpipe = _gpipe_ledger(cfg)
    ledgers.append(gpipe)
    names.append(gpipe.protocol)
    bundle.ledger += gpipe.to_rows()
    bundle.ledger_summary = [[name] + row[1:] for name, row in zip(names, ledger_report(ledgers))]

    for protocol in cfg.protocols:
        for ticket_round in sorted(set(cfg.ticket_rounds) | {cfg.schedule.rounds}):
            for ratio in cfg.pruning_ratios:
                values = [out.accuracies[(protocol, ratio, ticket_round)] for out in outputs
                          if (protocol, ratio, ticket_round) in out.accuracies]
                bundle.summary.append([protocol, ratio, ticket_round, _median(values), len(values)])
    return bundle


def _theory_cell(base, seed, m, S, data):
    cfg = replace(base, m=m, S=S, seed=seed)
    return run_paired_trajectories(cfg, data.train, dataset_seed=seed)


def run_theory_suite(cfg):
    """Paired trajectories over the `(m, S)` grid for every seed, plus the mask-moment table.

    Args:
        cfg (ExperimentConfig): A `theory` mode configuration.

    Returns:
        (ResultBundle): Rows of all cells.
    """
    if cfg.mode != "theory":
        raise PreconditionError(f"run_theory_suite needs a theory configuration, got mode '{cfg.mode}'.")
    suite = cfg.theory
    base = suite.base
    bundle = ResultBundle(mode="theory", config_hash=cfg.config_hash(), summary_headers=THEORY_SUMMARY_HEADERS)
    reports = {}
    for seed in cfg.seeds:
        try:
            data = load_dataset(cfg.dataset, Randomizer.stream(seed, "data"), q=base.q)
        except LoftError as e:
            Logger.warning(f"Dataset of seed {seed} failed: {e}")
            bundle.results.append(["theory", seed, _cell(stage="data"), 0, "loss", float("nan"), _status(e)])
            bundle.failures += 1
            continue
        for m, S in suite.cells():
            cell = _cell(m=m, S=S)
            try:
                report = _theory_cell(base, seed, m, S, data)
            except LoftError as e:
                Logger.warning(f"Theory cell {cell} failed for seed {seed}: {e}")
                bundle.results.append(["theory", seed, cell, base.T, "weight_dev", float("nan"), _status(e)])
                bundle.failures += 1
                continue
            reports.setdefault((m, S), []).append(report)
            for metric, value in (("weight_dev", report.weight_dev), ("output_dev_sum", report.output_dev_sum),
                                  ("weight_drift", report.weight_drift), ("loss", report.loss_curve[-1]),
                                  ("gd_loss", report.gd_loss_curve[-1]), ("eta", report.eta),
                                  ("lambda0", report.lambda0), ("theta", report.theta)):
                bundle.results.append(["theory", seed, cell, base.T, metric, value, OK])
            for name, curve in (("loss", report.loss_curve), ("weight_dev", report.weight_dev_curve),
                                ("output_dev", report.output_dev_curve), ("drift", report.drift_curve)):
                bundle.curves += [[f"{name}[{cell}]", t, value, seed] for t, value in enumerate(curve)]
        Logger.info(f"Theory suite: seed {seed} done ({len(suite.cells())} cells)")

    for m, S in suite.cells():
        cell_reports = reports.get((m, S), [])
        medians = [_median([getattr(r, name) for r in cell_reports])
                   for name in ("weight_dev", "output_dev_sum", "weight_drift")]
        bundle.summary.append([m, S, *medians, _median([r.loss_curve[-1] for r in cell_reports]), len(cell_reports)])

    for S in suite.S_grid:
        table = mask_moments(base.xi, S, suite.moment_trials, Randomizer.stream(cfg.seeds[0], "moments", S))
        bundle.moments += table.to_rows()
    return bundle


MOMENT_HEADERS = MomentTable.HEADERS
LEDGER_SUMMARY_HEADERS = REPORT_HEADERS

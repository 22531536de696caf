"""Fast built-in oracle checks, run by `loft-lab check`."""

import math
from dataclasses import dataclass

import numpy as np

from ..convstack import ConvStackSpec, ConvStackWeights, convstack_forward, init_weights, loss_and_grad, loss_gradient
from ..distsim import analytic_round_bytes, comm_cost_gpipe
from ..metrics import RankedFilterList, build_rank_map, filter_distance, footrule
from ..partition import aggregate, filter_partition
from ..tensor import finite_difference_gradient, normalize_dataset, relative_error
from ..theory.loft import gd_step, loft_step, mask_moments, sample_masks
from ..theory.model import TheoryConfig, forward_full, grad_full, init_theory_model
from ..util import Logger

GRADIENT_TOLERANCE = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _theory_state(rng, m=16, n=4, xi=1.0, S=1):
    cfg = TheoryConfig(m=m, n=n, p=9, q=9, xi=xi, S=S)
    X = np.stack(normalize_dataset(rng.standard_normal((n, 1, 3, 3)), 9))
    y = rng.uniform(-1.0, 1.0, size=n)
    return init_theory_model(cfg, (X, y), rng=rng)


def check_loft_matches_gd(rng):
    worst = 0.0
    for _ in range(20):
        state = _theory_state(rng)
        W_loft, _ = loft_step(state, sample_masks(state.m, 1, 1.0, "bernoulli", rng))
        worst = max(worst, float(np.max(np.abs(W_loft - gd_step(state)))))
    return worst <= 1e-12, f"max |loft - gd| = {worst:.3e}"


def check_theory_gradient(rng):
    state = _theory_state(rng, m=8)

    def objective(W):
        return 0.5 * float(np.sum((forward_full(state.with_weights(W)) - state.y) ** 2))
    error = relative_error(grad_full(state), finite_difference_gradient(objective, state.W))
    return error < GRADIENT_TOLERANCE, f"relative error {error:.3e}"


def check_conv_gradient(rng):
    spec = ConvStackSpec.from_channels(1, 4, 4, [2, 4, 4, 2], 3)
    weights = init_weights(spec, rng)
    X, y = rng.standard_normal((3, 1, 4, 4)), np.array([0, 1, 2])
    _, grads = loss_gradient(weights, spec, X, y)
    errors = []
    for layer in range(len(weights.convs)):
        def objective(F, layer=layer):
            convs = list(weights.convs)
            convs[layer] = F
            logits, _ = convstack_forward(ConvStackWeights(convs, weights.head), spec, X)
            return loss_and_grad(logits, y, spec.loss)[0]
        errors.append(relative_error(grads.convs[layer], finite_difference_gradient(objective, weights.convs[layer])))
    error = max(errors)
    return error < GRADIENT_TOLERANCE, f"max relative error {error:.3e}"


def check_metric_values(rng):
    swap = filter_distance(RankedFilterList.from_indices([0, 1]), RankedFilterList.from_indices([1, 0]))
    missing = filter_distance(RankedFilterList.from_indices([0, 1]), RankedFilterList.from_indices([0, 2]))
    rule = footrule(build_rank_map(RankedFilterList.from_indices([0, 1]), RankedFilterList.from_indices([1, 0])))
    passed = (abs(swap - 1.5 * math.log(2)) < 1e-9 and abs(missing - 0.5 * math.log(1.5)) < 1e-9 and rule == 2.0)
    return passed, f"swap {swap:.6f}, missing {missing:.6f}, footrule {rule:g}"


def check_partition_roundtrip(rng):
    spec = ConvStackSpec.from_channels(1, 8, 8, [8, 16, 16, 32], 4)
    weights = init_weights(spec, rng)
    worst = 0.0
    for S in (1, 2, 4):
        merged = aggregate(weights, filter_partition(weights, spec, S, rng))
        worst = max(worst, float(np.max(np.abs(merged.flat() - weights.flat()))))
    return worst <= 1e-12, f"max |aggregate(partition(w)) - w| = {worst:.3e}"


def check_ledger_ordering(rng):
    spec = ConvStackSpec.from_channels(1, 8, 8, [8, 16, 16, 32], 4)
    details, passed = [], True
    for S in (2, 4):
        loft = 2 * S * analytic_round_bytes(spec, S, "loft")
        local = 2 * S * analytic_round_bytes(spec, S, "local_sgd")
        gpipe = comm_cost_gpipe(spec, 32, 1, S).total_bytes
        passed = passed and loft < local and loft < gpipe
        details.append(f"S={S}: loft {loft}, local_sgd {local}, gpipe {gpipe}")
    return passed, "; ".join(details)


def check_mask_coverage(rng):
    table = mask_moments(0.5, 4, 20_000, rng)
    row = table["P_active"]
    return row.within(4), f"P_active {row.estimate:.4f} vs theta {row.reference:.4f}"


CHECKS = [
    ("loft_matches_gd", check_loft_matches_gd),
    ("theory_gradient", check_theory_gradient),
    ("conv_gradient", check_conv_gradient),
    ("metric_values", check_metric_values),
    ("partition_roundtrip", check_partition_roundtrip),
    ("ledger_ordering", check_ledger_ordering),
    ("mask_coverage", check_mask_coverage),
]


def run_checks(seed=0):
    """Run every check with its own generator.

    Args:
        seed (int): Seed of the generators.

    Returns:
        (list[CheckResult]): One result per check, in order.
    """
    results = []
    for index, (name, check) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, index])
        try:
            passed, detail = check(rng)
        except Exception as e:
            Logger.exception(f"Check {name} raised")
            passed, detail = False, f"{type(e).__name__}: {e}"
        Logger.debug(f"Check {name}: {'pass' if passed else 'FAIL'} ({detail})")
        results.append(CheckResult(name, bool(passed), detail))
    return results

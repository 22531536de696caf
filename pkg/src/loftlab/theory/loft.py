"""Masked filter-wise training of the theory model and its dense baseline.

Each global iteration draws `S` binary masks over the `m` filters. Filter `r` is updated with the
sum of the subnetwork gradients it took part in, divided by the number of subnetworks that
contained it (`N`), and is left untouched when it took part in none (`N_perp = 0`). The dense
baseline takes gradient steps on the full network scaled by `theta / xi`, where `theta` is the
probability that a filter is trained at all.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError, DivergenceError, NumericalError, PreconditionError
from ..tensor import check_finite
from ..util import Logger, Randomizer
from .model import (filter_outputs, forward_full, gradient_features, grad_full,
                    init_theory_model, subnetwork_gradient)

DIVERGENCE_FACTOR = 1e6
MIN_MOMENT_TRIALS = 10_000


def coverage_probability(xi, S):
    """Probability `1 - (1 - xi)**S` that a filter appears in at least one of `S` masks."""
    return 1.0 - (1.0 - xi) ** S


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    """Filter membership of the `S` subnetworks of one iteration.

    Attributes:
        bits (np.ndarray): Binary matrix `(m, S)`.
        mode (str): `bernoulli` or `disjoint`.
        xi (float): Sampling probability (`1 / S` in disjoint mode).
    """
    bits: np.ndarray
    mode: str
    xi: float

    @property
    def counts(self):
        return self.bits.sum(axis=1)

    @property
    def normalizer(self):
        return np.maximum(self.counts, 1)

    @property
    def active(self):
        return np.minimum(self.counts, 1)


@dataclass(frozen=True, eq=False)
class StepReport:
    """Bookkeeping of one masked update.

    Attributes:
        N (np.ndarray): Normalizers `max(sum_s M[r, s], 1)`.
        N_perp (np.ndarray): Activity indicators `min(sum_s M[r, s], 1)`.
        g (np.ndarray): Update direction `(m, d)`.
        u_tilde (np.ndarray | None): Per-filter mixed outputs `(m, n)` when materialized.
    """
    N: np.ndarray
    N_perp: np.ndarray
    g: np.ndarray
    u_tilde: np.ndarray = None


def sample_masks(m, S, xi, mode, rng):
    """Draw the masks of one iteration.

    In `bernoulli` mode every entry is an independent `Bern(xi)` draw. In `disjoint` mode a random
    permutation of the filters is split into `S` groups whose sizes differ by at most one.

    Args:
        m (int): Number of filters.
        S (int): Number of subnetworks.
        xi (float): Inclusion probability (bernoulli mode).
        mode (str): `bernoulli` or `disjoint`.
        rng (np.random.Generator): Random generator.

    Returns:
        (MaskMatrix): The sampled masks.
    """
    if int(S) != S or S < 1:
        raise ConfigError(f"S must be a positive integer, got {S}.", field="S")
    if m < 1:
        raise ConfigError(f"m must be positive, got {m}.", field="m")
    if mode == "bernoulli":
        if not 0.0 < xi <= 1.0:
            raise ConfigError(f"xi must lie in (0, 1], got {xi}.", field="xi")
        bits = (rng.random((m, S)) < xi).astype(np.int8)
        return MaskMatrix(bits=bits, mode=mode, xi=float(xi))
    if mode == "disjoint":
        bits = np.zeros((m, S), dtype=np.int8)
        for s, rows in enumerate(np.array_split(rng.permutation(m), S)):
            bits[rows, s] = 1
        return MaskMatrix(bits=bits, mode=mode, xi=1.0 / S)
    raise ConfigError(f"Mask mode must be 'bernoulli' or 'disjoint', got '{mode}'.", field="mask_mode")


def exact_nu2_offdiag(xi, S):
    """Exact `E[nu**2]` for two distinct filters under independent Bernoulli masks.

    Given `K >= 1` memberships of the first filter, the shared count is `Bin(K, xi)`, so
    `E[nu**2] = xi**2 theta + xi (1 - xi) E[1/K; K >= 1]`.
    """
    inverse_moment = sum(math.comb(S, k) * xi**k * (1 - xi) ** (S - k) / k for k in range(1, S + 1))
    return xi**2 * coverage_probability(xi, S) + xi * (1 - xi) * inverse_moment


@dataclass(frozen=True)
class MomentRow:
    """One Monte Carlo moment with its reference values.

    Attributes:
        quantity (str): Name of the moment.
        estimate (float): Sample mean.
        stderr (float): Standard error of the sample mean.
        reference (float): Exact expectation.
        listed (float): Closed form as commonly stated. Equal to `reference` except for `E_nu2_offdiag`.
        resolution (float): One sample's weight in the mean, `1 / trials`.
    """
    quantity: str
    estimate: float
    stderr: float
    reference: float
    listed: float
    resolution: float = 0.0

    def within(self, sigmas):
        return abs(self.estimate - self.reference) <= sigmas * max(self.stderr, self.resolution) + 1e-15


@dataclass(frozen=True)
class MomentTable:
    """Monte Carlo moments of the mixing coefficients `nu[r, r'] = (N_perp[r] / N[r]) sum_s M[r, s] M[r', s]`."""
    xi: float
    S: int
    trials: int
    theta: float
    rows: tuple

    HEADERS = ["xi", "S", "trials", "theta", "quantity", "estimate", "stderr", "reference", "listed"]

    def __getitem__(self, quantity):
        for row in self.rows:
            if row.quantity == quantity:
                return row
        raise KeyError(quantity)

    def to_rows(self):
        return [[self.xi, self.S, self.trials, self.theta, r.quantity, r.estimate, r.stderr, r.reference, r.listed]
                for r in self.rows]


def mask_moments(xi, S, trials, rng):
    """Estimate the moments of the mixing coefficients by simulation.

    Args:
        xi (float): Inclusion probability.
        S (int): Number of subnetworks.
        trials (int): Number of simulated filter pairs, at least 10**4.
        rng (np.random.Generator): Random generator.

    Returns:
        (MomentTable): Estimates with standard errors and reference values.
    """
    if trials < MIN_MOMENT_TRIALS:
        raise ConfigError(f"mask_moments needs at least {MIN_MOMENT_TRIALS} trials, got {trials}.", field="moment_trials")
    if int(S) != S or S < 1:
        raise ConfigError(f"S must be a positive integer, got {S}.", field="S")
    if not 0.0 < xi <= 1.0:
        raise ConfigError(f"xi must lie in (0, 1], got {xi}.", field="xi")
    theta = coverage_probability(xi, S)
    bits = rng.random((trials, 2, S)) < xi
    counts = bits.sum(axis=2)
    active = np.minimum(counts[:, 0], 1)
    scale = active / np.maximum(counts[:, 0], 1)
    nu_off = scale * np.sum(bits[:, 0] & bits[:, 1], axis=1)
    nu_diag = scale * counts[:, 0]

    def row(quantity, samples, reference, listed=None):
        samples = samples.astype(np.float64)
        return MomentRow(quantity=quantity,
                         estimate=float(samples.mean()),
                         stderr=float(samples.std(ddof=1) / math.sqrt(trials)),
                         reference=float(reference),
                         listed=float(reference if listed is None else listed),
                         resolution=1.0 / trials)

    rows = (
        row("E_nu_offdiag", nu_off, xi * theta),
        row("E_nu_diag", nu_diag, theta),
        row("E_nu2_offdiag", nu_off**2, exact_nu2_offdiag(xi, S), xi**2 * theta**2 + theta**2 * (1 - xi) / S),
        row("E_nu2_diag", nu_diag**2, theta),
        row("P_active", active, theta),
    )
    return MomentTable(xi=float(xi), S=int(S), trials=int(trials), theta=theta, rows=rows)


def _check_masks(state, masks):
    if masks.bits.ndim != 2 or masks.bits.shape[0] != state.m:
        raise DimensionError(f"Masks must have shape (m={state.m}, S), got {masks.bits.shape}.")


def loft_step(state, masks, materialize=False, iteration=None):
    """One masked update `W[r] -= eta * (N_perp[r] / N[r]) * sum_s grad_s[r]`.

    Args:
        state (TheoryModelState): Current state.
        masks (MaskMatrix): Masks of this iteration.
        materialize (bool): Also return the per-filter mixed outputs.
        iteration (int, optional): Iteration context for errors.

    Returns:
        (tuple): `(new W, StepReport)`.
    """
    _check_masks(state, masks)
    outputs = filter_outputs(state)
    features = gradient_features(state)
    bits = masks.bits.astype(np.float64)
    g = np.zeros_like(state.W)
    for s in range(bits.shape[1]):
        if bits[:, s].any():
            g += subnetwork_gradient(outputs, features, state.y, bits[:, s])
    N, N_perp = masks.normalizer, masks.active
    g *= (N_perp / N)[:, None]
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"Non-finite update direction at iteration {iteration}.", iteration=iteration)
    u_tilde = mixed_outputs(outputs, bits, N, N_perp) if materialize else None
    return state.W - state.eta * g, StepReport(N=N, N_perp=N_perp, g=g, u_tilde=u_tilde)


def mixed_outputs(outputs, bits, N, N_perp):
    """Per-filter mixture `u_tilde[r, i] = (N_perp[r] / N[r]) sum_s M[r, s] u_s[i]` of subnetwork outputs."""
    sub_outputs = outputs @ bits
    return (N_perp / N)[:, None] * (bits @ sub_outputs.T)


def mixed_output_direction(state, masks):
    """Update direction written through the mixed outputs.

    `g[r] = sum_i (u_tilde[r, i] - N_perp[r] y[i]) B[i, r]`, equal to the direction used by
    [`loft_step`][loftlab.theory.loft.loft_step].
    """
    _check_masks(state, masks)
    outputs = filter_outputs(state)
    features = gradient_features(state)
    N, N_perp = masks.normalizer, masks.active
    u_tilde = mixed_outputs(outputs, masks.bits.astype(np.float64), N, N_perp)
    return np.einsum('ri,ird->rd', u_tilde - N_perp[:, None] * state.y[None, :], features)


def gd_step(state, theta=1.0):
    """Dense baseline step `W -= eta * (theta / xi) * grad_full(W)`."""
    return state.W - state.eta * (theta / state.xi) * check_finite(grad_full(state), "full gradient")


@dataclass(frozen=True, eq=False)
class DeviationReport:
    """Paired-trajectory measurements.

    Attributes:
        weight_dev (float): `||W_T - What_T||_F**2`.
        output_dev_sum (float): `sum_{t<T} ||u_t - uhat_t||**2`.
        loss_curve (np.ndarray): `||u_t - y||**2` of the masked trajectory, `t = 0..T`.
        weight_drift (float): `max_{t, r} ||w_{r,t} - w_{r,0}||`.
        gd_loss_curve (np.ndarray): `||uhat_t - y||**2` of the dense trajectory.
        weight_dev_curve (np.ndarray): `||W_t - What_t||_F**2`.
        output_dev_curve (np.ndarray): `||u_t - uhat_t||**2`.
        drift_curve (np.ndarray): `max_r ||w_{r,t} - w_{r,0}||`.
        eta (float): Step size.
        lambda0 (float): Smallest eigenvalue of the infinite-width kernel.
        theta (float): Coverage probability.
    """
    weight_dev: float
    output_dev_sum: float
    loss_curve: np.ndarray
    weight_drift: float
    gd_loss_curve: np.ndarray = field(repr=False, default=None)
    weight_dev_curve: np.ndarray = field(repr=False, default=None)
    output_dev_curve: np.ndarray = field(repr=False, default=None)
    drift_curve: np.ndarray = field(repr=False, default=None)
    eta: float = float("nan")
    lambda0: float = float("nan")
    theta: float = float("nan")

    HEADERS = ["t", "loss", "weight_dev", "output_dev", "drift"]

    def to_rows(self):
        return [[t, self.loss_curve[t], self.weight_dev_curve[t], self.output_dev_curve[t], self.drift_curve[t]]
                for t in range(len(self.loss_curve))]


def run_paired_trajectories(cfg, data, dataset_seed=None):
    """Run the masked and the dense trajectories from a shared initialization.

    Fresh masks are drawn every iteration from the `masks` stream of `cfg.seed`.

    Args:
        cfg (TheoryConfig): Run configuration.
        data (tuple): Normalized `(X, y)`.
        dataset_seed (int, optional): Reported when the kernel is degenerate.

    Returns:
        (DeviationReport): Per-iteration measurements.
    """
    state = init_theory_model(cfg, data, dataset_seed=dataset_seed)
    mask_rng = Randomizer.stream(cfg.seed, "masks")
    theta = coverage_probability(cfg.xi, cfg.S) if cfg.mask_mode == "bernoulli" else 1.0
    W0 = state.W.copy()
    loft_state, gd_state = state, state
    T = cfg.T
    loss, gd_loss = np.zeros(T + 1), np.zeros(T + 1)
    weight_dev, output_dev, drift = np.zeros(T + 1), np.zeros(T + 1), np.zeros(T + 1)
    Logger.debug(f"Paired trajectories: m={cfg.m}, S={cfg.S}, xi={cfg.xi}, T={T}, eta={state.eta:.3e}")

    for t in range(T + 1):
        u, u_hat = forward_full(loft_state), forward_full(gd_state)
        loss[t] = np.sum((u - state.y) ** 2)
        gd_loss[t] = np.sum((u_hat - state.y) ** 2)
        output_dev[t] = np.sum((u - u_hat) ** 2)
        weight_dev[t] = np.sum((loft_state.W - gd_state.W) ** 2)
        drift[t] = np.max(np.linalg.norm(loft_state.W - W0, axis=1))
        if not np.isfinite(loss[t]) or (loss[0] > 0 and loss[t] > DIVERGENCE_FACTOR * loss[0]):
            raise DivergenceError(
                f"Loss diverged at iteration {t}: {loss[t]:.3e} vs initial {loss[0]:.3e} (eta={state.eta:.3e}, lambda0={state.lambda0:.3e}).",
                iteration=t, eta=state.eta, lambda0=state.lambda0)
        if t == T:
            break
        masks = sample_masks(cfg.m, cfg.S, cfg.xi, cfg.mask_mode, mask_rng)
        W_next, _ = loft_step(loft_state, masks, iteration=t)
        loft_state = loft_state.with_weights(W_next)
        gd_state = gd_state.with_weights(gd_step(gd_state, theta))

    return DeviationReport(weight_dev=float(weight_dev[T]),
                           output_dev_sum=float(output_dev[:T].sum()),
                           loss_curve=loss,
                           weight_drift=float(drift.max()),
                           gd_loss_curve=gd_loss,
                           weight_dev_curve=weight_dev,
                           output_dev_curve=output_dev,
                           drift_curve=drift,
                           eta=state.eta, lambda0=state.lambda0, theta=theta)


def fit_log_slope(curve, start=0, stop=None, plateau=0.0):
    """Least-squares slope of `log(curve[t] - plateau)` against `t` over `[start, stop)`.

    Args:
        curve (np.ndarray): Positive values.
        start (int): First index.
        stop (int, optional): End index, defaults to the full length.
        plateau (float): Level subtracted before taking logs.

    Returns:
        (float): The fitted slope per step.
    """
    values = np.asarray(curve, dtype=np.float64)[start:stop] - plateau
    if len(values) < 2:
        raise PreconditionError("Need at least two points to fit a slope.")
    if np.any(values <= 0):
        raise PreconditionError("Curve must stay above the plateau to fit a log slope.")
    t = np.arange(start, start + len(values), dtype=np.float64)
    return float(np.polyfit(t, np.log(values), 1)[0])


def predicted_log_rate(theta, eta, lambda0):
    """Per-step log contraction `log(1 - theta eta lambda0 / 2)` of the squared error."""
    return math.log(1.0 - theta * eta * lambda0 / 2.0)

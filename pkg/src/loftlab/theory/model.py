"""One-hidden-layer convolutional model with a fixed output layer.

The model acts on patched images: sample `i` is a matrix of `p` extended pixels `x_ij` of length
`d = q * d_hat`, stored as `patches[i, j, :]`. Filter `r` has weights `W[r]` and fixed output
coefficients `a[r, j]` in `{+1, -1} / (p * sqrt(m))`:

    f(x_i; W) = xi * sum_r sum_j a[r, j] * relu(<x_ij, W[r]>)

A subnetwork keeps only the filters selected by a binary mask and carries no `xi` scaling.
Gradients are those of half the squared error, and the ReLU indicator includes zero.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, DegenerateKernelError, DimensionError, PreconditionError
from ..tensor import PatchSpec, check_finite, patch
from ..util import Logger, Randomizer

KERNEL_EIGENVALUE_FLOOR = 1e-12


@dataclass(frozen=True)
class TheoryConfig:
    """Configuration of a theory run.

    Attributes:
        m (int): Number of filters.
        n (int): Number of samples.
        d_hat (int): Channels per pixel.
        p (int): Pixels per image (a perfect square when `q > 1`).
        q (int): Pixels per patch.
        kappa (float): Initialization scale. Defaults to `1 / sqrt(n)`.
        xi (float): Mask probability in `(0, 1]`.
        eta_coeff (float): Step size is `eta_coeff * lambda0 / n**2`.
        S (int): Number of subnetworks per iteration.
        T (int): Number of global iterations.
        delta (float): Failure probability, reported only.
        seed (int): Master seed.
        label_bound (float): Bound `C` on the labels.
        mask_mode (str): `bernoulli` or `disjoint`.
    """
    m: int
    n: int
    d_hat: int = 1
    p: int = 16
    q: int = 9
    kappa: float = None
    xi: float = 1.0
    eta_coeff: float = 1.0
    S: int = 1
    T: int = 100
    delta: float = 0.1
    seed: int = 0
    label_bound: float = 1.0
    mask_mode: str = "bernoulli"

    def __post_init__(self):
        for name in ("m", "n", "d_hat", "p", "q", "S", "T"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}.", field=name)
        PatchSpec(self.q)
        if self.q > 1 and math.isqrt(self.p) ** 2 != self.p:
            raise ConfigError(f"p must be a perfect square to patch with q={self.q}, got {self.p}.", field="p")
        if not 0.0 < self.xi <= 1.0:
            raise ConfigError(f"xi must lie in (0, 1], got {self.xi}.", field="xi")
        if self.eta_coeff <= 0:
            raise ConfigError(f"eta_coeff must be positive, got {self.eta_coeff}.", field="eta_coeff")
        if self.label_bound <= 0:
            raise ConfigError(f"label_bound must be positive, got {self.label_bound}.", field="label_bound")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}.", field="delta")
        if self.mask_mode not in ("bernoulli", "disjoint"):
            raise ConfigError(f"mask_mode must be 'bernoulli' or 'disjoint', got '{self.mask_mode}'.", field="mask_mode")
        if self.kappa is None:
            object.__setattr__(self, "kappa", 1.0 / math.sqrt(self.n))
        elif self.kappa < 0:
            raise ConfigError(f"kappa must be non-negative, got {self.kappa}.", field="kappa")

    @property
    def d(self):
        return self.q * self.d_hat

    @property
    def side(self):
        return math.isqrt(self.p)


@dataclass(frozen=True, eq=False)
class TheoryModelState:
    """Training state of the theory model.

    Attributes:
        W (np.ndarray): First-layer weights `(m, d)`.
        a (np.ndarray): Fixed output coefficients `(m, p)`.
        xi (float): Mask probability.
        kappa (float): Initialization scale.
        eta (float): Step size.
        patches (np.ndarray): Patched dataset `(n, p, d)`.
        y (np.ndarray): Labels `(n,)`.
        lambda0 (float): Smallest eigenvalue of the infinite-width kernel.
        H_inf (np.ndarray): Infinite-width kernel `(n, n)`.
    """
    W: np.ndarray
    a: np.ndarray
    xi: float
    kappa: float
    eta: float
    patches: np.ndarray
    y: np.ndarray
    lambda0: float = field(default=float("nan"))
    H_inf: np.ndarray = field(default=None, repr=False)

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def n(self):
        return self.patches.shape[0]

    @property
    def p(self):
        return self.patches.shape[1]

    @property
    def d(self):
        return self.patches.shape[2]

    @property
    def Xhat(self):
        """Patched samples as `(n, d, p)`, one extended-pixel column per pixel."""
        return self.patches.transpose(0, 2, 1)

    def with_weights(self, W):
        return replace(self, W=W)


def patch_dataset(X, q):
    """Patch every image of a dataset.

    Args:
        X (np.ndarray): Images `(n, d_hat, h, w)`.
        q (int): Pixels per patch.

    Returns:
        (np.ndarray): Patches `(n, p, d)` with `p = h * w` and `d = q * d_hat`.
    """
    spec = PatchSpec(q)
    return np.stack([patch(x, spec).T for x in X])


def indicator_expectation(u, v):
    """Probability that a standard Gaussian `w` has `<w, u> >= 0` and `<w, v> >= 0`.

    Uses the arc-cosine identity `(pi - arccos(rho)) / (2 pi)`, with `rho` the cosine similarity.
    Zero vectors give 0.

    Args:
        u (np.ndarray): First vector.
        v (np.ndarray): Second vector.

    Returns:
        (float): The expectation.
    """
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    rho = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return float((np.pi - np.arccos(rho)) / (2 * np.pi))


def indicator_expectation_mc(u, v, samples, rng, chunk=100_000):
    """Monte Carlo estimate of [`indicator_expectation`][loftlab.theory.model.indicator_expectation].

    Args:
        u (np.ndarray): First vector.
        v (np.ndarray): Second vector.
        samples (int): Number of Gaussian draws.
        rng (np.random.Generator): Random generator.
        chunk (int): Draws per batch.

    Returns:
        (float): The estimate.
    """
    hits = 0
    remaining = samples
    while remaining > 0:
        size = min(chunk, remaining)
        w = rng.standard_normal((size, len(u)))
        hits += int(np.count_nonzero((w @ u >= 0) & (w @ v >= 0)))
        remaining -= size
    return hits / samples


def smallest_eigenvalue(H, method="eigh", max_iterations=10000, tol=1e-15):
    """Smallest eigenvalue of a symmetric positive definite matrix.

    Args:
        H (np.ndarray): Symmetric matrix.
        method (str): `eigh` for a full decomposition, `inverse_iteration` for inverse power iteration.
        max_iterations (int): Iteration cap of `inverse_iteration`.
        tol (float): Relative change of the Rayleigh quotient that stops `inverse_iteration`.

    Returns:
        (float): The smallest eigenvalue.
    """
    if method == "eigh":
        return float(np.linalg.eigvalsh(H)[0])
    if method != "inverse_iteration":
        raise ConfigError(f"Unknown eigenvalue method '{method}'.", field="method")
    v = np.ones(H.shape[0]) / math.sqrt(H.shape[0])
    value = float(v @ H @ v)
    for _ in range(max_iterations):
        v = np.linalg.solve(H, v)
        v /= np.linalg.norm(v)
        new_value = float(v @ H @ v)
        if abs(new_value - value) <= tol * max(abs(new_value), 1.0):
            return new_value
        value = new_value
    Logger.warning(f"Inverse iteration did not converge in {max_iterations} iterations.")
    return value


def ntk_infinite(patches, dataset_seed=None):
    """Infinite-width kernel of the model and its smallest eigenvalue.

    `H[i, k] = p**-2 * sum_j <x_ij, x_kj> * E[1{<w, x_ij> >= 0} 1{<w, x_kj> >= 0}]`, with the
    expectation in closed form.

    Args:
        patches (np.ndarray): Patched dataset `(n, p, d)`.
        dataset_seed (int, optional): Reported in the error when the kernel is degenerate.

    Returns:
        (tuple): `(H, lambda0)`.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3:
        raise DimensionError(f"Patched dataset must have shape (n, p, d), got {patches.shape}.")
    p = patches.shape[1]
    gram = np.einsum('ijd,kjd->jik', patches, patches)
    norms = np.linalg.norm(patches, axis=2).T
    outer = norms[:, :, None] * norms[:, None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(outer > 0, gram / np.where(outer > 0, outer, 1.0), 0.0)
    expectation = np.where(outer > 0, (np.pi - np.arccos(np.clip(rho, -1.0, 1.0))) / (2 * np.pi), 0.0)
    H = (gram * expectation).sum(axis=0) / p**2
    H = (H + H.T) / 2
    lambda0 = smallest_eigenvalue(H)
    if lambda0 <= KERNEL_EIGENVALUE_FLOOR:
        raise DegenerateKernelError(
            f"Infinite-width kernel is degenerate: lambda0={lambda0:.3e}"
            + (f" (dataset seed {dataset_seed})" if dataset_seed is not None else ""),
            lambda0=lambda0, dataset_seed=dataset_seed)
    Logger.debug(f"Infinite-width kernel: n={H.shape[0]}, lambda0={lambda0:.6e}")
    return H, lambda0


def init_theory_model(cfg, data, rng=None, dataset_seed=None):
    """Initialize the model on a normalized dataset.

    `W` rows are drawn from `N(0, kappa**2 I)` and `a` entries are random signs scaled by
    `1 / (p sqrt(m))`. The step size is `eta_coeff * lambda0 / n**2`.

    Args:
        cfg (TheoryConfig): Run configuration.
        data (tuple): `(X, y)` with images `X` of shape `(n, d_hat, h, w)` and labels `y` of shape `(n,)`.
        rng (np.random.Generator, optional): Defaults to the `init` stream of `cfg.seed`.
        dataset_seed (int, optional): Reported when the kernel is degenerate.

    Returns:
        (TheoryModelState): The initial state.
    """
    X, y = data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    expected = (cfg.n, cfg.d_hat, cfg.side, cfg.side) if cfg.q > 1 else None
    if X.ndim != 4 or (expected is not None and X.shape != expected) or len(X) != cfg.n:
        raise DimensionError(f"Expected images of shape {expected or (cfg.n, cfg.d_hat, '*', '*')}, got {X.shape}.")
    if y.shape != (cfg.n,):
        raise DimensionError(f"Expected {cfg.n} labels, got shape {y.shape}.")
    norms = np.linalg.norm(X.reshape(cfg.n, -1), axis=1)
    if not np.allclose(norms, 1.0 / math.sqrt(cfg.q), rtol=0.0, atol=1e-9):
        raise PreconditionError(f"Samples must have Frobenius norm q**-0.5 = {1.0 / math.sqrt(cfg.q):.6f}; normalize the dataset first.")
    if np.any(np.abs(y) > cfg.label_bound):
        raise PreconditionError(f"Labels exceed the label bound {cfg.label_bound}.")

    patches = patch_dataset(X, cfg.q)
    H_inf, lambda0 = ntk_infinite(patches, dataset_seed=dataset_seed)
    if rng is None:
        rng = Randomizer.stream(cfg.seed, "init")
    p = patches.shape[1]
    W = cfg.kappa * rng.standard_normal((cfg.m, cfg.d))
    a = rng.choice(np.array([-1.0, 1.0]), size=(cfg.m, p)) / (p * math.sqrt(cfg.m))
    eta = cfg.eta_coeff * lambda0 / cfg.n**2
    Logger.debug(f"Theory model initialized: m={cfg.m}, n={cfg.n}, d={cfg.d}, p={p}, eta={eta:.3e}")
    return TheoryModelState(W=W, a=a, xi=cfg.xi, kappa=cfg.kappa, eta=eta,
                            patches=patches, y=y, lambda0=lambda0, H_inf=H_inf)


def _preactivations(state):
    return np.einsum('ijd,rd->irj', state.patches, state.W)


def filter_outputs(state):
    """Per-filter contributions `h[i, r] = sum_j a[r, j] relu(<x_ij, W[r]>)`, shape `(n, m)`."""
    return np.einsum('irj,rj->ir', np.maximum(_preactivations(state), 0.0), state.a)


def gradient_features(state):
    """Per-filter output gradients `B[i, r] = sum_j a[r, j] 1{<x_ij, W[r]> >= 0} x_ij`, shape `(n, m, d)`."""
    active = (_preactivations(state) >= 0).astype(np.float64)
    return np.einsum('irj,rj,ijd->ird', active, state.a, state.patches)


def _check_mask(state, mask_col):
    mask_col = np.asarray(mask_col, dtype=np.float64)
    if mask_col.shape != (state.m,):
        raise DimensionError(f"Mask must have length m={state.m}, got shape {mask_col.shape}.")
    return mask_col


def forward_full(state):
    """Outputs of the full network, scaled by `xi`. Shape `(n,)`."""
    return state.xi * filter_outputs(state).sum(axis=1)


def forward_subnetwork(state, mask_col):
    """Outputs of the subnetwork selected by a binary mask. Shape `(n,)`."""
    mask_col = _check_mask(state, mask_col)
    return filter_outputs(state) @ mask_col


def grad_subnetwork(state, mask_col):
    """Gradient of half the squared error of a subnetwork with respect to `W`.

    Rows of filters outside the mask are zero.

    Args:
        state (TheoryModelState): Current state.
        mask_col (np.ndarray): Binary mask of length `m`.

    Returns:
        (np.ndarray): Gradient `(m, d)`.
    """
    mask_col = _check_mask(state, mask_col)
    return subnetwork_gradient(filter_outputs(state), gradient_features(state), state.y, mask_col)


def subnetwork_gradient(outputs, features, y, mask_col):
    """[`grad_subnetwork`][loftlab.theory.model.grad_subnetwork] from precomputed `filter_outputs` and `gradient_features`."""
    residual = outputs @ mask_col - y
    return mask_col[:, None] * np.einsum('i,ird->rd', residual, features)


def grad_full(state):
    """Gradient of half the squared error of the full network with respect to `W`, shape `(m, d)`."""
    residual = forward_full(state) - state.y
    return state.xi * np.einsum('i,ird->rd', residual, gradient_features(state))


def ntk_finite(state):
    """Finite-width kernel `H[i, k] = sum_r <B[i, r], B[k, r]>` at the current weights."""
    B = gradient_features(state)
    return check_finite(np.einsum('ird,krd->ik', B, B), "finite-width kernel")


def squared_error(state):
    """`||u - y||**2` of the full network."""
    return float(np.sum((forward_full(state) - state.y) ** 2))


def initial_loss_bound(p, label_bound, n):
    """Upper bound `(1/p + C**2) n` on the expected initial squared error."""
    return (1.0 / p + label_bound**2) * n

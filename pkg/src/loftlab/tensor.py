"""Dense tensor operations shared by the theory model and the convolutional stack.

Arrays are plain 64-bit `numpy.ndarray` objects. Convolutions are fixed to 3x3 kernels with
stride 1 and zero padding 1, so spatial dimensions are preserved. Every public operation is a pure
function of its inputs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DegenerateInputError, NumericalError
from .util import Logger

KERNEL_SIZE = 3


@dataclass(frozen=True)
class PatchSpec:
    """Patching operator parameters.

    Attributes:
        q (int): Pixels per patch. Must be the square of an odd side length (1, 9, 25, ...).
        stride (int): Always 1.
    """
    q: int = 9
    stride: int = 1

    def __post_init__(self):
        if self.q < 1 or self.q % 2 == 0 or math.isqrt(self.q) ** 2 != self.q:
            raise ConfigError(f"Patch size q must be the square of an odd integer, got {self.q}.", field="q")
        if self.stride != 1:
            raise ConfigError(f"Only stride 1 is supported, got {self.stride}.", field="stride")

    @property
    def side(self):
        return math.isqrt(self.q)

    @property
    def pad(self):
        return (self.side - 1) // 2


def check_finite(array, what="array", iteration=None):
    """Raise [`NumericalError`][loftlab.errors.NumericalError] if `array` holds NaN or Inf.

    Args:
        array (np.ndarray): Values to check.
        what (str): Name used in the error message.
        iteration (int, optional): Iteration context for the error.

    Returns:
        (np.ndarray): `array` itself.
    """
    if not np.all(np.isfinite(array)):
        where = f" at iteration {iteration}" if iteration is not None else ""
        raise NumericalError(f"Non-finite values in {what}{where}.", iteration=iteration)
    return array


def _as_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x
    if x.ndim == 2:
        side = math.isqrt(x.shape[1])
        if side * side != x.shape[1]:
            raise DimensionError(f"Cannot arrange {x.shape[1]} pixels on a square grid.")
        return x.reshape(x.shape[0], side, side)
    raise DimensionError(f"Expected an input of shape (d_hat, h, w) or (d_hat, p), got {x.shape}.")


def patch(x, spec):
    """Extended-pixel matrix of an image.

    Column `j` stacks, channel after channel, the `q` spatial neighbours of pixel `j`
    (row-major within the patch), with zeros outside the image.

    Args:
        x (np.ndarray): Image of shape `(d_hat, h, w)`, or `(d_hat, p)` with `p` a perfect square.
        spec (PatchSpec): Patch parameters.

    Returns:
        (np.ndarray): Matrix of shape `(q * d_hat, h * w)`.
    """
    image = _as_image(x)
    d_hat, h, w = image.shape
    pad, k = spec.pad, spec.side
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    # (d_hat, h, w, k, k) -> (d_hat, k, k, h, w)
    return np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(d_hat * spec.q, h * w)


def unpatch_sum(xhat, d_hat, h, w, spec):
    """Adjoint of [`patch`][loftlab.tensor.patch]: scatter-add every patch entry back to its pixel.

    Interior pixels receive exactly `q` copies of their value from `patch(x)`.

    Args:
        xhat (np.ndarray): Matrix of shape `(q * d_hat, h * w)`.
        d_hat (int): Number of channels.
        h (int): Image height.
        w (int): Image width.
        spec (PatchSpec): Patch parameters.

    Returns:
        (np.ndarray): Image of shape `(d_hat, h, w)`.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.shape != (spec.q * d_hat, h * w):
        raise DimensionError(f"Expected patched shape {(spec.q * d_hat, h * w)}, got {xhat.shape}.")
    pad, k = spec.pad, spec.side
    cols = xhat.reshape(d_hat, k, k, h, w)
    out = np.zeros((d_hat, h + 2 * pad, w + 2 * pad))
    for ky in range(k):
        for kx in range(k):
            out[:, ky:ky + h, kx:kx + w] += cols[:, ky, kx]
    return out[:, pad:pad + h, pad:pad + w]


def _windows(x):
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return np.lib.stride_tricks.sliding_window_view(padded, (KERNEL_SIZE, KERNEL_SIZE), axis=(2, 3))


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"Expected a feature map (c, h, w) or a batch (b, c, h, w), got shape {x.shape}.")


def _check_filters(filters, channels):
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 4 or filters.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
        raise DimensionError(f"Filters must have shape (c_out, c_in, 3, 3), got {filters.shape}.")
    if filters.shape[1] != channels:
        raise DimensionError(f"Filters expect {filters.shape[1]} input channels, input has {channels}.")
    return filters


def conv2d_forward(input, filters):
    """3x3, stride 1, zero-padded 2-D convolution (cross-correlation, no bias).

    Args:
        input (np.ndarray): Feature map `(c_in, h, w)` or batch `(b, c_in, h, w)`.
        filters (np.ndarray): Filter bank `(c_out, c_in, 3, 3)`.

    Returns:
        (np.ndarray): Output `(c_out, h, w)` or `(b, c_out, h, w)`.
    """
    x, single = _batched(input)
    filters = _check_filters(filters, x.shape[1])
    out = np.einsum('bchwkl,ockl->bohw', _windows(x), filters)
    check_finite(out, "convolution output")
    return out[0] if single else out


def conv2d_backward(input, filters, grad_out):
    """Gradients of [`conv2d_forward`][loftlab.tensor.conv2d_forward].

    Args:
        input (np.ndarray): Forward input `(c_in, h, w)` or `(b, c_in, h, w)`.
        filters (np.ndarray): Filter bank `(c_out, c_in, 3, 3)`.
        grad_out (np.ndarray): Gradient with respect to the forward output.

    Returns:
        (tuple): `(grad_input, grad_filters)` with the shapes of `input` and `filters`.
    """
    x, single = _batched(input)
    filters = _check_filters(filters, x.shape[1])
    g, _ = _batched(grad_out)
    expected = (x.shape[0], filters.shape[0]) + x.shape[2:]
    if g.shape != expected:
        raise DimensionError(f"grad_out must have shape {expected}, got {g.shape}.")
    grad_filters = np.einsum('bchwkl,bohw->ockl', _windows(x), g)
    grad_input = np.einsum('bohwkl,ockl->bchw', _windows(g), filters[:, :, ::-1, ::-1])
    check_finite(grad_filters, "filter gradient")
    return (grad_input[0] if single else grad_input), grad_filters


def relu(z):
    return np.maximum(z, 0.0)


def normalize_dataset(X, q):
    """Rescale every sample to Frobenius norm `q ** -0.5`.

    Pairwise distinctness is checked; duplicates are reported with a warning.

    Args:
        X (list[np.ndarray]): Samples of identical shape.
        q (int): Patch size.

    Returns:
        (list[np.ndarray]): The rescaled samples.
    """
    target = 1.0 / math.sqrt(q)
    samples = [np.asarray(x, dtype=np.float64) for x in X]
    out = []
    for i, x in enumerate(samples):
        norm = np.linalg.norm(x)
        if norm == 0.0:
            raise DegenerateInputError(f"Sample {i} has zero norm and cannot be normalized.")
        out.append(x * (target / norm))
    if samples and len({x.shape for x in samples}) == 1:
        flat = np.stack([x.ravel() for x in samples])
        unique = np.unique(flat, axis=0)
        if len(unique) < len(flat):
            Logger.warning(f"Dataset contains {len(flat) - len(unique)} duplicate sample(s); distinct inputs are required for a positive definite kernel.")
    return out


def finite_difference_gradient(func, x, eps=1e-5):
    """Central finite-difference gradient of a scalar function.

    Args:
        func (callable): Function of one array argument returning a float.
        x (np.ndarray): Point at which the gradient is evaluated (not modified).
        eps (float): Step size.

    Returns:
        (np.ndarray): Gradient estimate with the shape of `x`.
    """
    x0 = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat, gflat = x0.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + eps
        fplus = func(x0)
        flat[j] = original - eps
        fminus = func(x0)
        flat[j] = original
        gflat[j] = (fplus - fminus) / (2 * eps)
    return grad


def relative_error(a, b):
    """Relative distance `||a - b|| / max(||a||, ||b||)`, zero when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / scale)

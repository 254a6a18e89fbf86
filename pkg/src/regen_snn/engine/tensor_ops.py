"""
Tensor Ops - 2-D convolution, kernel flipping and average pooling.

Indexing convention: every "convolution" here is a cross-correlation,
    conv2d_valid(x, k)[i, j] = sum_{a,b} x[i + a, j + b] * k[a, b]
with no implicit kernel flip. The decoder applies flip2d explicitly, so
weight tying is a visible flip of the encoder storage. All gradient
identities in the learning code rely on this convention, in particular
    <conv2d_valid(x, k), g> == <x, conv2d_full(g, flip2d(k))>.
"""
import numpy as np
from scipy import signal

from .errors import ShapeError


def _as_grid(values: np.ndarray, name: str) -> np.ndarray:
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D grid, got shape {grid.shape}")
    return grid


def conv2d_valid(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, output (m - n + 1) x (m - n + 1)."""
    grid = _as_grid(grid, "input")
    kernel = _as_grid(kernel, "kernel")
    if kernel.shape[0] > grid.shape[0] or kernel.shape[1] > grid.shape[1]:
        raise ShapeError(f"kernel {kernel.shape} larger than input {grid.shape}")
    return signal.correlate2d(grid, kernel, mode="valid")


def conv2d_full(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Full cross-correlation: zero-pad by n - 1 on every side, then valid."""
    grid = _as_grid(grid, "input")
    kernel = _as_grid(kernel, "kernel")
    return signal.correlate2d(grid, kernel, mode="full")


def flip2d(kernel: np.ndarray) -> np.ndarray:
    """Reverse a kernel in both dimensions."""
    kernel = np.asarray(kernel)
    if kernel.ndim != 2:
        raise ShapeError(f"kernel must be 2-D, got shape {kernel.shape}")
    return kernel[::-1, ::-1].copy()


def avg_pool(grid: np.ndarray, window: int) -> np.ndarray:
    """Mean over non-overlapping window x window blocks."""
    grid = _as_grid(grid, "potentials")
    rows, cols = grid.shape
    if window < 1 or rows % window or cols % window:
        raise ShapeError(f"grid {rows}x{cols} not divisible by pooling window {window}")
    if window == 1:
        return grid.copy()
    blocks = grid.reshape(rows // window, window, cols // window, window)
    return blocks.mean(axis=(1, 3))


def avg_pool_maps(maps: np.ndarray, window: int) -> np.ndarray:
    """avg_pool applied to every map of a (maps, rows, cols) array."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ShapeError(f"expected (maps, rows, cols), got {maps.shape}")
    n, rows, cols = maps.shape
    if window < 1 or rows % window or cols % window:
        raise ShapeError(f"maps {rows}x{cols} not divisible by pooling window {window}")
    blocks = maps.reshape(n, rows // window, window, cols // window, window)
    return blocks.mean(axis=(2, 4))


def correlate_valid_maps(inputs: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """
    Valid correlation of every input map with every kernel.

    Args:
        inputs: (L, H, W)
        kernels: (K, h, w), with h <= H and w <= W

    Returns:
        (K, L, H - h + 1, W - w + 1) where out[k, l] == conv2d_valid(inputs[l], kernels[k]).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if inputs.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"expected 3-D inputs and kernels, got {inputs.shape} and {kernels.shape}")
    h, w = kernels.shape[1:]
    if h > inputs.shape[1] or w > inputs.shape[2]:
        raise ShapeError(f"kernels {kernels.shape[1:]} larger than inputs {inputs.shape[1:]}")
    windows = np.lib.stride_tricks.sliding_window_view(inputs, (h, w), axis=(1, 2))
    return np.einsum("lijab,kab->klij", windows, kernels)


def sum_correlate_valid(inputs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    Per output map k, the sum over input maps l of conv2d_valid(inputs[l], weights[k, l]).

    Args:
        inputs: (L, H, W)
        weights: (K, L, kh, kw)

    Returns:
        (K, H - kh + 1, W - kw + 1)
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or weights.ndim != 4 or weights.shape[1] != inputs.shape[0]:
        raise ShapeError(f"inputs {inputs.shape} incompatible with weights {weights.shape}")
    kh, kw = weights.shape[2:]
    if kh > inputs.shape[1] or kw > inputs.shape[2]:
        raise ShapeError(f"kernel {kh}x{kw} larger than inputs {inputs.shape[1:]}")
    windows = np.lib.stride_tricks.sliding_window_view(inputs, (kh, kw), axis=(1, 2))
    return np.einsum("lijab,klab->kij", windows, weights)

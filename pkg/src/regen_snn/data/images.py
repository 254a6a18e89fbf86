"""
Graymap export - accumulated spike counts and pixel grids as binary PGM.

Format (binary "P5" portable graymap):
    P5\n<cols> <rows>\n255\n<rows*cols unsigned bytes, row-major>

Counts are rescaled linearly so the largest count maps to 255; an all-zero
grid is written black.
"""
import logging
import re
from pathlib import Path
from typing import Union

import numpy as np

from ..engine.errors import DataFormatError, ExportError

logger = logging.getLogger(__name__)

_HEADER_RE = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def rescale_counts(grid: np.ndarray) -> np.ndarray:
    """Map non-negative counts linearly onto 0..255 (max count -> 255)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataFormatError(f"graymap grid must be 2-D, got shape {grid.shape}")
    if np.any(grid < 0):
        raise DataFormatError("graymap counts must be non-negative")
    peak = grid.max() if grid.size else 0.0
    if peak <= 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    return np.rint(grid * (255.0 / peak)).astype(np.uint8)


def write_grayscale_image(grid: np.ndarray, path: Union[str, Path], rescale: bool = True) -> Path:
    """
    Write one grid as a binary PGM.

    With rescale=False the grid must already hold 0..255 values (raw pixels).
    """
    path = Path(path)
    if rescale:
        pixels = rescale_counts(grid)
    else:
        pixels = np.asarray(grid)
        if pixels.ndim != 2 or pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
            raise DataFormatError("raw graymap pixels must be a 2-D grid in 0..255")
        pixels = pixels.astype(np.uint8)
    rows, cols = pixels.shape
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    except OSError as exc:
        raise ExportError(f"cannot write graymap {path}: {exc}") from exc
    logger.debug("Wrote %dx%d graymap %s", rows, cols, path)
    return path


def write_channels(grids: np.ndarray, path: Union[str, Path], rescale: bool = True) -> list[Path]:
    """
    Write a (maps, rows, cols) stack. A single map goes to `path`; several
    maps go to `<stem>_ch<k><suffix>`, one file per map.
    """
    grids = np.asarray(grids)
    if grids.ndim == 2:
        grids = grids[np.newaxis]
    path = Path(path)
    if grids.shape[0] == 1:
        return [write_grayscale_image(grids[0], path, rescale)]
    return [
        write_grayscale_image(grid, path.with_name(f"{path.stem}_ch{k}{path.suffix}"), rescale)
        for k, grid in enumerate(grids)
    ]


def write_kernel_grid(kernels: np.ndarray, path: Union[str, Path], border: int = 1) -> Path:
    """
    Tile (n, kh, kw) kernels into one image, each kernel min-max scaled on
    its own, separated by black borders.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    n, kh, kw = kernels.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    canvas = np.zeros((rows * (kh + border) + border, cols * (kw + border) + border), dtype=np.float64)
    for index, kernel in enumerate(kernels):
        r, c = divmod(index, cols)
        span = kernel.max() - kernel.min()
        tile = (kernel - kernel.min()) / span if span > 0 else np.zeros_like(kernel)
        top, left = border + r * (kh + border), border + c * (kw + border)
        canvas[top:top + kh, left:left + kw] = tile
    return write_grayscale_image(canvas, path)


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary PGM written by write_grayscale_image."""
    raw = Path(path).read_bytes()
    match = _HEADER_RE.match(raw)
    if not match:
        raise DataFormatError(f"{path} is not a binary PGM")
    cols, rows, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit graymaps are supported (maxval {maxval})")
    body = raw[match.end():]
    if len(body) != rows * cols:
        raise DataFormatError(f"{path}: expected {rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols).copy()

"""
Metrics - append-only training log, reconstruction error and sparsity.

The log is written as CSV with the columns:
    timestamp, kind, layer, pass, index, value, extra

kind is one of: regen_loss, count_error, image_loss, readout_loss,
accuracy, sparsity, rate_hz. `layer` is the topology layer index (empty
for readout and accuracy rows), `pass` the presentation pass or readout
epoch, `index` an image index, subset size or evaluation iteration.
"""
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from ..engine.errors import ExportError, ShapeError
from ..engine.models import SpikeRaster

logger = logging.getLogger(__name__)

COLUMNS = ["timestamp", "kind", "layer", "pass", "index", "value", "extra"]
KINDS = ("regen_loss", "count_error", "image_loss", "readout_loss", "accuracy", "sparsity", "rate_hz")


@dataclass
class MetricsLog:
    """Single-writer, append-only metric rows."""
    rows: list[dict] = field(default_factory=list)

    def record(
        self,
        kind: str,
        value: float,
        layer: Optional[int] = None,
        pass_index: Optional[int] = None,
        index: Optional[int] = None,
        extra: str = "",
    ) -> dict:
        if kind not in KINDS:
            raise ValueError(f"unknown metric kind '{kind}'")
        row = {
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
            "kind": kind,
            "layer": layer,
            "pass": pass_index,
            "index": index,
            "value": float(value),
            "extra": extra,
        }
        self.rows.append(row)
        return row

    def extend(self, other: 'MetricsLog'):
        self.rows.extend(other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=COLUMNS)
        for column in ("layer", "pass", "index"):
            frame[column] = frame[column].astype("Int64")
        return frame

    def select(self, kind: str, layer: Optional[int] = None) -> pd.DataFrame:
        frame = self.to_frame()
        frame = frame[frame["kind"] == kind]
        if layer is not None:
            frame = frame[frame["layer"] == layer]
        return frame.reset_index(drop=True)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(path, index=False, float_format="%.10g")
        except OSError as exc:
            raise ExportError(f"cannot write metrics {path}: {exc}") from exc
        logger.info("Wrote %d metric rows to %s", len(self.rows), path)
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> 'MetricsLog':
        frame = pd.read_csv(path, dtype={"kind": str, "extra": str})
        frame["extra"] = frame["extra"].fillna("")
        rows = []
        for record in frame.to_dict(orient="records"):
            for column in ("layer", "pass", "index"):
                value = record[column]
                record[column] = None if pd.isna(value) else int(value)
            rows.append(record)
        return cls(rows=rows)


def measure_reconstruction_error(count_in: np.ndarray, count_rec: np.ndarray) -> float:
    """Squared Euclidean distance between accumulated spike counts."""
    count_in = np.asarray(count_in, dtype=np.float64)
    count_rec = np.asarray(count_rec, dtype=np.float64)
    if count_in.shape != count_rec.shape:
        raise ShapeError(f"count grids differ: {count_in.shape} vs {count_rec.shape}")
    return float(np.sum((count_in - count_rec) ** 2))


@dataclass
class ReconstructionReport:
    per_image: list[float]

    @property
    def aggregate(self) -> float:
        return float(np.sum(self.per_image))

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_image)) if self.per_image else 0.0


def measure_layer_reconstruction(layer, rasters) -> ReconstructionReport:
    """
    Count-based reconstruction error of a regenerative layer over a sample.

    Each raster is presented with learning off; the layer's weights are not
    touched.
    """
    errors = []
    for raster in rasters:
        window = layer.present(raster, learn=False)
        errors.append(measure_reconstruction_error(window.input_counts, window.recon_counts))
    return ReconstructionReport(per_image=errors)


@dataclass(frozen=True)
class Sparsity:
    active_fraction: float
    mean_rate_hz: float
    neurons: int
    spikes: int


def measure_sparsity(raster: SpikeRaster) -> Sparsity:
    """
    Active fraction (neurons with at least one spike) and mean firing rate
    in Hz, total spikes / (neurons * window seconds).
    """
    counts = raster.counts()
    neurons = int(counts.size)
    spikes = int(counts.sum())
    if neurons == 0 or raster.steps == 0:
        return Sparsity(0.0, 0.0, neurons, spikes)
    window_s = raster.steps * raster.dt / 1000.0
    return Sparsity(
        active_fraction=float(np.count_nonzero(counts)) / neurons,
        mean_rate_hz=spikes / (neurons * window_s),
        neurons=neurons,
        spikes=spikes,
    )

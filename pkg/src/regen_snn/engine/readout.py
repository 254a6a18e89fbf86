"""
Readout - supervised output layer and the classification rule.

The output layer is trained with the same delta rule as the pseudo-visible
layer: V_des = v_th where the label's target train spikes, v_res elsewhere,
delta = (V_des - V) * g(V), and dW[j, i] = eta * delta_j * x_i with x_i the
feature spike indicator.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import EmptyDatasetError, NumericError, ShapeError
from .layers import SpikingNetwork, fc_forward_step
from .models import Decision, GateMode, LabelTarget, LifParams, LifPopulation
from .regen import gate
from .rng import RngStream

logger = logging.getLogger(__name__)


def make_target(
    label: int,
    target_rate: float,
    t_ms: float,
    rng: RngStream,
    classes: int = 10,
    dt: float = 1.0,
) -> LabelTarget:
    """Poisson train at target_rate for the labeled neuron, silence for the rest."""
    if not 0 <= label < classes:
        raise ValueError(f"label {label} outside 0..{classes - 1}")
    p = target_rate * dt / 1000.0
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"target rate {target_rate} Hz gives per-step probability {p:.3f}")
    steps = int(round(t_ms / dt))
    events = np.zeros((steps, classes), dtype=bool)
    events[:, label] = rng.random(steps) < p
    return LabelTarget(label=int(label), events=events)


def readout_update(
    features_t: np.ndarray,
    v_out: np.ndarray,
    target_t: np.ndarray,
    params: LifParams,
    eta: float,
    mode: GateMode = "signed",
    events_only: bool = False,
) -> np.ndarray:
    """
    Weight change for one step: eta * outer((V_des - V) * g(V), x).

    With events_only the error is kept only for neurons whose target spikes
    or whose potential reached v_th this step.

    Returns:
        (classes, features) update
    """
    x = np.asarray(features_t, dtype=np.float64).ravel()
    v_out = np.asarray(v_out, dtype=np.float64)
    target_t = np.asarray(target_t, dtype=bool)
    if v_out.shape != target_t.shape:
        raise ShapeError(f"output potentials {v_out.shape} vs target {target_t.shape}")
    desired = np.where(target_t, params.v_th, params.v_res)
    delta = (desired - v_out) * gate(v_out, mode)
    if events_only:
        delta = np.where(target_t | (v_out >= params.v_th), delta, 0.0)
    return eta * np.outer(delta, x)


@dataclass
class ReadoutStep:
    update: np.ndarray
    spikes: np.ndarray
    loss: float


def train_readout_step(
    features_t: np.ndarray,
    weights: np.ndarray,
    pop: LifPopulation,
    target_t: np.ndarray,
    eta: float,
    mode: GateMode = "signed",
    events_only: bool = False,
) -> ReadoutStep:
    """
    Step the output population on one feature frame and compute its update.

    The caller applies `update` to `weights`; potentials are read before
    the update, so the step is a pure function of the current weights.
    """
    features_t = np.asarray(features_t).ravel()
    if weights.shape != (pop.size, features_t.shape[0]):
        raise ShapeError(f"weights {weights.shape} do not map {features_t.shape[0]} features to {pop.size} outputs")
    spikes = fc_forward_step(features_t, weights, pop)
    v_out = pop.v_mem
    update = readout_update(features_t, v_out, target_t, pop.params, eta, mode, events_only)
    if not np.all(np.isfinite(update)):
        raise NumericError("non-finite readout update")
    desired = np.where(np.asarray(target_t, dtype=bool), pop.params.v_th, pop.params.v_res)
    loss = float(0.5 * np.mean((desired - v_out) ** 2))
    return ReadoutStep(update=update, spikes=spikes, loss=loss)


def decide(counts: np.ndarray) -> Decision:
    """Argmax of aggregated counts; ties go to the lowest class index."""
    counts = np.asarray(counts, dtype=np.int64)
    return Decision(counts=counts, predicted=int(np.argmax(counts)))


def classify(network: SpikingNetwork, image: np.ndarray, passes: int, rng: RngStream) -> Decision:
    """Present an image `passes` times with fresh Poisson rasters and sum output spikes."""
    if passes < 1:
        raise ValueError("passes must be at least 1")
    counts = np.zeros(network.topology.classes, dtype=np.int64)
    for p in range(passes):
        raster = network.encode(image, rng.derive("pass", p))
        counts += network.run(raster).output_counts
    return decide(counts)


@dataclass
class EvalReport:
    """Accuracy over repeated presentations of a test set."""
    accuracies: list[float]
    confusion: np.ndarray
    predictions: list[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.accuracies)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies))


def evaluate(
    network: SpikingNetwork,
    images: np.ndarray,
    labels: np.ndarray,
    iterations: int = 5,
    passes: int = 2,
    seed: int = 0,
    workers: int = 1,
    progress: Optional[Callable[[int, float], None]] = None,
) -> EvalReport:
    """
    Classify every test item `iterations` times, each iteration with its own
    seed; confusion counts are summed over iterations (rows: true class).
    """
    if len(images) == 0:
        raise EmptyDatasetError("evaluation needs at least one test item")
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")

    classes = network.topology.classes
    root = RngStream(seed)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    accuracies = []
    predictions = []

    for iteration in range(iterations):
        def run_item(index: int) -> int:
            rng = root.derive("eval", iteration, index)
            return classify(network, images[index], passes, rng).predicted

        indices = range(len(images))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                predicted = np.fromiter(pool.map(run_item, indices), dtype=np.int64, count=len(images))
        else:
            predicted = np.fromiter((run_item(i) for i in indices), dtype=np.int64, count=len(images))

        truth = np.asarray(labels, dtype=np.int64)
        np.add.at(confusion, (truth, predicted), 1)
        accuracy = float(np.mean(predicted == truth))
        accuracies.append(accuracy)
        predictions.append(predicted)
        logger.info("Evaluation iteration %d/%d: accuracy %.4f", iteration + 1, iterations, accuracy)
        if progress is not None:
            progress(iteration, accuracy)

    return EvalReport(accuracies=accuracies, confusion=confusion, predictions=predictions)

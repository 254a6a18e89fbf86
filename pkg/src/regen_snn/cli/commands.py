"""
CLI commands - each binds a config and flags to one library operation.

Every command returns a small report dict; main() maps raised errors to
exit codes.
"""
import json
import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from ..config.settings import get_settings
from ..config.train_config import ConfigFile, apply_overrides, load_config, parse_config, require_path
from ..data.datasets import Dataset, head, load_mnist, read_cifar10, take_subset
from ..data.images import read_pgm, write_channels, write_kernel_grid
from ..engine.errors import ConfigError, ExportError, UntrainedLayerError
from ..engine.layers import OpCounter
from ..engine.readout import evaluate
from ..engine.regen import RegenLayer
from ..engine.rng import RngStream
from ..services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..services.metrics import MetricsLog, measure_reconstruction_error, measure_sparsity
from ..services.trainer import build_network, init_topology, initial_topology, train_conv_stack, train_readout

logger = logging.getLogger(__name__)

STACK_CHECKPOINT = "stack.ckpt"
MODEL_CHECKPOINT = "model.ckpt"


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def resolve_config(args, checkpoint: Optional[Checkpoint] = None) -> ConfigFile:
    """Config from --config, else the checkpoint's snapshot; flags applied last."""
    if getattr(args, "config", None):
        config = load_config(args.config)
    elif checkpoint is not None:
        try:
            config = parse_config(json.loads(checkpoint.config_json), source="checkpoint snapshot")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"checkpoint config snapshot is not JSON: {exc}") from exc
    else:
        raise ConfigError("--config is required")
    if checkpoint is not None and checkpoint.topology.spec != config.topology:
        raise ConfigError(
            f"config topology '{config.topology}' differs from checkpoint '{checkpoint.topology.spec}'"
        )
    return apply_overrides(
        config,
        seed=getattr(args, "seed", None),
        labeled_subset=getattr(args, "subset", None),
        passes=getattr(args, "passes", None),
        iterations=getattr(args, "iterations", None),
        output_dir=getattr(args, "out", None),
    )


def output_dir(config: ConfigFile, config_path: Optional[str] = None) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    stem = Path(config_path).stem if config_path else "run"
    return get_settings().outputs_dir / stem


def checkpoint_path(args, config_out: Optional[Path], default_name: str) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    if config_out is None:
        raise ConfigError("--checkpoint is required when no --config or --out is given")
    return config_out / default_name


def load_split(config: ConfigFile, split: str) -> Dataset:
    """Load the train or test split named by the config's data block."""
    data = config.data
    if data.format == "mnist":
        images = require_path(getattr(data, f"{split}_images"), f"data.{split}_images")
        labels = require_path(getattr(data, f"{split}_labels"), f"data.{split}_labels")
        return load_mnist(images, labels)
    batches = getattr(data, f"{split}_batches")
    if not batches:
        raise ConfigError(f"config does not set data.{split}_batches")
    return read_cifar10([require_path(p, f"data.{split}_batches") for p in batches])


def _out_from_args(args) -> Optional[Path]:
    return Path(args.out) if getattr(args, "out", None) else None


def _print_banner(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


# ---------------------------------------------------------------------------
# train-stack
# ---------------------------------------------------------------------------

def cmd_train_stack(args) -> dict[str, Any]:
    """Train the conv stack layer by layer; writes stack.ckpt and stack_metrics.csv."""
    resume = load_checkpoint(args.resume) if getattr(args, "resume", None) else None
    config = resolve_config(args, resume)
    out = output_dir(config, args.config)
    train_config = config.train_config()

    dataset = load_split(config, "train")
    probe = None
    if getattr(args, "probe", 0):
        probe = head(load_split(config, "test"), args.probe)

    _print_banner("REGENERATIVE CONV STACK TRAINING")
    print(f"  Topology: {config.topology}")
    print(f"  v_th={config.lif.v_th}  I_rate={config.i_rate} Hz  T={config.t_ms} ms  eta={config.eta}")
    print(f"  Images: {min(dataset.count, config.stack_images or dataset.count)}  Output: {out}")
    print()

    ckpt_path = out / STACK_CHECKPOINT
    topology = resume.topology if resume is not None else init_topology(train_config)
    start = resume.layers_trained if resume is not None else 0

    def save_progress(topology, layers_trained: int):
        save_checkpoint(Checkpoint(topology, config.model_dump_json(), layers_trained), ckpt_path)

    result = train_conv_stack(
        train_config,
        dataset,
        topology=topology,
        start_layer=start,
        probe=probe,
        output_dir=out,
        on_layer_trained=save_progress,
    )
    if result.layers_trained == start:
        save_progress(topology, result.layers_trained)
    metrics_path = result.metrics.write_csv(out / "stack_metrics.csv")

    print("Aggregate loss per pass:")
    for report in result.reports:
        for p, (loss, count_error) in enumerate(zip(report.pass_losses, report.pass_count_errors), start=1):
            print(f"  layer {report.layer} pass {p}: loss {loss:.6f}  count error {count_error:.1f}")
        if report.probe_before is not None:
            change = 0.0
            if report.probe_before > 0:
                change = 100.0 * (report.probe_before - report.probe_after) / report.probe_before
            print(f"  layer {report.layer} probe count error: {report.probe_before:.1f} -> "
                  f"{report.probe_after:.1f} ({change:.1f}% lower)")
    print()
    print(f"Checkpoint: {ckpt_path}")
    print(f"Metrics:    {metrics_path}")
    return {
        "status": "success",
        "checkpoint": ckpt_path,
        "metrics": metrics_path,
        "layers_trained": result.layers_trained,
        "reports": result.reports,
    }


# ---------------------------------------------------------------------------
# train-readout
# ---------------------------------------------------------------------------

def _require_stack(checkpoint: Checkpoint):
    checkpoint.require_layers(checkpoint.conv_layers)


def cmd_train_readout(args) -> dict[str, Any]:
    """Train the readout on a labeled subset; writes model.ckpt."""
    ckpt_in = checkpoint_path(args, _out_from_args(args) or _config_out(args), STACK_CHECKPOINT)
    checkpoint = load_checkpoint(ckpt_in)
    _require_stack(checkpoint)
    config = resolve_config(args, checkpoint)
    out = output_dir(config, getattr(args, "config", None))

    labeled_all = load_split(config, "train")
    if config.labeled_subset > labeled_all.count:
        raise ConfigError(f"labeled_subset {config.labeled_subset} exceeds the {labeled_all.count} training items")
    labeled = take_subset(labeled_all, config.labeled_subset, config.seed)

    _print_banner("READOUT TRAINING")
    print(f"  Labeled subset: {labeled.count}  target rate: {config.target_rate} Hz  epochs: {config.readout_epochs}")
    print()

    metrics = MetricsLog()
    result = train_readout(config.train_config(), checkpoint.topology, labeled, metrics, output_dir=out)
    checkpoint.readout_trained = True
    checkpoint.config_json = config.model_dump_json()
    ckpt_out = save_checkpoint(checkpoint, out / MODEL_CHECKPOINT)
    metrics_path = metrics.write_csv(out / "readout_metrics.csv")

    for epoch, loss in enumerate(result.epoch_losses, start=1):
        print(f"  epoch {epoch}: mean loss {loss:.6f}")
    print()
    print(f"Checkpoint: {ckpt_out}")
    return {"status": "success", "checkpoint": ckpt_out, "metrics": metrics_path, "losses": result.epoch_losses}


def _config_out(args) -> Optional[Path]:
    if getattr(args, "config", None):
        return output_dir(load_config(args.config), args.config)
    return None


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _test_set(config: ConfigFile) -> Dataset:
    test = load_split(config, "test")
    return head(test, config.test_items) if config.test_items else test


def cmd_eval(args) -> dict[str, Any]:
    """Evaluate a trained model; prints accuracy and confusion counts, writes CSVs."""
    ckpt_in = checkpoint_path(args, _out_from_args(args) or _config_out(args), MODEL_CHECKPOINT)
    checkpoint = load_checkpoint(ckpt_in)
    _require_stack(checkpoint)
    if not checkpoint.readout_trained:
        raise UntrainedLayerError(f"{ckpt_in} has no trained readout")
    config = resolve_config(args, checkpoint)
    out = output_dir(config, getattr(args, "config", None))
    test = _test_set(config)

    network = build_network(config.train_config(), checkpoint.topology)
    report = evaluate(
        network, test.images, test.labels,
        iterations=config.iterations, passes=config.passes, seed=config.seed,
        workers=getattr(args, "workers", 1) or 1,
    )

    metrics = MetricsLog()
    for iteration, accuracy in enumerate(report.accuracies):
        metrics.record("accuracy", accuracy, pass_index=config.passes, index=iteration, extra=f"items={test.count}")
    accuracy_frame = pd.DataFrame({
        "iteration": range(1, report.iterations + 1),
        "accuracy": report.accuracies,
    })
    classes = checkpoint.topology.classes
    confusion = pd.DataFrame(
        report.confusion,
        index=pd.Index(range(classes), name="true"),
        columns=[f"pred_{c}" for c in range(classes)],
    )
    try:
        out.mkdir(parents=True, exist_ok=True)
        accuracy_frame.to_csv(out / "eval_accuracy.csv", index=False)
        confusion.to_csv(out / "eval_confusion.csv")
        if getattr(args, "xlsx", False):
            with pd.ExcelWriter(out / "eval_report.xlsx", engine="openpyxl") as writer:
                accuracy_frame.to_excel(writer, sheet_name="accuracy", index=False)
                confusion.to_excel(writer, sheet_name="confusion")
    except OSError as exc:
        raise ExportError(f"cannot write evaluation report under {out}: {exc}") from exc
    metrics.write_csv(out / "eval_metrics.csv")

    _print_banner("EVALUATION")
    print(f"  Test items: {test.count}  passes: {config.passes}  iterations: {config.iterations}")
    print()
    for iteration, accuracy in enumerate(report.accuracies, start=1):
        print(f"  iteration {iteration}: accuracy {accuracy:.4f}")
    print(f"  mean accuracy: {report.mean_accuracy:.4f} (std {report.std_accuracy:.4f})")
    print()
    print("Confusion counts (rows: true class):")
    print(confusion.to_string())
    return {
        "status": "success",
        "mean_accuracy": report.mean_accuracy,
        "accuracies": report.accuracies,
        "confusion": report.confusion,
        "predictions": report.predictions,
    }


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def _pick_image(args, config: ConfigFile, geometry: tuple[int, int, int]) -> tuple[np.ndarray, str]:
    if getattr(args, "image", None):
        grid = read_pgm(args.image)
        image = grid[np.newaxis]
        if image.shape != geometry:
            raise ConfigError(f"image {args.image} is {image.shape}, network input is {geometry}")
        return image, Path(args.image).stem
    split = getattr(args, "split", None) or "test"
    dataset = load_split(config, split)
    index = getattr(args, "index", None) or 0
    if not 0 <= index < dataset.count:
        raise ConfigError(f"image index {index} outside 0..{dataset.count - 1}")
    return dataset.images[index], f"{split}_{index}"


def cmd_reconstruct(args) -> dict[str, Any]:
    """
    Write the reconstruction triptych of one image through the first conv layer:
    original pixels, accumulated input spikes, accumulated pseudo-visible spikes.
    """
    ckpt_in = checkpoint_path(args, _out_from_args(args) or _config_out(args), STACK_CHECKPOINT)
    checkpoint = load_checkpoint(ckpt_in)
    topology = checkpoint.topology
    if not topology.conv_indices:
        raise UntrainedLayerError("topology has no conv layer to reconstruct through")
    checkpoint.require_layers(1)
    config = resolve_config(args, checkpoint)
    out = output_dir(config, getattr(args, "config", None)) / "reconstructions"

    image, name = _pick_image(args, config, topology.input.geometry)
    train_config = config.train_config()
    network = build_network(train_config, topology)
    raster = network.encode(image, RngStream(config.seed).derive("reconstruct"))
    first = topology.conv_indices[0]
    layer = RegenLayer(topology.stacks[first], train_config.to_lif_params(), topology.input.geometry, layer_index=first)
    window = layer.present(raster, learn=False)

    files = []
    files += write_channels(image, out / f"{name}_original.pgm", rescale=False)
    files += write_channels(window.input_counts, out / f"{name}_input_spikes.pgm")
    files += write_channels(window.recon_counts, out / f"{name}_reconstruction.pgm")
    error = measure_reconstruction_error(window.input_counts, window.recon_counts)

    _print_banner("RECONSTRUCTION")
    print(f"  Image: {name}  layer: {first}  count error: {error:.1f}")
    for path in files:
        print(f"  wrote {path}")
    return {"status": "success", "files": files, "count_error": error}


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def weight_statistics(checkpoint: Checkpoint) -> pd.DataFrame:
    """One row per weight tensor: shape and summary statistics."""
    rows = []
    topology = checkpoint.topology
    for index in topology.conv_indices:
        weights = topology.stacks[index].weights
        rows.append(_stat_row(f"conv {index}", weights))
    rows.append(_stat_row("readout", topology.readout))
    return pd.DataFrame(rows).set_index("tensor")


def _stat_row(name: str, weights: np.ndarray) -> dict:
    if weights.size == 0:
        return {"tensor": name, "shape": "unallocated", "mean": np.nan, "std": np.nan, "min": np.nan, "max": np.nan}
    return {
        "tensor": name,
        "shape": "x".join(str(s) for s in weights.shape),
        "mean": float(weights.mean()),
        "std": float(weights.std()),
        "min": float(weights.min()),
        "max": float(weights.max()),
    }


def probe_sparsity(
    config: ConfigFile,
    topology,
    image: np.ndarray,
    rng: RngStream,
    counter: Optional[OpCounter] = None,
):
    """Sparsity of every conv/pool layer for one probe image, plus its recorded rasters."""
    network = build_network(config.train_config(), topology)
    raster = network.encode(image, rng)
    hidden = [i for i, layer in enumerate(topology.layers) if layer.kind in ("conv", "avgpool")]
    record = network.run(raster, record=hidden, counter=counter)
    rows = []
    for i in hidden:
        sparsity = measure_sparsity(record.rasters[i])
        rows.append({
            "layer": i,
            "kind": topology.layers[i].kind,
            "active_fraction": sparsity.active_fraction,
            "rate_hz": sparsity.mean_rate_hz,
            "spikes": sparsity.spikes,
        })
    return pd.DataFrame(rows).set_index("layer"), record


def record_sparsity(metrics: MetricsLog, table: pd.DataFrame, item: int, label: str):
    """One sparsity and one rate_hz row per layer of a probe_sparsity table."""
    for layer, row in table.iterrows():
        metrics.record("sparsity", row["active_fraction"], layer=int(layer), index=item, extra=label)
        metrics.record("rate_hz", row["rate_hz"], layer=int(layer), index=item, extra=label)


def cmd_inspect(args) -> dict[str, Any]:
    """Print topology, weight statistics and probe sparsity; optional dumps."""
    checkpoint = load_checkpoint(args.checkpoint)
    topology = checkpoint.topology

    _print_banner("CHECKPOINT INSPECTION")
    print(f"  Topology: {topology.spec}")
    for i, layer in enumerate(topology.layers):
        print(f"    [{i}] {layer.describe()}")
    print(f"  Conv layers trained: {checkpoint.layers_trained}/{checkpoint.conv_layers}"
          f"  readout trained: {'yes' if checkpoint.readout_trained else 'no'}")
    print()
    stats = weight_statistics(checkpoint)
    print("Weight statistics:")
    print(stats.to_string(float_format=lambda v: f"{v:.5f}"))
    print()

    result: dict[str, Any] = {"status": "success", "topology": topology.spec, "weights": stats}
    if not topology.initialized:
        return result

    try:
        config = resolve_config(args, checkpoint)
        probe = load_split(config, "test")
    except ConfigError as exc:
        print(f"  (no probe image: {exc})")
        return result
    index = getattr(args, "probe_index", 0) or 0
    count = getattr(args, "probe_count", 1) or 1
    if index < 0 or count < 1 or index + count > probe.count:
        raise ConfigError(f"probe items {index}..{index + count - 1} outside 0..{probe.count - 1}")

    train_config = config.train_config()
    untrained_topology = initial_topology(train_config, head(probe, train_config.calibration_images))
    root = RngStream(config.seed)
    metrics = MetricsLog()
    counter = OpCounter()
    tables: dict[str, list[pd.DataFrame]] = {"trained": [], "untrained": []}
    record = None
    for item in range(index, index + count):
        item_id = int(probe.ids[item])
        trained, window = probe_sparsity(
            config, topology, probe.images[item], root.derive("probe-image", item_id),
            counter if record is None else None,
        )
        untrained, _ = probe_sparsity(config, untrained_topology, probe.images[item], root.derive("probe-image", item_id))
        if record is None:
            record = window
        for label, table in (("trained", trained), ("untrained", untrained)):
            tables[label].append(table)
            record_sparsity(metrics, table, item_id, label)

    kinds = tables["trained"][0]["kind"]
    trained_mean = pd.concat(tables["trained"]).groupby(level=0).mean(numeric_only=True)
    untrained_mean = pd.concat(tables["untrained"]).groupby(level=0).mean(numeric_only=True)
    table = trained_mean.join(
        untrained_mean[["active_fraction", "rate_hz"]].rename(
            columns={"active_fraction": "untrained_fraction", "rate_hz": "untrained_rate_hz"}
        )
    )
    table.insert(0, "kind", kinds)
    print(f"Probe sparsity (test items {index}..{index + count - 1}, mean):")
    print(table.to_string(float_format=lambda v: f"{v:.4f}"))
    print()
    print(f"Synaptic events for the first probe window: {counter.synaptic_events}")
    for layer, events in sorted(counter.per_layer.items()):
        print(f"    layer {layer}: {events}")
    result.update({"sparsity": table, "synaptic_events": counter.synaptic_events, "metrics": metrics})

    dump = Path(args.out) if getattr(args, "out", None) else None
    metrics_dir = dump if dump is not None else output_dir(config, getattr(args, "config", None))
    result["metrics_csv"] = metrics.write_csv(metrics_dir / "inspect_metrics.csv")
    print(f"  wrote {result['metrics_csv']}")

    if dump is not None:
        files = []
        first = topology.conv_indices[0] if topology.conv_indices else None
        if first is not None:
            weights = topology.stacks[first].weights
            files.append(write_kernel_grid(weights.reshape(-1, weights.shape[2], weights.shape[3]),
                                           dump / "kernels_layer1.pgm"))
        for i, raster in record.rasters.items():
            counts = raster.counts()
            for k in range(counts.shape[0]):
                files += write_channels(counts[k], dump / f"features_layer{i}_map{k}.pgm")
        print(f"  wrote {len(files)} graymap(s) under {dump}")
        result["files"] = files
    return result


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> dict[str, Any]:
    """Accuracy versus labeled-subset size from one trained conv stack."""
    ckpt_in = checkpoint_path(args, _out_from_args(args) or _config_out(args), STACK_CHECKPOINT)
    checkpoint = load_checkpoint(ckpt_in)
    _require_stack(checkpoint)
    config = resolve_config(args, checkpoint)
    out = output_dir(config, getattr(args, "config", None))
    try:
        sizes = sorted({int(s) for s in args.sizes.split(",") if s.strip()})
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers: {exc}") from exc
    if not sizes or sizes[0] < 1:
        raise ConfigError("--sizes needs positive subset sizes")

    labeled_all = load_split(config, "train")
    if sizes[-1] > labeled_all.count:
        raise ConfigError(f"subset size {sizes[-1]} exceeds the {labeled_all.count} training items")
    test = _test_set(config)
    train_config = config.train_config()
    metrics = MetricsLog()

    _print_banner("LABELED-SUBSET SWEEP")
    rows = []
    for n, size in enumerate(sizes, start=1):
        print(f"[{n}/{len(sizes)}] subset {size}...")
        labeled = take_subset(labeled_all, size, config.seed)
        train_readout(train_config, checkpoint.topology, labeled, metrics, output_dir=out)
        network = build_network(train_config, checkpoint.topology)
        report = evaluate(network, test.images, test.labels, config.iterations, config.passes, config.seed,
                          workers=getattr(args, "workers", 1) or 1)
        metrics.record("accuracy", report.mean_accuracy, pass_index=config.passes, index=size,
                       extra=f"std={report.std_accuracy:.6f}")
        rows.append({"subset": size, "mean_accuracy": report.mean_accuracy, "std_accuracy": report.std_accuracy})
        print(f"    mean accuracy {report.mean_accuracy:.4f} (std {report.std_accuracy:.4f})")

    frame = pd.DataFrame(rows)
    try:
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "sweep.csv", index=False)
    except OSError as exc:
        raise ExportError(f"cannot write sweep results under {out}: {exc}") from exc
    metrics.write_csv(out / "sweep_metrics.csv")
    print()
    print(frame.to_string(index=False))
    return {"status": "success", "results": frame}

#!/usr/bin/env python
"""
Run pipeline - conv stack, readout and evaluation in one go.

Usage:
    python scripts/run_pipeline.py configs/mnist_desk.json [--seed N]
"""
import argparse
import sys
from pathlib import Path

# Add src to path
src_path = Path(__file__).parent.parent / 'src'
sys.path.insert(0, str(src_path))

from regen_snn.cli import commands
from regen_snn.cli.main import configure_logging, exit_code_for
from regen_snn.engine.errors import RegenError


def main():
    parser = argparse.ArgumentParser(description="train stack, train readout, evaluate")
    parser.add_argument("config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--workers", type=int, default=1)
    cli = parser.parse_args()
    configure_logging(quiet=True)

    def step_args(**extra):
        base = dict(config=cli.config, seed=cli.seed, out=cli.out, checkpoint=None)
        base.update(extra)
        return argparse.Namespace(**base)

    print("=" * 60)
    print("REGEN-SNN PIPELINE")
    print("=" * 60)
    print()

    try:
        print("[1/3] Training conv stack...")
        stack = commands.cmd_train_stack(step_args(resume=None, probe=0))
        print()
        print("[2/3] Training readout...")
        commands.cmd_train_readout(step_args(subset=None))
        print()
        print("[3/3] Evaluating...")
        report = commands.cmd_eval(step_args(passes=None, iterations=None, workers=cli.workers, xlsx=False))
    except RegenError as exc:
        print(f"\n❌ PIPELINE FAILED: {exc}")
        sys.exit(exit_code_for(exc))

    print()
    print("=" * 60)
    print("✅ PIPELINE COMPLETE")
    print("=" * 60)
    print()
    print("Summary:")
    for layer in stack["reports"]:
        first, last = layer.pass_losses[0], layer.pass_losses[-1]
        print(f"  Layer {layer.layer}: aggregate loss {first:.4f} -> {last:.4f}")
    print(f"  Mean accuracy: {report['mean_accuracy']:.4f}")


if __name__ == "__main__":
    main()

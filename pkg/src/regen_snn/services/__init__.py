"""Services subpackage - training orchestration, metrics and checkpoints."""

"""
Centralized settings and path configuration for regen-snn.
"""
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


def get_project_root() -> Path:
    """Get the project root directory (where pyproject.toml lives)."""
    current = Path(__file__).resolve()
    for parent in current.parents:
        if (parent / 'pyproject.toml').exists() and (parent / 'configs').is_dir():
            return parent
    # Fallback to 3 levels up from this file
    return Path(__file__).resolve().parent.parent.parent.parent


@dataclass
class Settings:
    """Paths used by the CLI and scripts."""

    project_root: Path

    # Shipped configs
    configs_dir: Path

    # Default output root (per-run directories are created below it)
    outputs_dir: Path

    # Real datasets, only needed for full runs and slow tests
    mnist_dir: Optional[Path] = None
    cifar_dir: Optional[Path] = None

    @classmethod
    def load(cls, project_root: Optional[Path] = None) -> 'Settings':
        """Load settings from the project structure and environment."""
        root = project_root or get_project_root()
        mnist = os.environ.get('REGEN_SNN_MNIST_DIR')
        cifar = os.environ.get('REGEN_SNN_CIFAR_DIR')
        return cls(
            project_root=root,
            configs_dir=root / 'configs',
            outputs_dir=Path(os.environ.get('REGEN_SNN_OUTPUTS', root / 'outputs')),
            mnist_dir=Path(mnist) if mnist else None,
            cifar_dir=Path(cifar) if cifar else None,
        )

    def shipped_config(self, name: str) -> Path:
        """Path of a shipped config by stem, e.g. 'mnist_p2'."""
        return self.configs_dir / f'{name}.json'


# Default settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the global settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings.load()
    return _settings

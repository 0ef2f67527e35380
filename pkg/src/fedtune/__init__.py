"""fedtune: deterministic federated-learning HPO simulator."""

from . import cli, common, config, data, flcore, hpo, models, runner, sched

__all__ = [
    "cli",
    "common",
    "config",
    "data",
    "flcore",
    "hpo",
    "models",
    "runner",
    "sched",
]

__version__ = "0.1.0"

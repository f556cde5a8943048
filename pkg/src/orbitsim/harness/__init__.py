from .config import ConfigError, ExperimentConfig, from_dict, load
from .experiment import MetricsReport, Simulation, run_experiment, saturate, sweep

__all__ = ["ConfigError", "ExperimentConfig", "MetricsReport", "Simulation", "from_dict", "load",
           "run_experiment", "saturate", "sweep"]

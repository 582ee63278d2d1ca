from fedvfda.vfda import VfdaLayer
from fedvfda.segnet import NetworkConfig, build_network
from fedvfda.federation import FedConfig, run_federation
from fedvfda.config import ExperimentConfig, parse_config


__all__ = [
    "VfdaLayer",
    "NetworkConfig",
    "build_network",
    "FedConfig",
    "run_federation",
    "ExperimentConfig",
    "parse_config",
]

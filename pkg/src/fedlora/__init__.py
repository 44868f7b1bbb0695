"""Federated LoRA fine-tuning simulator: FedAvg of factors, frozen-A, and alternating updates."""
from .config import ExperimentConfig, from_dict, parse_config
from .data import Dataset, PartitionPlan, Scheme, partition
from .fedcore import (Strategy, TrainConfig, aggregate, interference_gap, local_train, oracle_product_average,
                      phase_of_round, run_round)
from .linalg import Rng
from .lora import FreezePhase, LoraAdapter
from .metrics import MetricsLog, RoundMetrics

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "from_dict", "parse_config", "Rng",
    "Dataset", "PartitionPlan", "Scheme", "partition", "Strategy", "TrainConfig", "aggregate",
    "interference_gap", "local_train", "oracle_product_average", "phase_of_round", "run_round",
    "FreezePhase", "LoraAdapter", "MetricsLog", "RoundMetrics",
]

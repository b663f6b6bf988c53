"""Benchmark harness for transaction fabrics.

Deploys validator and client instances from a scenario file, drives an
open-loop asset-transfer workload, and measures throughput, latency and
resource usage. A built-in reference fabric with predictable performance
serves as the system under test for the harness's own checks.
"""

from .model import ExperimentConfig, FabricParams, Transaction, TxOutcome, TxStatus, assign_validator
from .scenario import Scenario, ScenarioAction, parse_scenario

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "FabricParams",
    "Scenario",
    "ScenarioAction",
    "Transaction",
    "TxOutcome",
    "TxStatus",
    "assign_validator",
    "parse_scenario",
]

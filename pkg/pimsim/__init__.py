"""
pimsim - simulated processing-in-memory database operators.

A cost-model simulator of a DIMM-based PIM system (DPUs with private
bank memory and a software-managed scratchpad, driven by one host), the
database operators built on it and TPC-H style queries at desk scale.
"""

from pimsim.config import HostCostModel, KernelConfig, MachineConfig, load_config, write_config
from pimsim.errors import ConfigError, PimError, VerificationError
from pimsim.queries import QUERY_IDS, run_query
from pimsim.system import PimSystem

__version__ = '1.0.0'

__all__ = [
    'ConfigError',
    'HostCostModel',
    'KernelConfig',
    'MachineConfig',
    'PimError',
    'PimSystem',
    'QUERY_IDS',
    'VerificationError',
    'load_config',
    'run_query',
    'write_config',
]

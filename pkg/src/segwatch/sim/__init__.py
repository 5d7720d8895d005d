from .config import ConfigError, TopologyConfig, Violation, bundled, load_config
from .prng import SplitMix64, prng_next
from .scenario import InvariantViolation, ProductionNetwork, RunOutputs, run_scenario
from .traffic import TrafficProfile, generate_traffic, load_profile

__all__ = [
    "ConfigError", "TopologyConfig", "Violation", "bundled", "load_config",
    "SplitMix64", "prng_next",
    "InvariantViolation", "ProductionNetwork", "RunOutputs", "run_scenario",
    "TrafficProfile", "generate_traffic", "load_profile",
]

"""Parallel external memory simulator for MapReduce shuffle algorithms."""

from .machine import (
    CREW,
    EREW,
    CapacityViolation,
    ConfigurationError,
    Element,
    IOTrace,
    Idle,
    Input,
    Machine,
    MachineConfig,
    MissingBlockError,
    Output,
    PolicyViolation,
    ProvenanceViolation,
    Region,
    SimulationError,
    bsp_star_cost,
    bsp_star_replay,
    create_machine,
    run_lockstep,
    write_trace_csv,
)
from .workload import (
    ShuffleInstance,
    Triple,
    generate,
    oracle_combined_mxv,
    oracle_shuffle,
)

__all__ = [
    "CREW",
    "EREW",
    "CapacityViolation",
    "ConfigurationError",
    "Element",
    "IOTrace",
    "Idle",
    "Input",
    "Machine",
    "MachineConfig",
    "MissingBlockError",
    "Output",
    "PolicyViolation",
    "ProvenanceViolation",
    "Region",
    "ShuffleInstance",
    "SimulationError",
    "Triple",
    "bsp_star_cost",
    "bsp_star_replay",
    "create_machine",
    "generate",
    "oracle_combined_mxv",
    "oracle_shuffle",
    "run_lockstep",
    "write_trace_csv",
]

"""Timing side-channel lab for masked vector loads and stores.

The package simulates how long a masked load or store with an all-zero mask
takes on different x86-64 page states and builds ASLR-breaking scans on top
of those timings. See ``aslrlab.campaigns`` for the end-to-end attacks.
"""
from .errors import (
    BackendError,
    CapabilityError,
    ConfigError,
    DomainError,
    LabError,
    MaskedOpFault,
    UsageError,
)
from .space import (
    AddressSpace,
    GroundTruth,
    Mitigation,
    PageAttributes,
    Region,
    ScenarioKind,
    ScenarioSpec,
    SizeClass,
    build_address_space,
    enumerate_truth,
    load_scenario,
    lookup,
)
from .sim import MicroarchState, OpKind, ProbeSample, TimingProfile, get_profile

__version__ = "0.1.0"

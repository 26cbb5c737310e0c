"""Energy-efficient multi-user MISO beamforming: model, precoders, GNN, SCA baseline."""

from .core import (
    BeamSolution,
    ChannelSet,
    PerfReport,
    SystemConfig,
    check_feasibility,
    energy_efficiency,
    rate_k,
    rates,
    total_power,
)

__version__ = "0.1.0"

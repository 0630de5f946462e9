"""Two-busbar grid topology simulator, target-topology search and benchmark tools."""

from .core import Grid, SubstationAction, TopologyVector, load_grid, topology_diff
from .environment import DO_NOTHING, Chronic, GridEnv, LineReconnect, RuleConfig, Termination

__all__ = [
    "Grid", "SubstationAction", "TopologyVector", "load_grid", "topology_diff",
    "DO_NOTHING", "Chronic", "GridEnv", "LineReconnect", "RuleConfig", "Termination",
]
__version__ = "0.1.0"

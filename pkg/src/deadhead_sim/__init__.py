"""Batched ride-hailing dispatch with queue-aware deadhead limits."""

from .core import (DEFAULT_MENU, Assignment, BatchRecord, Driver, LimitMenu, Location, RideRequest,
                   distance, haversine_km)
from .engine import SimConfig, SimResult, SimulationError, run
from .evaluate import check_theorem1, stationary_oracle, summarize
from .policy import ControllerState, make_policy, match_batch, select_limit

__version__ = "0.1.0"

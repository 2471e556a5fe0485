"""Stochastic-switching cell transmission model: stability analysis and
ramp-metering design under Markovian capacities."""

from .baselines import BaselineSpec, baseline_control_step
from .config import ConfigBundle, load_config, loads_config, dumps_config, write_config, bundled_config_path
from .design import (ComparisonTable, DesignResult, GridSpec, compare_strategies, design_full,
                     design_localized, design_localized_sections, design_localized_throughput,
                     design_partial, drift_grid, hourly_designs, metering_schedule)
from .errors import (DivisionByZeroRatio, NoRoot, ParseError, SingularChain, SSCTMError,
                     SubproblemInfeasible, TooLarge, Unsupported, ValidationError)
from .model import (AffineControlPolicy, DensityBounds, HighwayConfig, HybridState, MarkovCapacityModel,
                    density_bounds, dynamics, flows, steady_state_probs)
from .simulator import SimConfig, Trajectory, metrics, simulate, step
from .stability import DesignScheme, DriftReport, mean_drift

__version__ = "0.1.0"

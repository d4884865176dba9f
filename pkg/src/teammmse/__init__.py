"""Team MMSE beamforming and power control for cell-free massive MIMO networks."""

from .alloc import (SolverOptions, fractional_power, maxmin_coh_instantaneous, maxmin_uatf,
                    pertx_feasibility, pertx_maxmin)
from .beamform import (BeamformerSet, CentralizedMMSE, LocalTeamMMSE, MixedTeamMMSE, MultiCellMMSE,
                       PiMatrices, centralized_mmse, compute_pi, local_mmse_stage, multicell_mmse,
                       team_statistical_stage, tmmse_residual)
from .duality import (CouplingMatrices, build_coupling, check_feasibility, downlink_sinr,
                      solve_power_pair, uplink_sinr)
from .errors import (ConfigError, ConvergenceError, FactorizationError, InfeasibleError,
                     NumericalError, SingularSystemError)
from .fading import CovarianceSet, build_covariances, sample_channel
from .netgen import Config, CsiRegime, Deployment, Scenario, load_config, parse_config, place_network
from .pilots import EstimateSet, PilotConfig, estimate_channels, observe_pilots
from .rates import Bank, Estimate, MomentSet, RateReport, evaluate

__version__ = "0.1.0"

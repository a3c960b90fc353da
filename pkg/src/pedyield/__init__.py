"""Pedestrian trajectory forecasting in shared spaces.

A pedestrian walks with a latent desired velocity and, at every step,
may yield to one nearby vehicle. Yielding slows them by a learned function
of lateral distance; the chance of yielding is a learned function of time
to closest approach and minimum separation. Parameters are learned from
trajectory data by Kalman smoothing and block coordinate descent, and
forecasts are weighted Monte Carlo samples.
"""

from .data_io import (CrossingScenario, load_model, load_tracks, read_tracks, reference_params,
                      resample, save_model, synthesize, write_tracks)
from .errors import (ContractError, CoverageError, DataFormatError, FrameUndefinedError,
                     NumericalError, PedYieldError, TrainingInfeasibleError, VersionError)
from .grid import GridFunction1D, GridFunction2D
from .inference import PredictionRequest, PredictionSet, posterior_state, predict, predict_cv
from .interaction import LatentDecision, ModelParams, sample_transition
from .metrics import MetricTable, ade, bench, evaluate, rmse
from .scene import (PedestrianState, SceneConfig, TrackSet, VehicleState, candidate_set,
                    to_vehicle_frame)
from .smoothing import estimate_sigma_v, smooth
from .training import TrainingConfig, fit

__version__ = "0.1.0"

"""Multilevel multimodal fusion of depth and inertial data for action recognition."""
from .errors import (ConvergenceError, InputError, M2Error, NumericalError,
                     RankDeficiencyError, TrainingDiverged)

__version__ = "0.1.0"

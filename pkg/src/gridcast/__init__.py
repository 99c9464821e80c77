"""Spatio-temporal grid forecasting: temporal regression plus learned biases."""

from .griddata import (
    ClockIndex,
    MovieDataset,
    SynthSpec,
    TrainingExample,
    clock_index,
    default_slots,
    load_movie,
    make_example,
    save_movie,
    synthesize_city,
)
from .models import TRConfig, init_params, init_pomponia, nero_forward, pomponia_forward, tr_predict
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"

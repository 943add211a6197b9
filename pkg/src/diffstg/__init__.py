"""Conditional diffusion forecasting on spatio-temporal graphs, on a numpy autodiff engine."""
from .data import NodeScaler, STGDataset, SyntheticSpec, generate_synthetic, load_csv
from .diffusion import ForecastEnsemble, SamplerConfig, STGWindow, WindowBatch, ensemble_sample, sample_ensembles
from .estimator import DiffSTGForecaster
from .graph import Graph, normalize_adjacency
from .metrics import crps_empirical, crps_gaussian, evaluate
from .schedule import NoiseSchedule, make_quadratic_schedule, make_schedule
from .trainer import TrainConfig, train
from .ugnet import UGnet, UGnetConfig

__version__ = "0.1.0"

__all__ = [
    "DiffSTGForecaster", "ForecastEnsemble", "Graph", "NodeScaler", "NoiseSchedule", "STGDataset", "STGWindow",
    "SamplerConfig", "SyntheticSpec", "TrainConfig", "UGnet", "UGnetConfig", "WindowBatch", "crps_empirical",
    "crps_gaussian", "ensemble_sample", "evaluate", "generate_synthetic", "load_csv", "make_quadratic_schedule",
    "make_schedule", "normalize_adjacency", "sample_ensembles", "train",
]

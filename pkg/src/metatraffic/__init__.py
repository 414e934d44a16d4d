"""Single-source meta-transfer traffic forecasting on a small numpy autodiff core."""
from .config import Config, desk_config, load_config
from .data import TrafficSeries, load_csv, synth_city, synth_pair
from .evaluation import EvalReport, evaluate
from .trainer import Forecaster, finetune, pretrain, train_from_scratch

__all__ = [
    "Config",
    "EvalReport",
    "Forecaster",
    "TrafficSeries",
    "desk_config",
    "evaluate",
    "finetune",
    "load_config",
    "load_csv",
    "pretrain",
    "synth_city",
    "synth_pair",
    "train_from_scratch",
]

__version__ = "0.1.0"

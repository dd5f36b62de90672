"""Ensemble multi-exposure image fusion via a style-modulated imitator network."""
from .estimator import EMEFFusion
from .imaging import ExposurePair, load_ppm, save_ppm, synth_pair
from .imitator import Generator, NetConfig, load_generator, save_generator
from .pipeline import run_pipeline
from .training import TrainingConfig, build_dataset, pretrain
from .tuner import TunerConfig, tune

__version__ = "0.1.0"

__all__ = [
    "EMEFFusion",
    "ExposurePair",
    "Generator",
    "NetConfig",
    "TrainingConfig",
    "TunerConfig",
    "build_dataset",
    "load_generator",
    "load_ppm",
    "pretrain",
    "run_pipeline",
    "save_generator",
    "save_ppm",
    "synth_pair",
    "tune",
]

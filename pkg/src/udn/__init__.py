"""Unbounded-depth neural networks with a truncated-Poisson posterior over depth."""

from .autodiff import ConfigError, ContractError, DimensionError, Graph, NonFiniteError, ParamStore
from .datasets import Dataset, SpiralConfig, generate_spiral, load_table, spiral_splits
from .model import (
    NetworkGenerator,
    VariationalState,
    dense_generator,
    elbo,
    finite_baseline_elbo,
    grow_to,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .trainer import RunRecord, TrainConfig, TrainingAborted, evaluate, train
from .truncated_poisson import DepthPrior, TruncatedPoissonDist, verify_theorem1

__version__ = "0.1.0"

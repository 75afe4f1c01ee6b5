"""Dynamic variational inference: the epoch loop that grows the network.

Each epoch recomputes ``m(q)`` from the current lambda, creates any missing
layers, then runs minibatch gradient ascent on the ELBO over lambda and the
active weight means only.  Layers are never removed; if ``m(q)`` shrinks
the deeper layers simply stop receiving updates.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import Dataset
from .model import (
    NetworkGenerator,
    PointMass,
    VariationalState,
    elbo,
    finite_baseline_elbo,
    grow_to,
    param_names,
    predict,
)
from .truncated_poisson import DepthPrior

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, epoch: int, term: str):
        super().__init__(f"epoch {epoch}: {message} ({term})")
        self.epoch = epoch
        self.term = term


@dataclass
class TrainConfig:
    """Optimisation settings.  Defaults are the spiral-experiment values.

    ``lr`` may be a per-epoch list.  ``fixed_depth`` switches from the
    unbounded model to a classical network of that depth.
    """

    epochs: int = 4000
    batch_size: int = 256
    lr: float | list = 0.005
    lambda_lr_factor: float = 0.1
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    prior_alpha: float = 0.5
    lambda_init: float = 1.0
    delta: float = 0.95
    seed: int = 0
    task: str = "classification"
    fixed_depth: int | None = None
    val_every: int = 10
    max_layers: int = 256
    lambda_guard: float = 1e4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ad.ConfigError("epochs and batch_size must be at least 1")
        if isinstance(self.lr, (list, tuple)):
            self.lr = [float(v) for v in self.lr]
            if len(self.lr) != self.epochs:
                raise ad.ConfigError(f"lr schedule has {len(self.lr)} entries for {self.epochs} epochs")
            if min(self.lr) <= 0:
                raise ad.ConfigError("learning rates must be positive")
        elif not self.lr > 0:
            raise ad.ConfigError("learning rate must be positive")
        if not self.lambda_lr_factor > 0:
            raise ad.ConfigError("lambda_lr_factor must be positive")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ad.ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.task not in ("classification", "regression"):
            raise ad.ConfigError(f"unknown task {self.task!r}")
        if self.fixed_depth is not None and self.fixed_depth < 1:
            raise ad.ConfigError("fixed_depth must be at least 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr[epoch - 1] if isinstance(self.lr, list) else self.lr

    def optimizer_settings(self) -> dict:
        if self.optimizer == "adam":
            return {"weight_decay": self.weight_decay}
        return {"momentum": self.momentum, "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ad.ConfigError(f"unknown training settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    entries: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    best_epoch: int | None = None

    def to_ndjson(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.entries)

    def lambdas(self) -> np.ndarray:
        return np.array([e["lambda"] for e in self.entries])

    def posterior_means(self) -> np.ndarray:
        return np.array([e["mean_depth"] for e in self.entries])


def evaluate(state: VariationalState, gen: NetworkGenerator, data: Dataset, depth_dist=None) -> dict:
    """Ensemble metrics on ``data``.

    Classification: accuracy and mean log predictive probability.
    Regression: RMSE in the original target units.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = predict(state, gen, data.features, depth_dist)
    if gen.task == "classification":
        p_true = pred[np.arange(len(data)), data.targets]
        return {
            "accuracy": float(np.mean(pred.argmax(axis=1) == data.targets)),
            "loglik": float(np.mean(np.log(np.maximum(p_true, 1e-300)))),
        }
    resid = data.inverse_target(pred) - data.inverse_target(data.targets)
    return {"rmse": float(np.sqrt(np.mean(resid**2)))}


def _score(metrics: dict) -> float:
    return metrics["accuracy"] if "accuracy" in metrics else -metrics["rmse"]


def best_epoch_selection(validation, checkpoints: dict):
    """Pick the checkpoint with the best validation score; ties go to the
    earliest epoch.  ``validation`` is a list of ``(epoch, metrics)``.

    Returns ``(epoch, checkpoint)``.
    """
    scored = [(epoch, _score(m)) for epoch, m in validation if epoch in checkpoints]
    if not scored:
        raise ValueError("no checkpoints to select from")
    best = max(s for _, s in scored)
    epoch = min(e for e, s in scored if s == best)
    return epoch, checkpoints[epoch]


def _batches(n: int, batch_size: int, rng) -> list:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(config: TrainConfig, gen: NetworkGenerator, data: Dataset, callback=None):
    """Fit a UDN (or a fixed-depth baseline) to the ``train`` rows of ``data``.

    The ``valid`` rows, when present, are scored every ``val_every`` epochs
    and on the last epoch; the best-scoring state is kept as the run's
    checkpoint.  Returns ``(final_state, record)``.
    """
    train_set = data.subset("train") if "train" in data.splits else data
    valid_set = data.subset("valid") if "valid" in data.splits else None
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    if gen.task != config.task:
        raise ad.ConfigError(f"generator is for {gen.task}, config for {config.task}")

    fixed = config.fixed_depth
    state = VariationalState.initial(config.lambda_init, config.delta)
    prior = DepthPrior(config.prior_alpha)
    rng = np.random.default_rng(config.seed)
    hyper = config.optimizer_settings()
    record = RunRecord()
    n = len(train_set)
    X, Y = train_set.features, train_set.targets

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        if fixed:
            m = fixed
            depth_dist = PointMass(fixed)
        else:
            depth_dist = state.depth_dist()
            m = depth_dist.support_max()
            if m > config.max_layers:
                raise TrainingAborted(f"m(q)={m} exceeds max_layers={config.max_layers}",
                                      epoch, "max_layers")
        grow_to(state, gen, m, config.seed)
        created = state.created_count
        active = state.names(m)
        lam_start = state.lam

        lr = config.lr_at(epoch)
        sums = np.zeros(4)
        batches = _batches(n, config.batch_size, rng)
        for idx in batches:
            state.store.zero_grad()
            try:
                if fixed:
                    node = finite_baseline_elbo(state, gen, X[idx], Y[idx], n, fixed)
                    terms = (node.item(), 0.0, 0.0, 0.0)
                else:
                    bd = elbo(state, gen, X[idx], Y[idx], n, prior, support=m)
                    node = bd.node
                    terms = (bd.total, bd.depth_kl,
                             float(bd.q @ np.cumsum(bd.weight_kl_per_layer)),
                             float(bd.scale * (bd.q @ bd.loglik_per_depth)))
                node.graph.backward(-node)
            except ad.NonFiniteError as exc:
                raise TrainingAborted("non-finite objective", epoch, str(exc)) from exc
            ad.step(state.store, config.optimizer, lr, names=active, **hyper)
            if not fixed:
                ad.step(state.store, config.optimizer, lr * config.lambda_lr_factor,
                        names=["lambda_raw"], **hyper)
                if not math.isfinite(state.lam) or state.lam > config.lambda_guard:
                    raise TrainingAborted(f"lambda diverged to {state.lam}", epoch, "lambda")
            sums += terms
        sums /= len(batches)
        if not fixed:
            # lambda moved during the epoch; create what the next epoch needs now
            # so that the current posterior can be evaluated
            m_next = state.depth_dist().support_max()
            if m_next > config.max_layers:
                raise TrainingAborted(f"m(q)={m_next} exceeds max_layers={config.max_layers}",
                                      epoch, "max_layers")
            grow_to(state, gen, m_next, config.seed)

        entry = {
            "epoch": epoch,
            "lambda": lam_start,
            "m_q": m,
            "q_pmf": depth_dist.pmf().tolist(),
            "mean_depth": depth_dist.mean(),
            "created": created,
            "elbo": sums[0],
            "depth_kl": sums[1],
            "weight_kl": sums[2],
            "loglik": sums[3],
            "lr": lr,
        }
        if valid_set is not None and (epoch % config.val_every == 0 or epoch == config.epochs):
            eval_dist = PointMass(fixed) if fixed else None
            metrics = evaluate(state, gen, valid_set, eval_dist)
            entry["valid"] = metrics
            record.validation.append((epoch, metrics))
            best = record.best_epoch
            if best is None or _score(metrics) > _score(dict(record.validation)[best]):
                record.checkpoints = {epoch: state.copy()}
                record.best_epoch = epoch
        entry["wall_time"] = time.perf_counter() - t0
        record.entries.append(entry)
        if callback is not None:
            callback(epoch, state, entry)
        if epoch % 100 == 0:
            log.debug("epoch %d lambda=%.4f m=%d elbo=%.3f", epoch, lam_start, m, sums[0])

    if record.best_epoch is None:
        record.checkpoints = {config.epochs: state.copy()}
        record.best_epoch = config.epochs
    return state, record


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def active_parameter_names(state: VariationalState, m: int) -> set:
    """``{lambda_raw} | nu_1..nu_m``: the only parameters the ELBO touches."""
    return {"lambda_raw", *(n for k in range(1, m + 1) for n in param_names(k))}

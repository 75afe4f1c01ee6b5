"""Unbounded-depth networks: generators, growable state, ELBO and prediction.

A network is described by a pair of rules.  ``hidden_rule(l)`` gives the
spec of hidden layer ``l`` and ``output_rule(l)`` the spec of the output
head attached after it.  The variational state only ever materialises the
first ``created_count`` layers; everything beyond is implicitly at the prior
and contributes nothing to the objective.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, ContractError, Graph, ParamStore
from .truncated_poisson import DepthPrior, TruncatedPoissonDist, log_pmf_node

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    depth_index: int
    in_dim: int
    out_dim: int
    activation: str = "relu"
    kind: str = "dense"

    def fingerprint(self) -> str:
        return f"{self.kind}:{self.in_dim}->{self.out_dim}:{self.activation}"


@dataclass(frozen=True)
class OutputSpec:
    depth_index: int
    in_dim: int
    target: str = "categorical"
    num_classes: int = 2
    sigma: float = 1.0

    def __post_init__(self):
        if self.target not in ("categorical", "gaussian"):
            raise ConfigError(f"unknown target {self.target!r}")
        if self.target == "gaussian" and not self.sigma > 0:
            raise ConfigError("gaussian head needs sigma > 0")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.target == "categorical" else 1

    def fingerprint(self) -> str:
        if self.target == "categorical":
            return f"head:{self.in_dim}->categorical({self.num_classes})"
        return f"head:{self.in_dim}->gaussian({self.sigma!r})"


@dataclass(frozen=True)
class NetworkGenerator:
    hidden_rule: Callable[[int], LayerSpec]
    output_rule: Callable[[int], OutputSpec]

    def layer(self, depth: int) -> LayerSpec:
        spec = self.hidden_rule(depth)
        if depth > 1 and spec.in_dim != self.hidden_rule(depth - 1).out_dim:
            raise ConfigError(f"layer {depth} cannot be chained after layer {depth - 1}")
        return spec

    def head(self, depth: int) -> OutputSpec:
        spec = self.output_rule(depth)
        if spec.in_dim != self.hidden_rule(depth).out_dim:
            raise ConfigError(f"output head {depth} does not match hidden layer {depth}")
        return spec

    @property
    def task(self) -> str:
        return "classification" if self.output_rule(1).target == "categorical" else "regression"


def dense_generator(in_dim: int, width: int = 32, num_classes: int = 2,
                    task: str = "classification", sigma: float = 1.0) -> NetworkGenerator:
    """Every layer is ``width`` ReLU units; every head is linear."""

    def hidden(depth):
        return LayerSpec(depth, in_dim if depth == 1 else width, width, "relu")

    if task == "classification":
        def output(depth):
            return OutputSpec(depth, width, "categorical", num_classes=num_classes)
    elif task == "regression":
        def output(depth):
            return OutputSpec(depth, width, "gaussian", sigma=sigma)
    else:
        raise ConfigError(f"unknown task {task!r}")
    return NetworkGenerator(hidden, output)


def param_names(depth: int) -> tuple[str, ...]:
    return (f"hidden{depth}.weight", f"hidden{depth}.bias",
            f"head{depth}.weight", f"head{depth}.bias")


@dataclass
class VariationalState:
    """``log(lambda)`` plus the weight means of every layer created so far."""

    store: ParamStore
    delta: float = 0.95
    created_count: int = 0
    fingerprints: list = field(default_factory=list)

    @classmethod
    def initial(cls, lambda_init: float = 1.0, delta: float = 0.95) -> "VariationalState":
        store = ParamStore()
        store.add("lambda_raw", np.array(math.log(lambda_init)))
        return cls(store, delta)

    @property
    def lam(self) -> float:
        return float(np.exp(self.store["lambda_raw"]))

    def depth_dist(self) -> TruncatedPoissonDist:
        return TruncatedPoissonDist(self.lam, self.delta, shift=1)

    def names(self, max_depth: int) -> list[str]:
        return [n for k in range(1, max_depth + 1) for n in param_names(k)]

    def copy(self) -> "VariationalState":
        return copy.deepcopy(self)


def _uniform_init(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def grow_to(state: VariationalState, gen: NetworkGenerator, target_depth: int, seed: int = 0) -> VariationalState:
    """Instantiate layers ``created_count+1 .. target_depth`` in place.

    Layer ``k`` draws from a generator keyed on ``(seed, k)`` so its initial
    weights do not depend on when it was created.
    """
    for k in range(state.created_count + 1, target_depth + 1):
        spec, head = gen.layer(k), gen.head(k)
        if spec.kind != "dense":
            raise ConfigError(f"unsupported layer kind {spec.kind!r}")
        rng = np.random.default_rng([seed, k])
        w, b, hw, hb = param_names(k)
        state.store.add(w, _uniform_init(rng, spec.in_dim, (spec.in_dim, spec.out_dim)))
        state.store.add(b, _uniform_init(rng, spec.in_dim, (spec.out_dim,)))
        state.store.add(hw, _uniform_init(rng, head.in_dim, (head.in_dim, head.out_dim)))
        state.store.add(hb, _uniform_init(rng, head.in_dim, (head.out_dim,)))
        state.fingerprints.append(f"{spec.fingerprint()}|{head.fingerprint()}")
        state.created_count = k
    return state


# --------------------------------------------------------------------------
# Forward pass and objective terms


def forward_all(state: VariationalState, gen: NetworkGenerator, g: Graph, x,
                max_depth: int, heads: str = "all") -> list:
    """Outputs of heads ``1..max_depth`` from one sweep through the layers.

    Hidden states are computed once and shared, so the work is linear in
    ``max_depth``.  ``g.stats['hidden']`` and ``g.stats['head']`` count the
    layer evaluations.  With ``heads="last"`` only the deepest head runs and
    the returned list holds that single output.
    """
    if max_depth > state.created_count:
        raise ContractError(f"depth {max_depth} requested but only {state.created_count} layers exist")
    h = g.lift(x)
    outs = []
    for k in range(1, max_depth + 1):
        spec = gen.layer(k)
        w, b, hw, hb = (g.param(state.store, n) for n in param_names(k))
        h = ad.forward_dense(h, w, b, spec.activation)
        g.stats["hidden"] += 1
        if heads == "all" or k == max_depth:
            out = ad.forward_dense(h, hw, hb, "identity")
            g.stats["head"] += 1
            if gen.head(k).target == "gaussian":
                out = out[:, 0]
            outs.append(out)
    return outs


def head_loglik(gen: NetworkGenerator, depth: int, out: ad.Node, y) -> ad.Node:
    spec = gen.head(depth)
    if spec.target == "categorical":
        return ad.categorical_loglik(out, y)
    return ad.gaussian_loglik(out, y, spec.sigma)


def layer_kl_vector(state: VariationalState, g: Graph, max_depth: int) -> ad.Node:
    """Per-layer ``-0.5 * ||nu_k||^2`` for ``k = 1..max_depth``.

    With unit-variance Gaussians for both prior and posterior this is the
    exact value of ``E_q[log p(theta_k) - log q(theta_k)]``.
    """
    terms = []
    for k in range(1, max_depth + 1):
        sq = ad.sum_squares(g.param(state.store, n) for n in param_names(k))
        terms.append(sq * -0.5)
    return ad.stack(terms)


def weight_kl(state: VariationalState, g: Graph, ell: int) -> ad.Node:
    if ell > state.created_count:
        raise ContractError(f"layer {ell} has not been created")
    if ell == 0:
        return g.constant(0.0)
    return ad.sum(layer_kl_vector(state, g, ell))


@dataclass(frozen=True)
class PointMass:
    """Depth distribution with all mass on ``depth``; has no parameters."""

    depth: int

    def support_max(self) -> int:
        return self.depth

    def pmf(self) -> np.ndarray:
        p = np.zeros(self.depth)
        p[-1] = 1.0
        return p

    def mean(self) -> float:
        return float(self.depth)


@dataclass
class ElboBreakdown:
    """Terms of the ELBO; ``node`` is the differentiable total."""

    depth_kl: float
    weight_kl_per_layer: np.ndarray
    loglik_per_depth: np.ndarray
    q: np.ndarray
    scale: float
    total: float
    node: ad.Node = field(repr=False, default=None)
    graph: Graph = field(repr=False, default=None)

    @property
    def m(self) -> int:
        return len(self.q)

    def recombine(self) -> float:
        """Rebuild the total from the stored terms."""
        kl = np.cumsum(self.weight_kl_per_layer)
        return float(self.depth_kl + self.q @ kl + self.scale * (self.q @ self.loglik_per_depth))


def elbo(state: VariationalState, gen: NetworkGenerator, x, y, n_total: int,
         prior: DepthPrior, support: int | None = None, depth_dist=None,
         graph: Graph | None = None) -> ElboBreakdown:
    """First-order ELBO with the depth expectation summed exactly.

    ``support`` freezes ``m(q)`` (otherwise it is recomputed from lambda);
    the truncation is treated as constant when differentiating in lambda.
    ``depth_dist`` substitutes a fixed depth distribution such as
    :class:`PointMass`, in which case lambda receives no gradient.
    The minibatch log-likelihood is scaled by ``n_total / len(x)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ContractError("empty batch")
    g = graph or Graph()
    if depth_dist is None:
        m = support if support is not None else state.depth_dist().support_max()
        if m > state.created_count:
            raise ContractError(f"m(q)={m} exceeds the {state.created_count} created layers")
        raw = g.param(state.store, "lambda_raw")
        log_q = log_pmf_node(raw, m)
        q = ad.exp(log_q)
    else:
        m = depth_dist.support_max()
        if m > state.created_count:
            raise ContractError(f"m(q)={m} exceeds the {state.created_count} created layers")
        pmf = depth_dist.pmf()
        q = g.constant(pmf)
        log_q = g.constant(np.where(pmf > 0, np.log(np.where(pmf > 0, pmf, 1.0)), 0.0))

    depths = np.arange(1, m + 1)
    log_prior = prior.log_pmf(depths)
    scale = n_total / len(x)

    outs = forward_all(state, gen, g, x, m)
    ll = ad.stack([head_loglik(gen, k, out, y) for k, out in zip(depths, outs)])
    wkl = layer_kl_vector(state, g, m)

    depth_term = ad.sum(q * (log_q * -1.0 + log_prior))
    per_depth = ad.cumsum(wkl) + ll * scale
    total = depth_term + ad.sum(q * per_depth)
    return ElboBreakdown(
        depth_kl=depth_term.item(),
        weight_kl_per_layer=wkl.data.copy(),
        loglik_per_depth=ll.data.copy(),
        q=q.data.copy(),
        scale=scale,
        total=total.item(),
        node=total,
        graph=g,
    )


def finite_baseline_elbo(state: VariationalState, gen: NetworkGenerator, x, y,
                         n_total: int, depth: int, graph: Graph | None = None) -> ad.Node:
    """Objective of the classical depth-``depth`` network: scaled log-likelihood
    of head ``depth`` plus the Gaussian prior on ``nu_1..nu_depth``."""
    x = np.asarray(x, dtype=np.float64)
    g = graph or Graph()
    (out,) = forward_all(state, gen, g, x, depth, heads="last")
    return head_loglik(gen, depth, out, y) * (n_total / len(x)) + weight_kl(state, g, depth)


def depth_outputs(state: VariationalState, gen: NetworkGenerator, x, max_depth: int) -> list:
    """Per-depth predictive quantities (class probabilities or means)."""
    g = Graph()
    outs = forward_all(state, gen, g, np.asarray(x, dtype=np.float64), max_depth)
    res = []
    for k, out in enumerate(outs, start=1):
        if gen.head(k).target == "categorical":
            res.append(np.exp(ad.log_softmax(out, axis=1).data))
        else:
            res.append(out.data)
    return res


def predict(state: VariationalState, gen: NetworkGenerator, x, depth_dist=None) -> np.ndarray:
    """Depth-ensemble prediction: the ``q(l)``-weighted mixture over heads.

    Returns class probabilities for categorical heads and the mixture mean
    for Gaussian heads.
    """
    dist = depth_dist or state.depth_dist()
    q = dist.pmf()
    outs = depth_outputs(state, gen, x, dist.support_max())
    return sum(w * o for w, o in zip(q, outs))


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(state: VariationalState, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "delta": state.delta,
        "created_count": state.created_count,
        "fingerprints": state.fingerprints,
    }
    arrays = {f"param/{k}": v for k, v in state.store.values().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, gen: NetworkGenerator | None = None) -> VariationalState:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['version']}")
        store = ParamStore()
        for key in data.files:
            if key.startswith("param/"):
                store.add(key[len("param/"):], data[key])
    state = VariationalState(store, meta["delta"], meta["created_count"], meta["fingerprints"])
    if gen is not None:
        for k, fp in enumerate(state.fingerprints, start=1):
            expected = f"{gen.layer(k).fingerprint()}|{gen.head(k).fingerprint()}"
            if fp != expected:
                raise ConfigError(f"layer {k} was saved as {fp!r}, generator gives {expected!r}")
    return state

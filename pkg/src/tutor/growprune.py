"""Architecture mutation: connection growth, connection pruning, neuron growth,
and the iterative grow-and-prune loop that keeps the best validation snapshot."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .network import MaskedNetwork, TrainConfig, accuracy, train

log = logging.getLogger(__name__)

FULL = "full"
GRADIENT = "gradient"


def kth_largest(values, k):
    values = np.asarray(values, dtype=float).ravel()
    k = int(min(max(k, 1), values.size))
    return float(np.partition(values, values.size - k)[values.size - k])


def _count(alpha, total):
    # alpha * total, rounded up; the epsilon absorbs float error in ratios like c / total
    return int(math.ceil(alpha * total - 1e-9))


def accumulate_gradient(net: MaskedNetwork, X, y, batch_size=32):
    """Sum of dL/dW over one pass of mini-batches at fixed weights."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    acc = np.zeros_like(net.W)
    for s in range(0, X.shape[0], batch_size):
        _, dW, _ = net.loss_and_grads(X[s:s + batch_size], y[s:s + batch_size])
        acc += dW
    return acc


def growth_candidates(grad, legal, mask, alpha):
    """Dormant legal positions whose |grad| exceeds the (alpha*M*N)-th largest legal |grad|."""
    G = np.abs(grad)
    t = kth_largest(G[legal], _count(alpha, G.size))
    return legal & ~mask & (G > t), t


def grow_connections(net: MaskedNetwork, X=None, y=None, alpha: float = 0.1, mode: str = GRADIENT,
                     batch_size: int = 32) -> MaskedNetwork:
    net = net.copy()
    legal = net.legal()
    if not (legal & ~net.mask).any():
        log.info("connection growth: no dormant connections, nothing to do")
        return net
    if mode == FULL:
        new = legal & ~net.mask
    elif mode == GRADIENT:
        new, _ = growth_candidates(accumulate_gradient(net, X, y, batch_size), legal, net.mask, alpha)
    else:
        raise ValueError(f"unknown growth mode {mode!r}")
    net.mask |= new  # new weights start at exactly 0
    net.invalidate()
    return net


def prune_connections(net: MaskedNetwork, alpha: float) -> MaskedNetwork:
    """Deactivate every active connection with |w| strictly below the (alpha*M*N)-th largest |W|."""
    net = net.copy()
    absW = np.abs(net.W)
    t = kth_largest(absW, _count(alpha, absW.size))
    net.mask &= ~(absW < t)
    net.invalidate()
    return net


def most_active_hidden(net: MaskedNetwork, X):
    act = np.abs(net.hidden_activations(X)).mean(axis=0)
    return int(np.argmax(act)), act


def grow_neuron(net: MaskedNetwork, X, noise_scale: float = 0.1, seed: int = 0,
                max_hidden: Optional[int] = None) -> MaskedNetwork:
    """Duplicate the hidden neuron with the highest mean |activation|.

    The copy sits right after the original in the neuron order, inherits its
    mask row and column, and gets its weights plus Gaussian noise scaled to
    the spread of the original's active weights.
    """
    cap = 4 * net.initial_hidden if max_hidden is None else max_hidden
    if net.n_hidden == 0:
        log.info("neuron growth: network has no hidden neurons")
        return net.copy()
    if net.n_hidden >= cap:
        log.info("neuron growth: hidden budget %d reached", cap)
        return net.copy()
    i, _ = most_active_hidden(net, X)
    rng = np.random.default_rng(seed)
    n_in = net.n_in
    r_i, r_j = n_in + i, n_in + i + 1
    out_w, out_m = net.W[r_i].copy(), net.mask[r_i].copy()
    in_w, in_m = net.W[:, i].copy(), net.mask[:, i].copy()
    active = np.concatenate([out_w[out_m], in_w[in_m]])
    sigma = noise_scale * (active.std() if active.size else 0.0)
    out_w = out_w + out_m * rng.normal(0.0, 1.0, out_w.shape) * sigma
    in_w = in_w + in_m * rng.normal(0.0, 1.0, in_w.shape) * sigma
    W = np.insert(net.W, r_j, out_w, axis=0)
    M = np.insert(net.mask, r_j, out_m, axis=0)
    # the new row carries no entry for column i (no self-connection), so the column copy stays legal
    in_w = np.insert(in_w, r_j, 0.0)
    in_m = np.insert(in_m, r_j, False)
    W = np.insert(W, i + 1, in_w, axis=1)
    M = np.insert(M, i + 1, in_m, axis=1)
    bias = np.insert(net.bias, i + 1, net.bias[i])
    linear = np.insert(net.linear, i + 1, net.linear[i])
    return MaskedNetwork(n_in, net.n_hidden + 1, net.n_out, W, M, bias, linear, net.initial_hidden)


# ---------------------------------------------------------------- synthesis loop


@dataclass
class GrowPruneConfig:
    iterations: int = 5
    epochs_per_step: int = 20
    growth_ratio: float = 0.1
    # fixed keep ratio; None derives one per iteration from density_schedule
    prune_keep_ratio: Optional[float] = None
    density_schedule: tuple = (0.5, 0.3, 0.2, 0.15, 0.1)
    reference_params: Optional[int] = None
    neuron_growth_noise_scale: float = 0.1
    growth_mode: Union[str, Sequence[str]] = GRADIENT
    neuron_growth: Union[bool, Sequence[bool]] = True
    include_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.growth_ratio <= 1:
            raise ValueError("growth_ratio must be in (0, 1]")
        if self.prune_keep_ratio is not None and not 0 < self.prune_keep_ratio <= 1:
            raise ValueError("prune_keep_ratio must be in (0, 1]")
        if any(not 0 < d <= 1 for d in self.density_schedule):
            raise ValueError("density schedule entries must be in (0, 1]")

    def mode_at(self, it):
        m = self.growth_mode
        return m if isinstance(m, str) else m[min(it, len(m) - 1)]

    def neuron_growth_at(self, it):
        g = self.neuron_growth
        return bool(g) if isinstance(g, bool) else bool(g[min(it, len(g) - 1)])

    def to_dict(self):
        d = dict(self.__dict__)
        d["density_schedule"] = list(self.density_schedule)
        if not isinstance(self.growth_mode, str):
            d["growth_mode"] = list(self.growth_mode)
        if not isinstance(self.neuron_growth, bool):
            d["neuron_growth"] = list(self.neuron_growth)
        return d


@dataclass
class SynthesisResult:
    net: MaskedNetwork
    val_accuracy: float
    best_iteration: int  # 0 is the starting network
    trace: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (iteration, net, val accuracy)

    def trace_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)


def keep_ratio_for(net: MaskedNetwork, cfg: GrowPruneConfig, it: int, reference: int):
    if cfg.prune_keep_ratio is not None:
        return cfg.prune_keep_ratio
    target = cfg.density_schedule[min(it, len(cfg.density_schedule) - 1)] * reference
    keep = max(int(math.floor(target)) - net.active_bias_count(), 1)
    return keep / net.W.size


def synthesize(net: MaskedNetwork, X, y, X_val, y_val, cfg: Optional[GrowPruneConfig] = None,
               train_cfg: Optional[TrainConfig] = None) -> SynthesisResult:
    cfg = cfg or GrowPruneConfig()
    train_cfg = train_cfg or TrainConfig()
    reference = cfg.reference_params or net.param_count()
    trace, snapshots = [], []

    def record(it, op, current):
        acc = accuracy(current, X_val, y_val)
        trace.append({
            "iteration": it, "op": op, "active_connections": current.active_connections,
            "hidden_neurons": current.n_hidden, "params": current.param_count(), "val_accuracy": acc,
        })
        return acc

    def short_train(current, it, step):
        c = TrainConfig(epochs=cfg.epochs_per_step, batch_size=train_cfg.batch_size,
                        learning_rate=train_cfg.learning_rate, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                        eps=train_cfg.eps, patience=None, seed=cfg.seed * 1000 + 10 * it + step,
                        restore_best=False)
        return train(current, X, y, None, None, c).net

    acc0 = record(0, "start", net)
    if cfg.include_start:
        snapshots.append((0, net.copy(), acc0))
    current = net
    for it in range(1, cfg.iterations + 1):
        if cfg.neuron_growth_at(it - 1):
            current = grow_neuron(current, X, cfg.neuron_growth_noise_scale, cfg.seed * 1000 + it)
            record(it, "neuron_growth", current)
        mode = cfg.mode_at(it - 1)
        current = grow_connections(current, X, y, cfg.growth_ratio, mode, train_cfg.batch_size)
        record(it, f"{mode}_growth", current)
        current = short_train(current, it, 1)
        record(it, "train", current)
        current = prune_connections(current, keep_ratio_for(current, cfg, it - 1, reference))
        record(it, "prune", current)
        current = short_train(current, it, 2)
        acc = record(it, "train", current)
        snapshots.append((it, current.copy(), acc))
    # best validation accuracy; ties prefer fewer parameters, then the earlier snapshot
    best = max(snapshots, key=lambda s: (s[2], -s[1].param_count(), -s[0]))
    return SynthesisResult(best[1], best[2], best[0], trace, snapshots)

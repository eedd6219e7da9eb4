"""Masked feed-forward networks over an ordered neuron sequence.

Neurons are ordered inputs, hidden, outputs. A single weight matrix W has
one row per source neuron (inputs + hidden) and one column per destination
neuron (hidden + outputs); a hidden neuron may feed any neuron after it.
A binary mask marks active connections and dormant weights are held at 0.

Forward passes are evaluated level by level: a hidden neuron's level is one
more than the deepest active hidden neuron feeding it, so a conventional MLP
runs as one matrix product per layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NonFiniteLoss

FORMAT_VERSION = 1


def softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def legal_mask(n_in, n_hidden, n_out):
    """Boolean (n_in + n_hidden, n_hidden + n_out) matrix of order-legal connections."""
    src = np.arange(n_in + n_hidden)[:, None]
    dst = np.arange(n_hidden + n_out)[None, :]
    src_hidden = src - n_in
    return (src < n_in) | (dst >= n_hidden) | (dst > src_hidden)


class MaskedNetwork:
    def __init__(self, n_in, n_hidden, n_out, W, mask, bias, linear=None, initial_hidden=None):
        self.n_in, self.n_hidden, self.n_out = int(n_in), int(n_hidden), int(n_out)
        self.mask = np.asarray(mask, dtype=bool).copy()
        self.W = np.where(self.mask, np.asarray(W, dtype=float), 0.0)
        self.bias = np.asarray(bias, dtype=float).copy()
        self.linear = np.zeros(self.n_hidden, dtype=bool) if linear is None else np.asarray(linear, dtype=bool).copy()
        self.initial_hidden = self.n_hidden if initial_hidden is None else int(initial_hidden)
        shape = (self.n_in + self.n_hidden, self.n_hidden + self.n_out)
        if self.W.shape != shape or self.mask.shape != shape or self.bias.shape != (shape[1],):
            raise DimensionMismatch(f"inconsistent network arrays for dims {self.n_in}/{self.n_hidden}/{self.n_out}")
        if np.any(self.mask & ~legal_mask(self.n_in, self.n_hidden, self.n_out)):
            raise ValueError("mask contains connections that violate the neuron order")
        self._plan = None

    # ------------------------------------------------------------ structure

    @property
    def shape(self):
        return self.W.shape

    def copy(self):
        return MaskedNetwork(self.n_in, self.n_hidden, self.n_out, self.W, self.mask, self.bias, self.linear,
                             self.initial_hidden)

    def legal(self):
        return legal_mask(self.n_in, self.n_hidden, self.n_out)

    def invalidate(self):
        """Call after editing `mask` in place."""
        self.W[~self.mask] = 0.0
        self._plan = None

    def hidden_levels(self):
        lvl = np.zeros(self.n_hidden, dtype=np.int64)
        hm = self.mask[self.n_in:, : self.n_hidden]
        for h in range(self.n_hidden):
            srcs = np.flatnonzero(hm[:h, h])
            lvl[h] = 1 + (lvl[srcs].max() if srcs.size else 0)
        return lvl

    def _get_plan(self):
        if self._plan is None:
            plan = []
            lvl = self.hidden_levels()
            groups = [np.flatnonzero(lvl == v) for v in np.unique(lvl)] if self.n_hidden else []
            groups.append(np.arange(self.n_hidden, self.n_hidden + self.n_out))
            for cols in groups:
                rows = np.flatnonzero(self.mask[:, cols].any(axis=1))
                contiguous = cols.size and cols[-1] - cols[0] + 1 == cols.size
                plan.append((cols, rows, slice(cols[0], cols[-1] + 1) if contiguous else cols))
            self._plan = plan
        return self._plan

    def depth(self):
        return int(self.hidden_levels().max()) + 1 if self.n_hidden else 1

    def live_hidden(self):
        """Hidden neurons with an active path to some output."""
        live = np.zeros(self.n_hidden, dtype=bool)
        out = self.mask[self.n_in:, self.n_hidden:]
        hh = self.mask[self.n_in:, : self.n_hidden]
        for h in range(self.n_hidden - 1, -1, -1):
            live[h] = out[h].any() or (hh[h] & live).any()
        return live

    @property
    def active_connections(self):
        return int(self.mask.sum())

    def active_bias_count(self):
        return int(self.live_hidden().sum()) + self.n_out

    def param_count(self):
        return self.active_connections + self.active_bias_count()

    def flops(self):
        """2 per connection feeding a live neuron or an output, 1 per live nonlinear hidden neuron."""
        live = self.live_hidden()
        dst_live = np.concatenate([live, np.ones(self.n_out, dtype=bool)])
        conns = int(self.mask[:, dst_live].sum())
        return 2 * conns + int((live & ~self.linear).sum())

    # ------------------------------------------------------------ compute

    def _run(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise DimensionMismatch(f"network expects {self.n_in} inputs, got shape {X.shape}")
        n = X.shape[0]
        A = np.zeros((n, self.n_in + self.n_hidden))
        A[:, : self.n_in] = X
        Z = np.zeros((n, self.n_hidden + self.n_out))
        for cols, rows, sel in self._get_plan():
            z = A[:, rows] @ self.W[rows][:, sel] + self.bias[sel]
            Z[:, sel] = z
            hid = cols[cols < self.n_hidden]
            if hid.size:
                zh = Z[:, hid]
                A[:, self.n_in + hid] = np.where(self.linear[hid], zh, np.maximum(zh, 0.0))
        return A, Z

    def logits(self, X):
        return self._run(X)[1][:, self.n_hidden:]

    def forward(self, X):
        """Class probabilities, one row per input row."""
        return softmax(self.logits(X))

    def hidden_activations(self, X):
        return self._run(X)[0][:, self.n_in:]

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)

    def loss(self, X, y):
        Zo = self.logits(X)
        Zo = Zo - Zo.max(axis=1, keepdims=True)
        logp = Zo - np.log(np.exp(Zo).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(len(y)), y].mean())

    def loss_and_grads(self, X, y):
        """Mean cross-entropy and its gradients.

        dW is dense over every (source, destination) pair, dormant or not;
        callers must mask it before applying updates.
        """
        A, Z = self._run(X)
        n = A.shape[0]
        Zo = Z[:, self.n_hidden:]
        P = softmax(Zo)
        logp = np.log(np.maximum(P[np.arange(n), y], 1e-300))
        loss = float(-logp.mean())
        dZ = np.zeros_like(Z)
        G = P.copy()
        G[np.arange(n), y] -= 1.0
        dZ[:, self.n_hidden:] = G / n
        dA = np.zeros_like(A)
        plan = self._get_plan()
        for cols, rows, sel in reversed(plan):
            hid = cols[cols < self.n_hidden]
            if hid.size:
                deriv = np.where(self.linear[hid], 1.0, (Z[:, hid] > 0).astype(float))
                dZ[:, hid] = dA[:, self.n_in + hid] * deriv
            dA[:, rows] += dZ[:, sel] @ self.W[rows][:, sel].T
        dW = A.T @ dZ
        db = dZ.sum(axis=0)
        return loss, dW, db

    # ------------------------------------------------------------ io

    def to_dict(self):
        names = ([f"in{i}" for i in range(self.n_in)] + [f"h{i}" for i in range(self.n_hidden)]
                 + [f"out{i}" for i in range(self.n_out)])
        return {
            "version": FORMAT_VERSION,
            "dims": {"n_in": self.n_in, "n_hidden": self.n_hidden, "n_out": self.n_out},
            "order": names,
            "mask": ["".join("1" if v else "0" for v in row) for row in self.mask],
            "weights": self.W.tolist(),
            "biases": self.bias.tolist(),
            "linear_hidden": [int(v) for v in self.linear],
            "initial_hidden": self.initial_hidden,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {d.get('version')!r}")
        dims = d["dims"]
        mask = np.array([[c == "1" for c in row] for row in d["mask"]], dtype=bool)
        mask = mask.reshape(dims["n_in"] + dims["n_hidden"], dims["n_hidden"] + dims["n_out"])
        W = np.array(d["weights"], dtype=float).reshape(mask.shape)
        return cls(dims["n_in"], dims["n_hidden"], dims["n_out"], W, mask, d["biases"],
                   d.get("linear_hidden"), d.get("initial_hidden"))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return (f"MaskedNetwork(n_in={self.n_in}, n_hidden={self.n_hidden}, n_out={self.n_out}, "
                f"active={self.active_connections}, params={self.param_count()})")


def build_fc(layer_sizes, seed=0) -> MaskedNetwork:
    """Standard MLP expressed as a masked network; He-normal weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError("need at least input and output layer, all sizes >= 1")
    n_in, n_out = sizes[0], sizes[-1]
    n_hidden = sum(sizes[1:-1])
    mask = np.zeros((n_in + n_hidden, n_hidden + n_out), dtype=bool)
    # source offsets in rows, destination offsets in columns
    src_off = [0]
    for s in sizes[:-1]:
        src_off.append(src_off[-1] + s)
    dst_off = [0]
    for s in sizes[1:]:
        dst_off.append(dst_off[-1] + s)
    for layer in range(len(sizes) - 1):
        mask[src_off[layer]:src_off[layer + 1], dst_off[layer]:dst_off[layer + 1]] = True
    rng = np.random.default_rng(seed)
    fan_in = np.maximum(mask.sum(axis=0), 1)
    W = rng.standard_normal(mask.shape) * np.sqrt(2.0 / fan_in)[None, :]
    return MaskedNetwork(n_in, n_hidden, n_out, W * mask, mask, np.zeros(n_hidden + n_out))


def fc_sizes(net: MaskedNetwork):
    """Layer sizes if `net` has exactly an MLP mask, else None."""
    lvl = net.hidden_levels()
    sizes = [net.n_in] + [int((lvl == v).sum()) for v in np.unique(lvl)] + [net.n_out] if net.n_hidden else [net.n_in, net.n_out]
    ref = build_fc(sizes)
    if ref.mask.shape == net.mask.shape and np.array_equal(ref.mask, net.mask):
        return sizes
    return None


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: Optional[int] = 20
    seed: int = 0
    restore_best: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrainResult:
    net: MaskedNetwork
    best_epoch: int
    best_val_accuracy: Optional[float]
    history: list = field(default_factory=list)


def accuracy(net, X, y):
    y = np.asarray(y)
    return float(np.mean(net.predict(X) == y)) if y.size else 0.0


evaluate = accuracy


class _Adam:
    def __init__(self, net, cfg):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.mW = np.zeros_like(net.W)
        self.vW = np.zeros_like(net.W)
        self.mb = np.zeros_like(net.bias)
        self.vb = np.zeros_like(net.bias)
        self.t = 0

    def state(self):
        return (self.mW.copy(), self.vW.copy(), self.mb.copy(), self.vb.copy(), self.t)

    def restore(self, s):
        self.mW, self.vW, self.mb, self.vb, self.t = (s[0].copy(), s[1].copy(), s[2].copy(), s[3].copy(), s[4])

    def step(self, net, dW, db):
        c = self.cfg
        self.t += 1
        gW = dW * net.mask  # dormant connections never move
        self.mW = c.beta1 * self.mW + (1 - c.beta1) * gW
        self.vW = c.beta2 * self.vW + (1 - c.beta2) * gW * gW
        self.mb = c.beta1 * self.mb + (1 - c.beta1) * db
        self.vb = c.beta2 * self.vb + (1 - c.beta2) * db * db
        k1 = 1 - c.beta1**self.t
        k2 = 1 - c.beta2**self.t
        net.W -= self.lr * (self.mW / k1) / (np.sqrt(self.vW / k2) + c.eps) * net.mask
        net.bias -= self.lr * (self.mb / k1) / (np.sqrt(self.vb / k2) + c.eps)


def train(net: MaskedNetwork, X, y, X_val=None, y_val=None, cfg: Optional[TrainConfig] = None) -> TrainResult:
    """Mini-batch Adam on mean cross-entropy.

    With validation data the returned network is the epoch snapshot with the
    best validation accuracy (ties: lower validation loss, then earlier),
    and training stops after `patience` epochs without improvement.
    """
    cfg = cfg or TrainConfig()
    net = net.copy()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(net, cfg)
    have_val = X_val is not None and len(y_val) > 0
    best_key, best_net, best_epoch, since = None, None, 0, 0
    history = []
    halved = False
    epoch = 0
    while epoch < cfg.epochs:
        if n == 0:
            break
        snap_W, snap_b, snap_opt = net.W.copy(), net.bias.copy(), opt.state()
        perm = rng.permutation(n)
        total, bad = 0.0, False
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, dW, db = net.loss_and_grads(X[idx], y[idx])
            if not (math.isfinite(loss) and np.isfinite(dW).all() and np.isfinite(db).all()):
                bad = True
                break
            opt.step(net, dW, db)
            total += loss * idx.size
        if bad or not (np.isfinite(net.W).all() and np.isfinite(net.bias).all()):
            if halved:
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch + 1} after halving the learning rate")
            net.W, net.bias = snap_W, snap_b
            opt.restore(snap_opt)
            opt.lr *= 0.5
            halved = True
            continue
        epoch += 1
        rec = {"epoch": epoch, "train_loss": total / n}
        if have_val:
            va = accuracy(net, X_val, y_val)
            vl = net.loss(X_val, y_val)
            rec.update(val_accuracy=va, val_loss=vl)
            key = (va, -vl)
            if best_key is None or key > best_key:
                best_key, best_net, best_epoch, since = key, net.copy(), epoch, 0
            else:
                since += 1
        history.append(rec)
        if have_val and cfg.patience is not None and since >= cfg.patience:
            break
    if have_val and cfg.restore_best and best_net is not None:
        return TrainResult(best_net, best_epoch, best_key[0], history)
    final_acc = accuracy(net, X_val, y_val) if have_val else None
    return TrainResult(net, epoch, final_acc, history)


@dataclass
class Metrics:
    accuracy: Optional[float]
    flops_per_inference: int
    param_count: int

    def to_dict(self):
        return {"accuracy": self.accuracy, "flops": self.flops_per_inference, "params": self.param_count}


def measure(net: MaskedNetwork, X=None, y=None) -> Metrics:
    acc = accuracy(net, X, y) if X is not None else None
    return Metrics(acc, net.flops(), net.param_count())

"""Two ways to use labeled synthetic data: pre-train then fine-tune (A), or
twin networks joined by a small trainable head (B)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import TutorError
from .network import MaskedNetwork, Metrics, TrainConfig, accuracy, build_fc, measure, train
from .synthgen import SyntheticBatch
from .tabular import EncodedMatrix, encode

log = logging.getLogger(__name__)

HEAD_WIDTHS = (32, 16)
SYN_HOLDOUT = 0.15


class GuardedSplit:
    """Held-out split that counts every evaluation against it."""

    def __init__(self, X, y, name="test"):
        self._X = np.asarray(X, dtype=float)
        self._y = np.asarray(y, dtype=np.int64)
        self.name = name
        self.reads = 0

    def __len__(self):
        return self._y.shape[0]

    def accuracy(self, model) -> float:
        self.reads += 1
        return accuracy(model, self._X, self._y)

    def predict_with(self, fn):
        self.reads += 1
        return float(np.mean(fn(self._X) == self._y))


# ---------------------------------------------------------------- combined network


class CombinedNetwork:
    """head(concat(real(x), syn(x))) where both subnets emit logits.

    `flatten` lays the whole graph out as one masked network in the order
    real hidden, syn hidden, real logits, syn logits, head hidden, with the
    subnet logits as linear hidden neurons, so it trains, prunes and grows
    like any other network.
    """

    def __init__(self, subnet_real: MaskedNetwork, subnet_syn: MaskedNetwork, head: MaskedNetwork):
        if subnet_real.shape != subnet_syn.shape or subnet_real.n_in != subnet_syn.n_in:
            raise ValueError("subnets must share one architecture")
        if head.n_in != 2 * subnet_real.n_out:
            raise ValueError("head input width must be twice the subnet output width")
        self.subnet_real, self.subnet_syn, self.head = subnet_real, subnet_syn, head

    @classmethod
    def build(cls, subnet_real, subnet_syn, n_classes, widths=HEAD_WIDTHS, seed=0):
        head = build_fc([2 * subnet_real.n_out, *widths, n_classes], seed=seed)
        return cls(subnet_real, subnet_syn, head)

    def forward(self, X):
        z = np.concatenate([self.subnet_real.logits(X), self.subnet_syn.logits(X)], axis=1)
        return self.head.forward(z)

    def _layout(self):
        r, h = self.subnet_real, self.head
        H, c = r.n_hidden, r.n_out
        return {"H": H, "c": c, "real_h": 0, "syn_h": H, "real_o": 2 * H, "syn_o": 2 * H + c,
                "head_h": 2 * H + 2 * c, "total": 2 * H + 2 * c + h.n_hidden}

    def flatten(self) -> MaskedNetwork:
        r, s, h = self.subnet_real, self.subnet_syn, self.head
        L = self._layout()
        d, H, c, T = r.n_in, L["H"], L["c"], L["total"]
        n_out = h.n_out
        W = np.zeros((d + T, T + n_out))
        M = np.zeros_like(W, dtype=bool)
        b = np.zeros(T + n_out)
        lin = np.zeros(T, dtype=bool)
        for sub, h0, o0 in ((r, L["real_h"], L["real_o"]), (s, L["syn_h"], L["syn_o"])):
            # map the subnet's source rows and destination columns into the combined layout
            rows = np.concatenate([np.arange(d), d + h0 + np.arange(H)])
            cols = np.concatenate([h0 + np.arange(H), o0 + np.arange(c)])
            W[np.ix_(rows, cols)] = sub.W
            M[np.ix_(rows, cols)] = sub.mask
            b[cols] = sub.bias
            lin[h0:h0 + H] = sub.linear
            lin[o0:o0 + c] = True
        rows = np.concatenate([d + L["real_o"] + np.arange(2 * c), d + L["head_h"] + np.arange(h.n_hidden)])
        cols = np.concatenate([L["head_h"] + np.arange(h.n_hidden), T + np.arange(n_out)])
        W[np.ix_(rows, cols)] = h.W
        M[np.ix_(rows, cols)] = h.mask
        b[cols] = h.bias
        lin[L["head_h"]:] = h.linear
        return MaskedNetwork(d, T, n_out, W, M, b, lin)

    def unflatten(self, flat: MaskedNetwork) -> "CombinedNetwork":
        """Parts of `flat` (laid out as by `flatten`) as a new CombinedNetwork."""
        r, h = self.subnet_real, self.head
        L = self._layout()
        d, H, c, T = r.n_in, L["H"], L["c"], L["total"]
        parts = []
        for sub, h0, o0 in ((r, L["real_h"], L["real_o"]), (self.subnet_syn, L["syn_h"], L["syn_o"])):
            rows = np.concatenate([np.arange(d), d + h0 + np.arange(H)])
            cols = np.concatenate([h0 + np.arange(H), o0 + np.arange(c)])
            parts.append(MaskedNetwork(d, H, c, flat.W[np.ix_(rows, cols)], flat.mask[np.ix_(rows, cols)],
                                       flat.bias[cols], sub.linear, sub.initial_hidden))
        rows = np.concatenate([d + L["real_o"] + np.arange(2 * c), d + L["head_h"] + np.arange(h.n_hidden)])
        cols = np.concatenate([L["head_h"] + np.arange(h.n_hidden), T + np.arange(h.n_out)])
        head = MaskedNetwork(2 * c, h.n_hidden, h.n_out, flat.W[np.ix_(rows, cols)], flat.mask[np.ix_(rows, cols)],
                             flat.bias[cols], h.linear)
        return CombinedNetwork(parts[0], parts[1], head)


# ---------------------------------------------------------------- schemes


@dataclass
class SchemeResult:
    model: MaskedNetwork
    scheme: str
    method: str
    val_accuracy: float
    test_accuracy: Optional[float]
    metrics: Metrics
    per_method: Dict[str, dict] = field(default_factory=dict)
    candidates: Dict[str, MaskedNetwork] = field(default_factory=dict)

    def to_dict(self):
        return {
            "scheme": self.scheme, "method": self.method, "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy, "metrics": self.metrics.to_dict(),
            "per_method": {k: dict(v) for k, v in sorted(self.per_method.items())},
            "subnet_fine_tuning": "joint" if self.scheme == "B" else None,
        }


def _syn_arrays(batch: SyntheticBatch, layout: EncodedMatrix):
    st = layout.standardizer
    m = encode(batch.data, standardize=st is not None, standardizer=st)
    return m.values, np.asarray(batch.data.y, dtype=np.int64)


def _holdout(n, seed):
    """Deterministic split of range(n) into a fitting part and an early-stopping holdout."""
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(SYN_HOLDOUT * n))) if n >= 2 else 0
    return np.sort(perm[k:]), np.sort(perm[:k])


def train_on_synthetic(template: MaskedNetwork, Xs, ys, cfg: TrainConfig, seed: int):
    fit, hold = _holdout(len(ys), seed)
    if fit.size == 0:
        raise TutorError("synthetic batch is empty")
    Xh, yh = (Xs[hold], ys[hold]) if hold.size else (None, None)
    return train(template, Xs[fit], ys[fit], Xh, yh, cfg).net


def _select(results: Dict[str, tuple]):
    """Highest validation accuracy; ties go to the earlier method in insertion order."""
    best = None
    for method, (net, val) in results.items():
        if best is None or val > best[2]:
            best = (method, net, val)
    return best


def _run_scheme(name, build_one, batches, X_val, y_val, test: Optional[GuardedSplit]):
    per, nets = {}, {}
    for method, batch in batches.items():
        try:
            net = build_one(method, batch)
        except (TutorError, ValueError, FloatingPointError) as e:
            log.warning("scheme %s: method %s failed: %s", name, method, e)
            per[method] = {"status": "failed", "error": str(e)}
            continue
        va = accuracy(net, X_val, y_val)
        per[method] = {"status": "ok", "val_accuracy": va, "params": net.param_count()}
        nets[method] = net
    if not nets:
        raise TutorError(f"scheme {name}: every method failed")
    method, net, va = _select({m: (n, per[m]["val_accuracy"]) for m, n in nets.items()})
    ta = test.accuracy(net) if test is not None else None
    return SchemeResult(net, name, method, va, ta, measure(net), per, nets)


def scheme_a(template: MaskedNetwork, train_m: EncodedMatrix, val_m: EncodedMatrix,
             test: Optional[GuardedSplit], batches: Dict[str, SyntheticBatch],
             cfg: Optional[TrainConfig] = None) -> SchemeResult:
    """Per method: pre-train a copy of `template` on synthetic data, then fine-tune on real."""
    cfg = cfg or TrainConfig()

    def one(method, batch):
        Xs, ys = _syn_arrays(batch, train_m)
        pre = train_on_synthetic(template, Xs, ys, cfg, cfg.seed + 11)
        return train(pre, train_m.values, train_m.labels, val_m.values, val_m.labels, cfg).net

    return _run_scheme("A", one, batches, val_m.values, val_m.labels, test)


def scheme_b(template: MaskedNetwork, train_m: EncodedMatrix, val_m: EncodedMatrix,
             test: Optional[GuardedSplit], batches: Dict[str, SyntheticBatch],
             cfg: Optional[TrainConfig] = None, head_widths=HEAD_WIDTHS, model_real: Optional[MaskedNetwork] = None
             ) -> SchemeResult:
    """Per method: join a synthetic-trained and a real-trained copy of `template`
    under a fresh head and fine-tune the whole graph on real data."""
    cfg = cfg or TrainConfig()
    Xr, yr, Xv, yv = train_m.values, train_m.labels, val_m.values, val_m.labels
    if model_real is None:
        model_real = train(template, Xr, yr, Xv, yv, cfg).net

    def one(method, batch):
        Xs, ys = _syn_arrays(batch, train_m)
        model_syn = train_on_synthetic(template, Xs, ys, cfg, cfg.seed + 13)
        comb = CombinedNetwork.build(model_real, model_syn, template.n_out, head_widths, seed=cfg.seed + 17)
        return train(comb.flatten(), Xr, yr, Xv, yv, cfg).net

    return _run_scheme("B", one, batches, Xv, yv, test)


def select_dnn2(res_a: SchemeResult, res_b: SchemeResult) -> SchemeResult:
    """Higher validation accuracy wins; a tie keeps Scheme A, the smaller model."""
    return res_b if res_b.val_accuracy > res_a.val_accuracy else res_a

"""Experiment configuration and the end-to-end pipeline.

Stages run lazily and each one stores its artifact as JSON under
`<out>/stages/`, tagged with a content hash of the config slice and
upstream inputs it depends on; a later call with the same hash reloads
the artifact instead of recomputing it.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import density
from .errors import ConfigError, StageFailure, TestLeakage, TutorError
from .forest import Forest, IntegrityClassifier, train_forest, train_integrity_classifiers
from .growprune import GrowPruneConfig, synthesize
from .network import MaskedNetwork, TrainConfig, build_fc, measure, train
from .schemes import GuardedSplit, SchemeResult, scheme_a, scheme_b, select_dnn2, train_on_synthetic
from .synthgen import NetworkLabeler, SyntheticBatch, generate_verified, privacy_export
from .tabular import Dataset, FeatureSchema, apply_pca, decode, encode, fit_pca, load_csv, subsample

log = logging.getLogger(__name__)

METHODS = ("mnd", "gmm", "kde")

DEFAULT_DENSITY = {
    "methods": list(METHODS),
    "gmm_components": list(range(1, 11)),
    "gmm_shapes": list(density.SHAPES),
    "gmm_restarts": 3,
    "gmm_max_iter": 200,
    "gmm_tol": 1e-6,
    "kde_bandwidths": list(density.DEFAULT_BANDWIDTHS),
}
DEFAULT_FC_SEARCH = {"depths": [1, 2, 3], "widths": [50, 100, 200]}
DEFAULT_PRIVACY = {"count": 100000, "hidden": [100, 100], "methods": list(METHODS)}
FC_SEARCH_NOTE = "baseline picked from the declared fc_search space, not tuned per dataset"


def _hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _data_hash(*datasets) -> str:
    h = hashlib.sha256()
    for d in datasets:
        h.update(np.ascontiguousarray(d.X).tobytes())
        if d.y is not None:
            h.update(np.ascontiguousarray(d.y).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    schema_path: str
    train_path: str
    validation_path: str
    test_path: str
    seed: int = 0
    output_dir: str = "runs/default"
    density: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    fc_search: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    synthetic_count: Optional[int] = None
    growprune: dict = field(default_factory=dict)
    compression_ratios: list = field(default_factory=lambda: [1, 2, 4, 8])
    pca_ratios: list = field(default_factory=lambda: [1, 2, 4])
    privacy: dict = field(default_factory=dict)

    def __post_init__(self):
        self.density = {**DEFAULT_DENSITY, **self.density}
        self.fc_search = {**DEFAULT_FC_SEARCH, **self.fc_search}
        self.privacy = {**DEFAULT_PRIVACY, **self.privacy}
        unknown = set(self.density) - set(DEFAULT_DENSITY)
        if unknown:
            raise ConfigError(f"unknown density options: {sorted(unknown)}")
        if not set(self.density["methods"]) <= set(METHODS) or not self.density["methods"]:
            raise ConfigError(f"density methods must be a nonempty subset of {METHODS}")
        try:
            self.train_config()
            self.growprune_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if self.synthetic_count is not None and self.synthetic_count < 1:
            raise ConfigError("synthetic_count must be >= 1")
        if any(r < 1 for r in self.compression_ratios + self.pca_ratios):
            raise ConfigError("compression and PCA ratios must be >= 1")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"schema_path", "train_path", "validation_path", "test_path"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        if base_dir is not None:
            for k in ("schema_path", "train_path", "validation_path", "test_path", "output_dir"):
                if k in d and not Path(d[k]).is_absolute():
                    d[k] = str(Path(base_dir) / d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d, base_dir=path.parent)

    def validate_paths(self):
        for k in ("schema_path", "train_path", "validation_path", "test_path"):
            if not Path(getattr(self, k)).is_file():
                raise ConfigError(f"{k} does not exist: {getattr(self, k)}")
        test = Path(self.test_path).resolve()
        if test in (Path(self.validation_path).resolve(), Path(self.train_path).resolve()):
            raise TestLeakage("test split path coincides with the train or validation path")

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def growprune_config(self) -> GrowPruneConfig:
        g = dict(self.growprune)
        if "density_schedule" in g:
            g["density_schedule"] = tuple(g["density_schedule"])
        return GrowPruneConfig(**{"seed": self.seed, "include_start": False, **g})

    def echo(self):
        """Config without filesystem paths, for reports."""
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if not k.endswith("_path") and k != "output_dir"}
        return json.loads(json.dumps(d, sort_keys=True))


@dataclass
class Splits:
    schema: FeatureSchema
    train: Dataset
    validation: Dataset
    test: Dataset


def load_splits(cfg: ExperimentConfig) -> Splits:
    cfg.validate_paths()
    schema = FeatureSchema.load(cfg.schema_path)
    return Splits(schema, load_csv(cfg.train_path, schema, "train"),
                  load_csv(cfg.validation_path, schema, "validation"), load_csv(cfg.test_path, schema, "test"))


# ---------------------------------------------------------------- serialization helpers


def _batch_to_dict(b: SyntheticBatch):
    return {"meta": b.metadata(), "X": b.data.X.tolist(), "y": b.data.y.tolist()}


def _batch_from_dict(d, schema):
    m = d["meta"]
    data = Dataset(schema, np.array(d["X"], dtype=float).reshape(-1, schema.n_features), d["y"], "synthetic")
    return SyntheticBatch(data, m["method"], m["requested_count"], m["retained_count"], m["rejection_log"],
                          m["labeler"], m["draws"], m["collisions"], m["budget_exhausted"], m["seed"])


def _scheme_to_dict(r: SchemeResult):
    return {"result": r.to_dict(), "model": r.model.to_dict(),
            "candidates": {k: v.to_dict() for k, v in sorted(r.candidates.items())}}


def _scheme_from_dict(d):
    res = d["result"]
    net = MaskedNetwork.from_dict(d["model"])
    cands = {k: MaskedNetwork.from_dict(v) for k, v in d["candidates"].items()}
    return SchemeResult(net, res["scheme"], res["method"], res["val_accuracy"], None, measure(net),
                        res["per_method"], cands)


def _fc_candidates(search):
    return [tuple([w] * depth) for depth in search["depths"] for w in search["widths"]]


# ---------------------------------------------------------------- pipeline


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, splits: Splits, out_dir=None):
        self.cfg = cfg
        self.splits = splits
        self.out = Path(out_dir if out_dir is not None else cfg.output_dir)
        self.train_m = encode(splits.train)
        st = self.train_m.standardizer
        self.val_m = encode(splits.validation, standardizer=st)
        test_m = encode(splits.test, standardizer=st)
        self.test = GuardedSplit(test_m.values, test_m.labels)
        self._raw_test = splits.test
        self.data_key = _data_hash(splits.train, splits.validation)
        self._memo = {}

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, out_dir=None):
        return cls(cfg, load_splits(cfg), out_dir)

    # -- stage plumbing

    def _stage(self, name, key, build, dump, load):
        if name in self._memo and self._memo[name][0] == key:
            return self._memo[name][1]
        path = self.out / "stages" / f"{name}.json"
        value = None
        if path.is_file():
            try:
                stored = json.loads(path.read_text(encoding="utf-8"))
                if stored.get("key") == key:
                    value = load(stored["payload"])
            except (ValueError, KeyError, TypeError):
                value = None
        if value is None:
            try:
                value = build()
            except TutorError as e:
                raise StageFailure(name, e) from e
            except (ValueError, np.linalg.LinAlgError, FloatingPointError) as e:
                raise StageFailure(name, e) from e
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"key": key, "payload": dump(value)}, sort_keys=True), encoding="utf-8")
        self._memo[name] = (key, value)
        return value

    def _key(self, name):
        return self._memo[name][0]

    # -- stages

    def densities(self):
        c, seed = self.cfg.density, self.cfg.seed
        key = _hash("densities", c, seed, self.data_key)

        def build():
            X, V = self.train_m.values, self.val_m.values
            models = {}
            for m in c["methods"]:
                if m == "mnd":
                    models[m] = density.fit_mnd(X)
                elif m == "gmm":
                    comps = [k for k in c["gmm_components"] if k <= X.shape[0]]
                    models[m] = density.fit_gmm(X, V, comps, c["gmm_shapes"], seed, c["gmm_max_iter"],
                                                c["gmm_tol"], c["gmm_restarts"])
                else:
                    models[m] = density.fit_kde(X, V, c["kde_bandwidths"])
            return models

        fp = self.splits.schema.fingerprint()
        return self._stage(
            "densities", key, build,
            lambda v: {m: json.loads(density.model_to_json(x, fp)) for m, x in v.items()},
            lambda p: {m: density.model_from_json(json.dumps(x)) for m, x in p.items()},
        )

    def forests(self):
        grid, seed = self.cfg.forest, self.cfg.seed
        key = _hash("forests", grid, seed, self.data_key)

        def build():
            s = self.splits
            kb = train_forest(s.train, s.validation, grid or None, seed)
            integ = train_integrity_classifiers(s.train, s.validation, grid or None, seed)
            return kb, integ

        return self._stage(
            "forests", key, build,
            lambda v: {"kb": v[0].to_dict(), "integrity": [c.to_dict() for c in v[1]]},
            lambda p: (Forest.from_dict(p["kb"]), [IntegrityClassifier.from_dict(c) for c in p["integrity"]]),
        )

    def synthetic_count(self):
        return self.cfg.synthetic_count or len(self.splits.train)

    def batches(self):
        dens = self.densities()
        kb, integ = self.forests()
        count = self.synthetic_count()
        key = _hash("batches", self._key("densities"), self._key("forests"), count, self.cfg.seed)

        def build():
            out = {}
            for i, (m, model) in enumerate(sorted(dens.items(), key=lambda t: METHODS.index(t[0]))):
                out[m] = generate_verified(model, self.train_m, integ, kb, count, self.cfg.seed * 100 + i)
            return out

        schema = self.splits.schema
        return self._stage(
            "batches", key, build,
            lambda v: {m: _batch_to_dict(b) for m, b in v.items()},
            lambda p: {m: _batch_from_dict(b, schema) for m, b in sorted(p.items(), key=lambda t: METHODS.index(t[0]))},
        )

    def baseline(self):
        """FC search over the declared space; best validation accuracy, ties to fewer parameters."""
        tc = self.cfg.train_config()
        search = self.cfg.fc_search
        key = _hash("baseline", search, tc.to_dict(), self.data_key)
        d, c = self.train_m.values.shape[1], self.splits.schema.n_classes

        def build():
            table, best = [], None
            for i, hidden in enumerate(_fc_candidates(search)):
                net = build_fc([d, *hidden, c], seed=self.cfg.seed * 1000 + i)
                res = train(net, self.train_m.values, self.train_m.labels, self.val_m.values, self.val_m.labels, tc)
                va = res.best_val_accuracy
                table.append({"hidden": list(hidden), "val_accuracy": va, "params": res.net.param_count()})
                if best is None or (va, -res.net.param_count()) > (best[1], -best[0].param_count()):
                    best = (res.net, va, list(hidden))
            return {"net": best[0], "val_accuracy": best[1], "hidden": best[2], "search": table}

        return self._stage(
            "baseline", key, build,
            lambda v: {**v, "net": v["net"].to_dict()},
            lambda p: {**p, "net": MaskedNetwork.from_dict(p["net"])},
        )

    def template(self):
        base = self.baseline()
        d, c = self.train_m.values.shape[1], self.splits.schema.n_classes
        return build_fc([d, *base["hidden"], c], seed=self.cfg.seed * 1000 + 500)

    def scheme(self, name):
        batches = self.batches()
        self.baseline()
        tc = self.cfg.train_config()
        key = _hash("scheme", name, self._key("batches"), self._key("baseline"), tc.to_dict())

        def build():
            fn = scheme_a if name == "A" else scheme_b
            return fn(self.template(), self.train_m, self.val_m, None, batches, tc)

        return self._stage(f"scheme_{name.lower()}", key, build, _scheme_to_dict, _scheme_from_dict)

    def dnn2(self):
        return select_dnn2(self.scheme("A"), self.scheme("B"))

    def dnn3(self):
        start = self.dnn2()
        base = self.baseline()
        gp = self.cfg.growprune_config()
        if gp.reference_params is None:
            gp.reference_params = base["net"].param_count()
        tc = self.cfg.train_config()
        key = _hash("dnn3", self._key("scheme_a"), self._key("scheme_b"), gp.to_dict(), tc.to_dict())

        def build():
            res = synthesize(start.model, self.train_m.values, self.train_m.labels, self.val_m.values,
                             self.val_m.labels, gp, tc)
            return {"net": res.net, "val_accuracy": res.val_accuracy, "best_iteration": res.best_iteration,
                    "trace": res.trace}

        return self._stage(
            "dnn3", key, build,
            lambda v: {**v, "net": v["net"].to_dict()},
            lambda p: {**p, "net": MaskedNetwork.from_dict(p["net"])},
        )

    # -- evaluation and report

    def _write_model(self, name, text):
        p = self.out / "models" / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")

    def report(self) -> dict:
        kb, _ = self.forests()
        batches = self.batches()
        base = self.baseline()
        res_a, res_b = self.scheme("A"), self.scheme("B")
        dnn2 = select_dnn2(res_a, res_b)
        dnn3 = self.dnn3()
        t = self.test
        # every final model is scored on the test split exactly once
        base_acc = t.accuracy(base["net"])
        res_a.test_accuracy = t.accuracy(res_a.model)
        res_b.test_accuracy = t.accuracy(res_b.model)
        dnn3_acc = t.accuracy(dnn3["net"])
        rf_acc = t.predict_with(lambda _: kb.predict(self._raw_test))

        def row(net, acc, val, **extra):
            m = measure(net)
            return {"accuracy": acc, "val_accuracy": val, "params": m.param_count, "flops": m.flops_per_inference,
                    "hidden_neurons": net.n_hidden, "active_connections": net.active_connections, **extra}

        rep = {
            "models": {
                "dnn1": row(base["net"], base_acc, base["val_accuracy"], hidden=base["hidden"]),
                "dnn2": row(dnn2.model, dnn2.test_accuracy, dnn2.val_accuracy, scheme=dnn2.scheme, method=dnn2.method),
                "dnn3": row(dnn3["net"], dnn3_acc, dnn3["val_accuracy"], best_iteration=dnn3["best_iteration"]),
                "random_forest": {"accuracy": rf_acc, "val_accuracy": kb.validation_accuracy, "identity": kb.identity},
            },
            "schemes": {"A": res_a.to_dict(), "B": res_b.to_dict()},
            "synthetic": {m: b.metadata() for m, b in batches.items()},
            "densities": _density_summary(self.densities()),
            "baseline_search": base["search"],
            "growprune_trace": dnn3["trace"],
            "data": {"train_rows": len(self.splits.train), "validation_rows": len(self.splits.validation),
                     "test_rows": len(self.splits.test)},
            "test_reads": t.reads,
            "notes": {"fc_search_space": FC_SEARCH_NOTE, "scheme_b_fine_tuning": "joint"},
            "config": self.cfg.echo(),
        }
        self._write_model("dnn1.json", base["net"].to_json())
        self._write_model("dnn2.json", dnn2.model.to_json())
        self._write_model("dnn3.json", dnn3["net"].to_json())
        self._write_model("kb_forest.json", kb.to_json())
        self._write_model("standardizer.json", json.dumps(self.train_m.standardizer.to_dict(), sort_keys=True))
        return rep


def _density_summary(models):
    out = {}
    for m, x in models.items():
        if m == "gmm":
            out[m] = {"components": x.n_components, "shape": x.covariance_shape}
        elif m == "kde":
            out[m] = {"bandwidth": x.bandwidth}
        else:
            out[m] = {"dim": x.dim, "ridge": x.ridge}
    return out


def dumps_report(rep) -> str:
    return json.dumps(rep, sort_keys=True, indent=1) + "\n"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r.get(h) for h in header])
    return buf.getvalue()


def write_report(rep, out_dir, name="report"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(dumps_report(rep), encoding="utf-8")
    if "models" in rep:
        rows = [{"model": k, **v} for k, v in sorted(rep["models"].items())]
        (out / f"{name}.csv").write_text(_csv(rows, ["model", "accuracy", "val_accuracy", "params", "flops"]),
                                         encoding="utf-8")
    if "curve" in rep:
        (out / f"{name}_curve.csv").write_text(
            _csv(rep["curve"], ["ratio", "model", "accuracy", "params", "train_rows", "validation_rows"]),
            encoding="utf-8")


# ---------------------------------------------------------------- experiments


def run_full(cfg: ExperimentConfig, out_dir=None, splits: Optional[Splits] = None) -> dict:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    pipe = Pipeline(cfg, splits or load_splits(cfg), out)
    rep = pipe.report()
    write_report(rep, out)
    return rep


def _curve_rows(ratio, rep):
    d = rep["data"]
    return [{"ratio": ratio, "model": m, "accuracy": rep["models"][m]["accuracy"], "params": rep["models"][m]["params"],
             "train_rows": d["train_rows"], "validation_rows": d["validation_rows"]} for m in ("dnn1", "dnn2", "dnn3")]


def run_compression_sweep(cfg: ExperimentConfig, ratios=None, out_dir=None, splits: Optional[Splits] = None) -> dict:
    """Subsample train and validation per ratio (test untouched) and rerun the pipeline."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    splits = splits or load_splits(cfg)
    ratios = list(ratios if ratios is not None else cfg.compression_ratios)
    curve, points = [], {}
    full = None
    for r in ratios:
        sub = Splits(splits.schema, subsample(splits.train, r, cfg.seed), subsample(splits.validation, r, cfg.seed + 1),
                     splits.test)
        rep = Pipeline(cfg, sub, out / f"ratio_{r:g}").report()
        points[f"{r:g}"] = rep
        curve += _curve_rows(r, rep)
        if r == 1:
            full = rep["models"]["dnn1"]["accuracy"]
    if full is None:
        pipe = Pipeline(cfg, splits, out / "ratio_1")
        full = pipe.test.accuracy(pipe.baseline()["net"])
    matches = [r for r in ratios if points[f"{r:g}"]["models"]["dnn3"]["accuracy"] >= full]
    best = max(matches) if matches else None
    rep = {
        "curve": curve,
        "full_data_dnn1_accuracy": full,
        "smallest_matching": None if best is None else {
            "ratio": best, "train_rows": points[f"{best:g}"]["data"]["train_rows"],
            "validation_rows": points[f"{best:g}"]["data"]["validation_rows"],
        },
        "points": points,
    }
    write_report(rep, out, "compression")
    return rep


def pca_splits(splits: Splits, ratio) -> Splits:
    """Project continuous features onto the top principal components of the standardized train split."""
    tm = encode(splits.train)
    t = fit_pca(tm, ratio)
    st = tm.standardizer

    def proj(d, role):
        return decode(apply_pca(encode(d, standardizer=st), t), role)

    return Splits(t.projected_schema(), proj(splits.train, "train"), proj(splits.validation, "validation"),
                  proj(splits.test, "test"))


def run_pca_sweep(cfg: ExperimentConfig, ratios=None, out_dir=None, splits: Optional[Splits] = None) -> dict:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    splits = splits or load_splits(cfg)
    ratios = list(ratios if ratios is not None else cfg.pca_ratios)
    curve, points = [], {}
    for r in ratios:
        rep = Pipeline(cfg, pca_splits(splits, r), out / f"pca_{r:g}").report()
        points[f"{r:g}"] = rep
        curve += _curve_rows(r, rep)
    rep = {"curve": curve, "points": points}
    write_report(rep, out, "pca")
    return rep


def choose_labeler(pipe: Pipeline):
    """The more validation-accurate of the knowledge-base forest and the FC baseline (ties: forest)."""
    kb, _ = pipe.forests()
    base = pipe.baseline()
    if base["val_accuracy"] > kb.validation_accuracy:
        return NetworkLabeler(base["net"], pipe.train_m, "dnn1")
    return kb


def run_privacy(cfg: ExperimentConfig, out_dir=None, splits: Optional[Splits] = None) -> dict:
    """Export synthetic data per method and train a fixed FC net on it alone, scored on real test data."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    splits = splits or load_splits(cfg)
    pipe = Pipeline(cfg, splits, out)
    dens = pipe.densities()
    _, integ = pipe.forests()
    labeler = choose_labeler(pipe)
    pc = cfg.privacy
    tc = cfg.train_config()
    real_rows = set()
    for d in (splits.train, splits.validation, splits.test):
        real_rows.update(d.rows_as_tuples())
    d_in, c = pipe.train_m.values.shape[1], splits.schema.n_classes
    results = {}
    for i, m in enumerate(pc["methods"]):
        if m not in dens:
            continue
        batch = privacy_export(dens[m], pipe.train_m, integ, labeler, out / "privacy" / f"synthetic_{m}.csv",
                               pc["count"], cfg.seed * 100 + 50 + i, real=(splits.train, splits.validation, splits.test))
        Xs = encode(batch.data, standardizer=pipe.train_m.standardizer).values
        ys = np.asarray(batch.data.y, dtype=np.int64)
        net = train_on_synthetic(build_fc([d_in, *pc["hidden"], c], seed=cfg.seed * 1000 + 700 + i), Xs, ys, tc,
                                 cfg.seed + 19)
        shared = sum(1 for r in batch.data.rows_as_tuples() if r in real_rows)
        results[m] = {"test_accuracy": pipe.test.accuracy(net), "rows": batch.retained_count,
                      "real_rows_in_training": shared, "params": net.param_count(), **batch.metadata()}
    rep = {"labeler": labeler.identity, "hidden": list(pc["hidden"]), "methods": results, "test_reads": pipe.test.reads,
           "config": cfg.echo()}
    write_report(rep, out, "privacy")
    return rep

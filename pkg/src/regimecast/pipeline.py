"""Config-driven experiment runs.

A run is seven stages, each reading the previous stages' files from the
output directory and writing its own subdirectory:

    ingest -> label -> features -> cluster -> train -> evaluate -> report

:func:`run_pipeline` simply runs the stages in order, so running the
subcommands one by one produces the same bytes. Every file carries the
schema version and a hash of the resolved config; a stage refuses input
written under a different config.
"""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import classify, evaluate, features, gmm, indicators, labeling, market_data
from ._io import SCHEMA_VERSION, config_hash, dump_json, format_header, load_json, parse_header
from .errors import ParseError, RegimecastError, SchemaError, StageError
from .synthetic import bundled_path

logger = logging.getLogger(__name__)

STAGES = ("ingest", "label", "features", "cluster", "train", "evaluate", "report")
SCALING_LABELS = ("original", "standardised")
UNFILTERED = "all"


@dataclass
class MarketInput:
    id: str
    csv: str | None = None
    bundled: str | None = None
    okx: dict | None = None       # {"instrument": ..., "start": ms, "end": ms}

    def to_dict(self):
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class ExperimentConfig:
    markets: list
    fill_gaps: str = "none"
    q: float = labeling.DEFAULT_Q
    threshold_fraction: float = 1.0
    families: tuple = ("proposed", "common")
    estpc_mode: str = features.DEFAULT_ESTPC_MODE
    indicator_params: dict = field(default_factory=lambda: dataclasses.asdict(
        indicators.IndicatorParams()))
    scalings: tuple = SCALING_LABELS
    standardise: str = "minmax"
    cluster: bool = True
    k_range: tuple = (1, 10)
    gmm_fit_on_train: bool = False
    em_tol: float = gmm.EMConfig.tol
    em_max_iter: int = gmm.EMConfig.max_iter
    em_n_init: int = gmm.EMConfig.n_init
    em_ridge: float = gmm.EMConfig.ridge
    algorithms: tuple = classify.ALGORITHMS
    knn_k: int = 5
    rf_trees: int = 300
    rf_max_features: int = 0      # 0: ceil(sqrt(d))
    n_jobs: int = 1
    test_fractions: tuple = classify.TEST_FRACTIONS
    baseline_draws: int = 10_000
    seed: int = 0
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        self.markets = [m if isinstance(m, MarketInput) else MarketInput(**m)
                        for m in self.markets]
        if not self.markets:
            raise ValueError("config lists no markets")
        ids = [m.id for m in self.markets]
        if len(set(ids)) != len(ids):
            raise ValueError("market ids must be unique")
        for name in ("families", "scalings", "algorithms", "test_fractions", "k_range"):
            setattr(self, name, tuple(getattr(self, name)))
        for fam in self.families:
            if fam not in features.FAMILIES:
                raise ValueError(f"unknown feature family {fam!r}")
        for s in self.scalings:
            if s not in SCALING_LABELS:
                raise ValueError(f"scalings must be drawn from {SCALING_LABELS}")
        for a in self.algorithms:
            if a not in classify.ALGORITHMS:
                raise ValueError(f"unknown algorithm {a!r}")
        if self.standardise not in ("minmax", "zscore"):
            raise ValueError("standardise must be 'minmax' or 'zscore'")
        if self.estpc_mode not in features.ESTPC_MODES:
            raise ValueError(f"estpc_mode must be one of {sorted(features.ESTPC_MODES)}")
        if len(self.k_range) != 2 or not 1 <= self.k_range[0] <= self.k_range[1]:
            raise ValueError("k_range must be [min, max] with 1 <= min <= max")
        if not 0 < self.threshold_fraction <= 1:
            raise ValueError("threshold_fraction must lie in (0, 1]")

    def to_dict(self):
        """Resolved, JSON-safe config; ``base_dir`` is deliberately left out
        so the hash does not depend on where the config file lives."""
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
             if f.name != "base_dir"}
        d["markets"] = [m.to_dict() for m in self.markets]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["indicator_params"] = {k: list(v) if isinstance(v, (tuple, list)) else v
                                 for k, v in self.indicator_params.items()}
        return d

    @classmethod
    def from_dict(cls, d, base_dir="."):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{**d, "base_dir": str(base_dir)})

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def indicator_obj(self):
        p = dict(self.indicator_params)
        for k in ("ultosc_periods", "ultosc_weights"):
            if k in p:
                p[k] = tuple(p[k])
        return indicators.IndicatorParams(**p)

    def em_config(self):
        return gmm.EMConfig(self.em_tol, self.em_max_iter, self.em_n_init, self.em_ridge)


def load_config(path) -> ExperimentConfig:
    """Read a TOML experiment file (see README for the keys)."""
    try:
        import tomllib
    except ModuleNotFoundError:   # Python < 3.11
        import tomli as tomllib
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


def derive_seed(master, stage, key):
    """Stable 63-bit seed for ``(stage, key)``; independent of run order."""
    h = hashlib.sha256(f"{master}|{stage}|{key}".encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


# --------------------------------------------------------------------------
# file plumbing
# --------------------------------------------------------------------------

def _meta(cfg, stage, **extra):
    return {"config_hash": cfg.hash, "stage": stage, **extra}


def _check(meta, cfg, path):
    if not meta:
        raise SchemaError(f"{path}: missing metadata header")
    if meta.get("schema") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {meta.get('schema')} != {SCHEMA_VERSION}")
    if meta.get("config_hash") != cfg.hash:
        raise SchemaError(f"{path}: written under config {meta.get('config_hash')}, "
                          f"current config is {cfg.hash}")


def _dump(obj, path, cfg, stage):
    dump_json({"schema": SCHEMA_VERSION, **_meta(cfg, stage), **obj}, path)


def _load(path, cfg):
    doc = load_json(path)
    _check(doc, cfg, path)
    return doc


def _read_header(path):
    with open(path, encoding="utf-8") as fh:
        return parse_header(fh.readline())


def _write_rows(path, meta, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_header(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path, cfg):
    with open(path, encoding="utf-8", newline="") as fh:
        meta = parse_header(fh.readline())
        _check(meta, cfg, path)
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


@contextlib.contextmanager
def _stage_dir(out, stage):
    """Build the stage's directory aside and swap it in on success."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / f".{stage}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        if isinstance(exc, StageError):
            raise
        if isinstance(exc, Exception):
            raise StageError(stage, exc) from exc
        raise
    final = out / stage
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def _fmt_fraction(f):
    return repr(float(f))


def cell_id(market, family, scaling, subset, fraction, algorithm):
    return f"{market}__{family}__{scaling}__{subset}__{_fmt_fraction(fraction)}__{algorithm}"


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _load_market(cfg, m: MarketInput):
    fill = None if cfg.fill_gaps == "none" else cfg.fill_gaps
    if m.csv is not None:
        p = Path(m.csv)
        if not p.is_absolute():
            p = Path(cfg.base_dir) / p
        if not p.exists():
            raise FileNotFoundError(f"market {m.id}: no such file {p}")
        return market_data.parse_candles_csv(p, m.id, fill_gaps=fill)
    if m.bundled is not None:
        return market_data.parse_candles_csv(bundled_path(m.bundled), m.id, fill_gaps=fill)
    if m.okx is not None:
        return market_data.fetch_candles_okx(m.okx["instrument"], int(m.okx["start"]),
                                             int(m.okx["end"]), market_id=m.id)
    raise ValueError(f"market {m.id} has no data source")


def stage_ingest(cfg, out):
    with _stage_dir(out, "ingest") as d:
        for m in cfg.markets:
            series = _load_market(cfg, m)
            market_data.write_candles_csv(series, d / f"{m.id}.csv",
                                          meta=_meta(cfg, "ingest", market=m.id))


def _read_candles(cfg, out, market_id):
    path = Path(out) / "ingest" / f"{market_id}.csv"
    s = market_data.parse_candles_csv(path, market_id)
    _check(s.meta, cfg, path)
    return s


def stage_label(cfg, out):
    with _stage_dir(out, "label") as d:
        for m in cfg.markets:
            series = _read_candles(cfg, out, m.id)
            rets = market_data.log_returns(series)
            n_fit = math.ceil(len(rets) * cfg.threshold_fraction)
            th = labeling.compute_thresholds(rets.returns[:n_fit], cfg.q)
            dec = labeling.label_series(rets, th)
            meta = _meta(cfg, "label", market=m.id)
            labeling.write_decisions_csv(dec, d / f"{m.id}.csv", meta=meta)
            _dump({"market": m.id, "lower": th.lower, "upper": th.upper, "q": th.quantile_q,
                   "fitted_on": n_fit}, d / f"{m.id}.thresholds.json", cfg, "label")


def stage_features(cfg, out):
    with _stage_dir(out, "features") as d:
        params = cfg.indicator_obj()
        for m in cfg.markets:
            series = _read_candles(cfg, out, m.id)
            path = Path(out) / "label" / f"{m.id}.csv"
            dec, meta = labeling.read_decisions_csv(path, m.id)
            _check(meta, cfg, path)
            for fam in cfg.families:
                table = features.build_dataset(series, dec, fam, cfg.estpc_mode, params)
                features.write_features_csv(table, d / f"{m.id}.{fam}.csv",
                                            meta=_meta(cfg, "features"))


def _read_features(cfg, out, market_id, family):
    path = Path(out) / "features" / f"{market_id}.{family}.csv"
    table, meta = features.read_features_csv(path)
    _check(meta, cfg, path)
    return table


def _cluster_scopes(cfg):
    if not cfg.gmm_fit_on_train:
        return [("full", None)]
    return [(f"train-{_fmt_fraction(f)}", f) for f in cfg.test_fractions]


def stage_cluster(cfg, out):
    with _stage_dir(out, "cluster") as d:
        if not cfg.cluster:
            return
        k_lo, k_hi = cfg.k_range
        for m in cfg.markets:
            for fam in cfg.families:
                table = _read_features(cfg, out, m.id, fam)
                scopes = []
                for scope, frac in _cluster_scopes(cfg):
                    rows = (len(table) if frac is None
                            else classify.SplitSpec(frac).boundary(len(table)))
                    scaler = classify.fit_scaler(table.X[:rows], cfg.standardise)
                    fit = gmm.select_k(scaler.transform(table.X[:rows]),
                                       range(k_lo, k_hi + 1),
                                       seed=derive_seed(cfg.seed, "cluster",
                                                        f"{m.id}/{fam}/{scope}"),
                                       config=cfg.em_config())
                    Xs = scaler.transform(table.X)
                    assign = gmm.assign_and_filter(fit, Xs)
                    profile = gmm.cluster_profile(fit, Xs, assign.labels)
                    scopes.append({"scope": scope, "fit_rows": rows,
                                   "scaler": scaler.to_dict(), "model": gmm.fit_to_dict(fit),
                                   "labels": assign.labels.tolist(),
                                   "sizes": assign.sizes,
                                   "profile": [[None if np.isnan(v) else float(v) for v in r]
                                               for r in profile]})
                    stem = f"{m.id}.{fam}" + ("" if frac is None else f".{scope}")
                    meta = _meta(cfg, "cluster", market=m.id, family=fam, scope=scope)
                    _write_rows(d / f"{stem}.bic.csv", meta, ["k", "bic"],
                                [[k, "" if v is None else repr(float(v))]
                                 for k, v in sorted(fit.bic_curve.items())])
                    _write_rows(d / f"{stem}.profile.csv", meta,
                                ["cluster", "n"] + list(table.names),
                                [[k, assign.sizes[k]] + ["" if np.isnan(v) else repr(float(v))
                                                         for v in profile[k]]
                                 for k in range(fit.K)])
                _dump({"market": m.id, "family": fam,
                       "block_index": table.block_index.tolist(), "scopes": scopes},
                      d / f"{m.id}.{fam}.json", cfg, "cluster")


def _subsets(cfg, out, market_id, family, n, fraction):
    """``[(subset name, row indices)]`` for one split: the unfiltered
    series plus one entry per mixture component."""
    subsets = [(UNFILTERED, np.arange(n))]
    if not cfg.cluster:
        return subsets
    doc = _load(Path(out) / "cluster" / f"{market_id}.{family}.json", cfg)
    want = "full" if not cfg.gmm_fit_on_train else f"train-{_fmt_fraction(fraction)}"
    scope = next(s for s in doc["scopes"] if s["scope"] == want)
    labels = np.array(scope["labels"], dtype=np.int64)
    for k in range(scope["model"]["K"]):
        subsets.append((f"c{k}", np.flatnonzero(labels == k)))
    return subsets


def iter_cells(cfg, out):
    """Yield ``(cell_id, axes, table, rows)`` over the whole report grid."""
    for m in cfg.markets:
        for fam in cfg.families:
            table = _read_features(cfg, out, m.id, fam)
            for frac in cfg.test_fractions:
                for subset, rows in _subsets(cfg, out, m.id, fam, len(table), frac):
                    for scaling in cfg.scalings:
                        for algo in cfg.algorithms:
                            axes = {"market": m.id, "family": fam, "scaling": scaling,
                                    "cluster": subset, "test_fraction": frac,
                                    "algorithm": algo}
                            yield (cell_id(m.id, fam, scaling, subset, frac, algo), axes,
                                   table, rows)


def _split_rows(rows, frac):
    """Temporal split of a subset; returns ``(train, test, reason)``."""
    try:
        tr, te = classify.temporal_split(rows, classify.SplitSpec(frac))
    except RegimecastError as exc:
        return None, None, str(exc)
    if len(te) < 2:
        return None, None, f"test block has {len(te)} row(s); APC needs 2"
    return tr, te, None


def _train_cell(cfg, cid, axes, table, rows):
    """Fit one cell; returns ``(model document, prediction rows)``."""
    tr, te, reason = _split_rows(rows, axes["test_fraction"])
    if reason is not None:
        return {"cell": cid, "axes": axes, "status": "skipped", "reason": reason}, None
    kind = "none" if axes["scaling"] == "original" else cfg.standardise
    scaler = classify.fit_scaler(table.X[tr], kind)
    Xtr, Xte = scaler.transform(table.X[tr]), scaler.transform(table.X[te])
    algo = axes["algorithm"]
    hyper = {}
    if algo == "knn":
        hyper = {"k": min(cfg.knn_k, len(tr))}
    elif algo == "random_forest":
        hyper = {"n_trees": cfg.rf_trees, "max_features": cfg.rf_max_features or None}
    model = classify.train(algo, Xtr, table.y[tr], seed=derive_seed(cfg.seed, "train", cid),
                           **hyper)
    pred = model.predict(Xte)
    doc = {"cell": cid, "axes": axes, "status": "ok", "n_train": len(tr), "n_test": len(te),
           "scaler": scaler.to_dict(), "model": model.to_dict()}
    rows = [[int(table.block_index[i]), labeling.CLASSES[p].value] for i, p in zip(te, pred)]
    return doc, rows


def stage_train(cfg, out):
    cells = list(iter_cells(cfg, out))
    with _stage_dir(out, "train") as d, \
            ThreadPoolExecutor(max_workers=max(1, cfg.n_jobs)) as pool:
        # cells are independent and seeded by id; results are written in grid order
        results = pool.map(lambda c: _train_cell(cfg, *c), cells)
        for (cid, *_), (doc, pred_rows) in zip(cells, results):
            _dump(doc, d / f"{cid}.json", cfg, "train")
            if pred_rows is not None:
                _write_rows(d / f"{cid}.pred.csv", _meta(cfg, "train", cell=cid),
                            ["block_index", "decision"], pred_rows)


def stage_evaluate(cfg, out):
    bands_cache = {}
    with _stage_dir(out, "evaluate") as d:
        for cid, axes, table, rows in iter_cells(cfg, out):
            tdoc = _load(Path(out) / "train" / f"{cid}.json", cfg)
            report = {"cell": cid, "axes": axes, "status": tdoc["status"],
                      "version": __version__, "config": cfg.to_dict()}
            if tdoc["status"] != "ok":
                report["reason"] = tdoc["reason"]
                _dump(report, d / f"{cid}.json", cfg, "evaluate")
                continue
            _, te, _ = _split_rows(rows, axes["test_fraction"])
            _, pred_rows = _read_rows(Path(out) / "train" / f"{cid}.pred.csv", cfg)
            pos = {int(b): i for i, b in enumerate(table.block_index)}
            pred_idx = [pos[int(r[0])] for r in pred_rows]
            if pred_idx != te.tolist():
                raise SchemaError(f"{cid}: predictions do not match the test block")
            pred = labeling.encode(r[1] for r in pred_rows)
            true, ret = table.y[te], table.target_return[te]
            metrics = evaluate.score(true, pred, ret)
            key = (axes["market"], axes["family"], axes["cluster"], axes["test_fraction"])
            if key not in bands_cache:
                bands_cache[key] = evaluate.baseline_bands(
                    true, ret, cfg.baseline_draws,
                    seed=derive_seed(cfg.seed, "baseline", "/".join(map(str, key))))
            report.update({
                "n_train": tdoc["n_train"], "n_test": tdoc["n_test"],
                "metrics": metrics.to_dict(),
                "confusion": evaluate.confusion(true, pred).matrix.tolist(),
                "baseline": bands_cache[key].to_dict(),
                "hyperparameters": tdoc["model"]["hyperparameters"],
                # audit trail: both return series that enter the APC sum
                "audit": {"block_index": table.block_index[te].tolist(),
                          "target_return": ret.tolist(),
                          "true": [labeling.CLASSES[c].value for c in true],
                          "pred": [labeling.CLASSES[c].value for c in pred]},
            })
            _dump(report, d / f"{cid}.json", cfg, "evaluate")


FIGURES = {
    "fig_mean_acc_unfiltered.csv": ("mean_acc", False),
    "fig_mean_acc_clustered.csv": ("mean_acc", True),
    "fig_apc_unfiltered.csv": ("apc", False),
    "fig_apc_clustered.csv": ("apc", True),
}
FIG_COLUMNS = ["market", "family", "scaling", "cluster", "test_fraction", "algorithm",
               "status", "metric", "value", "baseline_mean", "baseline_p2.5",
               "baseline_p97.5"]


def stage_report(cfg, out):
    out = Path(out)
    with _stage_dir(out, "report") as d:
        rows = {name: [] for name in FIGURES}
        for cid, axes, _, _ in iter_cells(cfg, out):
            rep = _load(out / "evaluate" / f"{cid}.json", cfg)
            for name, (metric, clustered) in FIGURES.items():
                if (axes["cluster"] != UNFILTERED) != clustered:
                    continue
                base = [axes["market"], axes["family"], axes["scaling"], axes["cluster"],
                        _fmt_fraction(axes["test_fraction"]), axes["algorithm"],
                        rep["status"], metric]
                if rep["status"] == "ok":
                    b = rep["baseline"][metric]
                    vals = [rep["metrics"][metric], b["mean"], b["p2.5"], b["p97.5"]]
                    base += [repr(float(v)) for v in vals]
                else:
                    base += ["", "", "", ""]
                rows[name].append(base)
        meta = _meta(cfg, "report")
        for name, r in rows.items():
            _write_rows(d / name, meta, FIG_COLUMNS, r)
        prof = []
        if cfg.cluster:
            for m in cfg.markets:
                for fam in cfg.families:
                    doc = _load(out / "cluster" / f"{m.id}.{fam}.json", cfg)
                    names = features.FAMILIES[fam]
                    for sc in doc["scopes"]:
                        for k, means in enumerate(sc["profile"]):
                            for fname, v in zip(names, means):
                                prof.append([m.id, fam, sc["scope"], f"c{k}",
                                             sc["sizes"][k], fname,
                                             "" if v is None else repr(float(v))])
        _write_rows(d / "table_cluster_profiles.csv", meta,
                    ["market", "family", "scope", "cluster", "n", "feature",
                     "mean_standardised"], prof)
        files = {}
        for stage in STAGES[:-1]:
            for p in sorted((out / stage).glob("*")):
                files[f"{stage}/{p.name}"] = hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(d.glob("*")):
            files[f"report/{p.name}"] = hashlib.sha256(p.read_bytes()).hexdigest()
        n_reports = sum(1 for f in files if f.startswith("evaluate/"))
        _dump({"version": __version__, "config": cfg.to_dict(), "n_reports": n_reports,
               "files": files}, d / "manifest.json", cfg, "report")


STAGE_FUNCS = {
    "ingest": stage_ingest, "label": stage_label, "features": stage_features,
    "cluster": stage_cluster, "train": stage_train, "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(stage, cfg, out):
    logger.info("stage %s", stage)
    try:
        STAGE_FUNCS[stage](cfg, Path(out))
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def run_pipeline(cfg: ExperimentConfig, out):
    """Run every stage; on failure remove what this run wrote and raise
    :class:`StageError` naming the stage."""
    out = Path(out)
    created = []
    try:
        for stage in STAGES:
            if not (out / stage).exists():
                created.append(out / stage)
            run_stage(stage, cfg, out)
    except StageError:
        for p in created:
            shutil.rmtree(p, ignore_errors=True)
        raise
    return out / "report" / "manifest.json"

"""Command-line entry point.

Every stage subcommand works in two ways:

* ``regimecast <stage> --config exp.toml --out DIR`` runs that stage of a
  configured experiment, reading the earlier stages' files from ``DIR``;
* without ``--config`` it works on single files, e.g.
  ``regimecast label --input returns.csv --q 0.04 --output decisions.csv``.

``regimecast run --config exp.toml --out DIR`` runs all seven stages.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, classify, evaluate, features, gmm, labeling, market_data, pipeline
from ._io import SCHEMA_VERSION, dump_json, format_header
from .errors import RegimecastError, StageError

logger = logging.getLogger("regimecast")


def _k_range(text):
    try:
        lo, hi = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected MIN:MAX, e.g. 1:10") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError("need 1 <= MIN <= MAX")
    return lo, hi


def _stage_args(p):
    p.add_argument("--config", type=Path, help="experiment TOML file")
    p.add_argument("--out", type=Path, help="run output directory (with --config)")


# --------------------------------------------------------------------------
# ad-hoc handlers
# --------------------------------------------------------------------------

def _adhoc_ingest(a):
    if a.okx:
        series = market_data.fetch_candles_okx(a.okx, a.start, a.end, market_id=a.market)
    else:
        series = market_data.parse_candles_csv(a.input, a.market, fill_gaps=a.fill_gaps)
    market_data.write_candles_csv(series, a.output, meta={"market": a.market})
    if a.returns_output:
        market_data.write_returns_csv(market_data.log_returns(series), a.returns_output,
                                      meta={"market": a.market})


def _read_returns_any(path, market):
    with open(path, encoding="utf-8") as fh:
        header = next((ln for ln in fh if not ln.startswith("#")), "")
    if header.strip() == "timestamp,return":
        return market_data.read_returns_csv(path, market)
    return market_data.log_returns(market_data.parse_candles_csv(path, market))


def _adhoc_label(a):
    rets = _read_returns_any(a.input, a.market)
    n_fit = int(np.ceil(len(rets) * a.threshold_fraction))
    th = labeling.compute_thresholds(rets.returns[:n_fit], a.q)
    labeling.write_decisions_csv(labeling.label_series(rets, th), a.output,
                                 meta={"market": a.market, "q": a.q, "lower": th.lower,
                                       "upper": th.upper})


def _adhoc_features(a):
    series = market_data.parse_candles_csv(a.candles, a.market)
    dec, _ = labeling.read_decisions_csv(a.decisions, a.market)
    table = features.build_dataset(series, dec, a.family, a.estpc_mode)
    features.write_features_csv(table, a.output)


def _adhoc_cluster(a):
    table, _ = features.read_features_csv(a.features)
    rows = len(table)
    if a.fit_on_train is not None:
        rows = classify.SplitSpec(a.fit_on_train).boundary(len(table))
    scaler = classify.fit_scaler(table.X[:rows], a.standardise)
    fit = gmm.select_k(scaler.transform(table.X[:rows]), range(a.k_range[0], a.k_range[1] + 1),
                       seed=a.seed, config=gmm.EMConfig(n_init=a.n_init))
    labels = gmm.assign_and_filter(fit, scaler.transform(table.X)).labels
    dump_json({"schema": SCHEMA_VERSION, "scaler": scaler.to_dict(), "fit_rows": rows,
               "model": gmm.fit_to_dict(fit),
               "assignments": {"block_index": table.block_index.tolist(),
                               "cluster": labels.tolist()}}, a.output)
    if a.bic_output:
        with open(a.bic_output, "w", encoding="utf-8") as fh:
            fh.write(format_header({"k_range": list(a.k_range), "seed": a.seed}))
            fh.write("k,bic\n")
            for k, v in sorted(fit.bic_curve.items()):
                fh.write(f"{k},{'' if v is None else repr(float(v))}\n")


def _adhoc_train(a):
    table, _ = features.read_features_csv(a.features)
    tr, te = classify.temporal_split(np.arange(len(table)), classify.SplitSpec(a.test_fraction))
    scaler = classify.fit_scaler(table.X[tr], a.scaling)
    hyper = {}
    if a.algorithm == "knn":
        hyper = {"k": a.k}
    elif a.algorithm == "random_forest":
        hyper = {"n_trees": a.n_trees, "n_jobs": a.n_jobs}
    model = classify.train(a.algorithm, scaler.transform(table.X[tr]), table.y[tr],
                           seed=a.seed, **hyper)
    pred = model.predict(scaler.transform(table.X[te]))
    dump_json({"schema": SCHEMA_VERSION, "scaler": scaler.to_dict(), "model": model.to_dict(),
               "test_fraction": a.test_fraction}, a.output)
    if a.predictions:
        with open(a.predictions, "w", encoding="utf-8") as fh:
            fh.write(format_header({"algorithm": a.algorithm}))
            fh.write("block_index,decision\n")
            for i, p in zip(te, pred):
                fh.write(f"{int(table.block_index[i])},{labeling.CLASSES[p].value}\n")


def _adhoc_evaluate(a):
    table, _ = features.read_features_csv(a.features)
    pos = {int(b): i for i, b in enumerate(table.block_index)}
    idx, pred = [], []
    with open(a.predictions, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if not ln.startswith("#") and ln.strip()]
    for ln in lines[1:]:
        b, d = ln.split(",")
        idx.append(pos[int(b)])
        pred.append(d)
    idx = np.array(idx, dtype=np.int64)
    true, ret, pred = table.y[idx], table.target_return[idx], labeling.encode(pred)
    doc = {"schema": SCHEMA_VERSION, "metrics": evaluate.score(true, pred, ret).to_dict(),
           "confusion": evaluate.confusion(true, pred).matrix.tolist(),
           "baseline": evaluate.baseline_bands(true, ret, a.draws, a.seed).to_dict()}
    dump_json(doc, a.output)


ADHOC = {"ingest": _adhoc_ingest, "label": _adhoc_label, "features": _adhoc_features,
         "cluster": _adhoc_cluster, "train": _adhoc_train, "evaluate": _adhoc_evaluate}

ADHOC_REQUIRED = {"ingest": ("market", "output"), "label": ("input", "output"),
                  "features": ("candles", "decisions", "output"),
                  "cluster": ("features", "output"), "train": ("features", "output"),
                  "evaluate": ("features", "predictions", "output")}


def build_parser():
    ap = argparse.ArgumentParser(prog="regimecast", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"regimecast {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every stage of a configured experiment")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ingest", help="read/validate candles (CSV or OKX)")
    _stage_args(p)
    p.add_argument("--input", type=Path, help="candles CSV")
    p.add_argument("--okx", metavar="INSTRUMENT", help="fetch from OKX instead, e.g. BTC-USDT")
    p.add_argument("--start", type=int, help="epoch ms (with --okx)")
    p.add_argument("--end", type=int, help="epoch ms, exclusive (with --okx)")
    p.add_argument("--market", help="market id")
    p.add_argument("--fill-gaps", choices=["forward"])
    p.add_argument("--output", type=Path, help="validated candles CSV")
    p.add_argument("--returns-output", type=Path, help="also write log returns here")

    p = sub.add_parser("label", help="label returns Buy/Sell/Hold")
    _stage_args(p)
    p.add_argument("--input", type=Path, help="returns CSV or candles CSV")
    p.add_argument("--market", default="market")
    p.add_argument("--q", type=float, default=labeling.DEFAULT_Q)
    p.add_argument("--threshold-fraction", type=float, default=1.0,
                   help="estimate thresholds on this leading fraction only")
    p.add_argument("--output", type=Path)

    p = sub.add_parser("features", help="hourly feature table")
    _stage_args(p)
    p.add_argument("--candles", type=Path)
    p.add_argument("--decisions", type=Path)
    p.add_argument("--market", default="market")
    p.add_argument("--family", choices=sorted(features.FAMILIES), default="proposed")
    p.add_argument("--estpc-mode", choices=sorted(features.ESTPC_MODES),
                   default=features.DEFAULT_ESTPC_MODE)
    p.add_argument("--output", type=Path)

    p = sub.add_parser("cluster", help="BIC-selected Gaussian mixture")
    _stage_args(p)
    p.add_argument("--features", type=Path)
    p.add_argument("--k-range", type=_k_range, default=(1, 10))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-init", type=int, default=gmm.EMConfig.n_init)
    p.add_argument("--standardise", choices=["minmax", "zscore"], default="minmax")
    p.add_argument("--fit-on-train", type=float, metavar="TEST_FRACTION",
                   help="fit on the training block of this split only")
    p.add_argument("--output", type=Path, help="model JSON")
    p.add_argument("--bic-output", type=Path, help="BIC curve CSV")

    p = sub.add_parser("train", help="fit a classifier on a temporal split")
    _stage_args(p)
    p.add_argument("--features", type=Path)
    p.add_argument("--algorithm", choices=classify.ALGORITHMS, default="knn")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--scaling", choices=classify.SCALER_KINDS, default="none")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n-trees", type=int, default=300)
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, help="model JSON")
    p.add_argument("--predictions", type=Path, help="predictions CSV")

    p = sub.add_parser("evaluate", help="score predictions against a random baseline")
    _stage_args(p)
    p.add_argument("--features", type=Path)
    p.add_argument("--predictions", type=Path)
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path)

    p = sub.add_parser("report", help="figure tables and run manifest")
    _stage_args(p)
    return ap


def main(argv=None):
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "run":
            cfg = pipeline.load_config(a.config)
            manifest = pipeline.run_pipeline(cfg, a.out)
            print(manifest)
        elif a.config is not None:
            if a.out is None:
                ap.error("--out is required with --config")
            pipeline.run_stage(a.command, pipeline.load_config(a.config), a.out)
        else:
            if a.command == "report":
                ap.error("report needs --config and --out")
            missing = [f"--{n}" for n in ADHOC_REQUIRED[a.command]
                       if getattr(a, n) is None]
            if a.command == "ingest" and a.input is None and a.okx is None:
                missing.append("--input or --okx")
            if a.command == "ingest" and a.okx and (a.start is None or a.end is None):
                missing.append("--start/--end")
            if missing:
                ap.error(f"{a.command}: missing {', '.join(missing)} (or use --config)")
            ADHOC[a.command](a)
    except StageError as exc:
        print(f"regimecast: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return 1
    except (RegimecastError, OSError, ValueError, KeyError) as exc:
        print(f"regimecast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

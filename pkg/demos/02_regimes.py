"""Find market regimes with a BIC-selected Gaussian mixture and compare a
classifier trained inside each regime against the random policy.

    python3 demos/02_regimes.py [BTC|PEPE|NDQ]
"""
import sys
import warnings

import numpy as np

from regimecast import classify, evaluate, features, gmm, labeling, market_data
from regimecast.errors import RegimecastError
from regimecast.synthetic import load_bundled

warnings.simplefilter("ignore", RuntimeWarning)   # Hold-only test blocks are common

market = sys.argv[1] if len(sys.argv) > 1 else "PEPE"
candles = load_bundled(market)
returns = market_data.log_returns(candles)
decisions = labeling.label_series(returns, labeling.compute_thresholds(returns))
table = features.build_dataset(candles, decisions, "proposed")

# Min-max scale the features, then let BIC choose the number of components.
scaler = classify.fit_scaler(table.X, "minmax")
fit = gmm.select_k(scaler.transform(table.X), range(1, 7), seed=0,
                   config=gmm.EMConfig(n_init=5))
print(f"{market}: BIC picks K = {fit.K}")
for k, value in sorted(fit.bic_curve.items()):
    print(f"  K={k:<2} BIC {value:10.1f}" + ("  <-" if k == fit.K else ""))

labels = gmm.assign_and_filter(fit, scaler.transform(table.X)).labels
subsets = [("all", np.arange(len(table)))] + [
    (f"c{k}", np.flatnonzero(labels == k)) for k in range(fit.K)]

print("\nrandom forest on the last 30% of each subset")
print(f"{'subset':<7}{'rows':>5}{'mean_acc':>10}{'random p97.5':>14}{'APC':>10}")
for name, rows in subsets:
    try:
        train, test = classify.temporal_split(rows, classify.SplitSpec(0.3))
    except RegimecastError as exc:
        print(f"{name:<7}{len(rows):>5}  skipped: {exc}")
        continue
    if len(test) < 2:
        print(f"{name:<7}{len(rows):>5}  skipped: test block too small")
        continue
    model = classify.rf_train(table.X[train], table.y[train], n_trees=100, seed=0)
    pred = model.predict(table.X[test])
    metrics = evaluate.score(table.y[test], pred, table.target_return[test])
    bands = evaluate.baseline_bands(table.y[test], table.target_return[test], 2000, seed=0)
    print(f"{name:<7}{len(rows):>5}{metrics.mean_acc:>10.3f}"
          f"{bands.mean_acc.p97_5:>14.3f}{metrics.apc:>10.5f}")

"""Walk one bundled market from minute candles to an hourly feature table.

    python3 demos/01_labels_and_features.py [BTC|PEPE|NDQ]
"""
import sys

import numpy as np

from regimecast import features, labeling, market_data
from regimecast.synthetic import load_bundled

market = sys.argv[1] if len(sys.argv) > 1 else "BTC"
candles = load_bundled(market)
print(f"{market}: {len(candles)} one-minute candles")

# Every minute-to-minute log return is labeled against the 4% quantile of
# the returns and its mirror image, so Buy and Sell are both rare.
returns = market_data.log_returns(candles)
thresholds = labeling.compute_thresholds(returns, q=0.04)
decisions = labeling.label_series(returns, thresholds)
print(f"thresholds: sell below {thresholds.lower:.6f}, buy above {thresholds.upper:.6f}")
for code, name in enumerate(d.value for d in labeling.CLASSES):
    print(f"  {name:<4} {np.mean(decisions.codes == code):6.2%} of minutes")

# Each hour gives one observation: features of minutes 1..59 and the label
# of the move into minute 60 as the target.
for family in ("proposed", "common"):
    table = features.build_dataset(candles, decisions, family)
    print(f"\n{family} family: {len(table)} hourly rows, features {list(table.names)}")
    print("first row:", np.array2string(table.X[0], precision=4, suppress_small=True))
    counts = np.bincount(table.y, minlength=3)
    print("targets:", dict(zip((d.value for d in labeling.CLASSES), counts.tolist())))

"""regimecast: hourly trading-decision experiments on minute candles.

Minute closes are labelled Buy/Sell/Hold with a symmetric quantile
threshold, summarised per hour by peak-curvature or indicator features,
optionally split into regimes by a BIC-selected Gaussian mixture, and
classified with KNN or a random forest against a uniform random policy.
"""
__version__ = "0.1.0"

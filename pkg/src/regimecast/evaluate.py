"""Per-class accuracy, accumulated percentage change (APC) and the
random-policy percentile bands."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .labeling import BUY, CLASSES, HOLD, SELL, quantile_linear

N_CLASSES = len(CLASSES)
# APC sign of the next-step return for each decision code
_SIGN = np.zeros(N_CLASSES)
_SIGN[BUY], _SIGN[SELL] = 1.0, -1.0


@dataclass
class ConfusionCounts:
    """``matrix[true, pred]`` indexed by decision code (Buy, Sell, Hold)."""

    matrix: np.ndarray

    @property
    def total(self):
        return int(self.matrix.sum())

    def __getattr__(self, name):
        # T_b, F_bs, ... : first letter true class, second predicted
        letters = {"b": BUY, "s": SELL, "h": HOLD}
        if len(name) == 3 and name[0] == "T" and name[2] in letters:
            c = letters[name[2]]
            return int(self.matrix[c, c])
        if len(name) == 4 and name[0] == "F" and name[1] == "_" \
                and name[2] in letters and name[3] in letters:
            return int(self.matrix[letters[name[2]], letters[name[3]]])
        raise AttributeError(name)


def confusion(true, pred) -> ConfusionCounts:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise DomainError(f"length mismatch: {len(true)} true vs {len(pred)} predicted")
    m = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    return ConfusionCounts(m)


@dataclass
class Metrics:
    acc_b: float
    acc_s: float
    acc_h: float
    mean_acc: float
    apc: float | None = None
    zero_support: list = field(default_factory=list)

    def to_dict(self):
        return {"acc_b": self.acc_b, "acc_s": self.acc_s, "acc_h": self.acc_h,
                "mean_acc": self.mean_acc, "apc": self.apc,
                "zero_support": list(self.zero_support)}


def per_class_and_mean_accuracy(counts: ConfusionCounts) -> Metrics:
    """Recall of each class and their plain average. A class that never
    occurs in ``true`` scores 0 and is listed in ``zero_support``."""
    m = counts.matrix
    accs, missing = [], []
    for c in (BUY, SELL, HOLD):
        support = int(m[c].sum())
        if support == 0:
            missing.append(CLASSES[c].value)
            accs.append(0.0)
        else:
            accs.append(int(m[c, c]) / support)
    if missing:
        warnings.warn(f"no true instances of {', '.join(missing)}; accuracy set to 0",
                      RuntimeWarning, stacklevel=2)
    return Metrics(accs[0], accs[1], accs[2], (accs[0] + accs[1] + accs[2]) / 3,
                   zero_support=missing)


def apc(returns, decisions) -> float:
    """Accumulated percentage change.

    Sums, over every step but the last, the step's own return plus the
    next step's return when the step's decision is Buy, or minus it when
    Sell.
    """
    w = np.asarray(returns, dtype=np.float64)
    d = np.asarray(decisions, dtype=np.int64)
    if w.shape != d.shape:
        raise DomainError(f"length mismatch: {len(w)} returns vs {len(d)} decisions")
    if len(w) < 2:
        raise DomainError("APC needs at least two steps")
    return float(np.sum(w[:-1]) + np.sum(_SIGN[d[:-1]] * w[1:]))


def score(true, pred, returns) -> Metrics:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        m = per_class_and_mean_accuracy(confusion(true, pred))
    m.apc = apc(returns, pred)
    return m


@dataclass
class Band:
    mean: float
    p2_5: float
    p97_5: float
    min: float
    max: float

    def to_dict(self):
        return {"mean": self.mean, "p2.5": self.p2_5, "p97.5": self.p97_5,
                "min": self.min, "max": self.max}


@dataclass
class BaselineBands:
    n_draws: int
    seed: int
    mean_acc: Band
    apc: Band

    def to_dict(self):
        return {"n_draws": self.n_draws, "seed": self.seed,
                "mean_acc": self.mean_acc.to_dict(), "apc": self.apc.to_dict()}


def _band(values):
    return Band(float(np.mean(values)), quantile_linear(values, 0.025),
                quantile_linear(values, 0.975), float(np.min(values)),
                float(np.max(values)))


def random_draws(n_draws, T, seed):
    """``(n_draws, T)`` random-policy decisions; draw ``i`` comes from the
    ``i``-th child of ``SeedSequence(seed)``."""
    children = np.random.SeedSequence(seed).spawn(n_draws)
    out = np.empty((n_draws, T), dtype=np.int8)
    for i, ss in enumerate(children):
        out[i] = np.random.default_rng(ss).integers(N_CLASSES, size=T)
    return out


def baseline_scores(true, returns, draws):
    """Vectorized mean accuracy and APC for every row of ``draws``."""
    true = np.asarray(true, dtype=np.int64)
    w = np.asarray(returns, dtype=np.float64)
    accs = np.zeros((len(draws), N_CLASSES))
    for c in range(N_CLASSES):
        support = int(np.count_nonzero(true == c))
        if support:
            hits = np.count_nonzero((draws == c) & (true == c)[None, :], axis=1)
            accs[:, c] = hits / support
    mean_acc = (accs[:, 0] + accs[:, 1] + accs[:, 2]) / 3
    apcs = np.sum(w[:-1]) + _SIGN[draws[:, :-1].astype(np.int64)] @ w[1:]
    return mean_acc, apcs


def baseline_bands(true, returns, n_draws=10_000, seed=0) -> BaselineBands:
    true = np.asarray(true)
    if len(true) != len(returns):
        raise DomainError("true labels and returns are not aligned")
    draws = random_draws(n_draws, len(true), seed)
    mean_acc, apcs = baseline_scores(true, returns, draws)
    return BaselineBands(n_draws, seed, _band(mean_acc), _band(apcs))

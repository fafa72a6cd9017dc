"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are
also collected in the "acceptance criteria" section of the terminal
summary.
"""
import itertools
import json
import math
import time
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from regimecast import classify as cl
from regimecast import cli, pipeline
from regimecast import evaluate as ev
from regimecast import features as ft
from regimecast import gmm
from regimecast import labeling as lb
from regimecast.synthetic import BUNDLED

from conftest import ACCEPTANCE_LINES, knn_oracle


class Criterion:
    """Collects named checks and a runtime budget, then prints one line."""

    def __init__(self, number, title, budget=None):
        self.number, self.title, self.budget = number, title, budget
        self.checks = []

    def check(self, name, ok, detail=""):
        self.checks.append((name, bool(ok), detail))

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if self.budget is not None:
            self.check("runtime", elapsed < self.budget,
                       f"{elapsed:.1f}s of {self.budget:g}s")
        if exc_type is not None:
            self.check("raised", False, f"{exc_type.__name__}: {exc}")
        ok = all(c[1] for c in self.checks)
        failed = [f"{n} [{d}]" if d else n for n, passed, d in self.checks if not passed]
        notes = "; ".join(f"{n}: {d}" for n, _, d in self.checks if d)
        line = (f"criterion {self.number} {'PASS' if ok else 'FAIL'} {self.title} "
                f"({elapsed:.2f}s)" + (f" | {notes}" if notes else "")
                + (f" | failed: {', '.join(failed)}" if failed else ""))
        ACCEPTANCE_LINES.append(line)
        print("\n" + line)
        return False

    def verify(self):
        failed = [(n, d) for n, ok, d in self.checks if not ok]
        assert not failed, failed


# --------------------------------------------------------------------------
# 1. labeling coverage
# --------------------------------------------------------------------------

SYMMETRIC = {
    "normal": lambda rng, n: rng.normal(0, 1e-3, n),
    "laplace": lambda rng, n: rng.laplace(0, 1e-3, n),
    "student_t3": lambda rng, n: rng.standard_t(3, n) * 1e-3,
    "uniform": lambda rng, n: rng.uniform(-1e-3, 1e-3, n),
}


def test_criterion_1_labeling_coverage():
    with Criterion(1, "labeling coverage", budget=5) as c:
        for name, draw in SYMMETRIC.items():
            r = draw(np.random.default_rng(1), 100_000)
            codes = lb.label_codes(r, lb.compute_thresholds(r, 0.04))
            sell, buy = np.mean(codes == lb.SELL), np.mean(codes == lb.BUY)
            c.check(name, abs(sell - 0.04) <= 0.01 and abs(buy - 0.04) <= 0.01,
                    f"sell={sell:.4f} buy={buy:.4f}")
    c.verify()


# --------------------------------------------------------------------------
# 2. feature exactness
# --------------------------------------------------------------------------

def test_criterion_2_feature_exactness():
    with Criterion(2, "feature exactness", budget=1) as c:
        y = np.full(59, 1.0)
        y[9:12] = [9, 10, 9]       # curvature -2, height 10
        y[29:32] = [18, 20, 18]    # curvature -4, height 20
        peaks = ft.detect_peaks(y)
        intercept, slope = ft.fit_peak_line(peaks)
        c.check("two-peak line", abs(slope + 5) <= 1e-9 and abs(intercept) <= 1e-9,
                f"slope={slope!r} intercept={intercept!r}")

        # planted line h = a + b*c through four peaks of distinct curvature
        a, b = 3.0, -1.5
        z = np.zeros(59)
        for pos, curv in zip((5, 15, 25, 35), (-1.0, -2.0, -3.0, -5.0)):
            h = a + b * curv
            z[pos - 1:pos + 2] = [h + curv / 2, h, h + curv / 2]
        got = ft.fit_peak_line(ft.detect_peaks(z))
        c.check("planted line", abs(got[0] - a) <= 1e-9 and abs(got[1] - b) <= 1e-9,
                f"intercept={got[0]!r} slope={got[1]!r}")

        bump = ft.detect_peaks([0.0, 1.0, 0.0] + [0.0] * 56)
        c.check("unit bump curvature", bump.curvatures.tolist() == [-2.0])

        ramp = list(range(1, 60))
        first, last, divisor = ft.ESTPC_MODES[ft.DEFAULT_ESTPC_MODE]
        tail = sum(ramp[t - 1] for t in range(first, last + 1)) / divisor
        oracle = tail / (sum(ramp) / 59) - 1
        got = ft.estimated_pct_change(np.array(ramp, dtype=float))
        c.check("ramp est_pct_change", abs(got - oracle) <= 1e-12 * abs(oracle),
                f"{got!r} vs {oracle!r} ({ft.DEFAULT_ESTPC_MODE})")
    c.verify()


# --------------------------------------------------------------------------
# 3. GMM recovery
# --------------------------------------------------------------------------

def three_blobs(seed, n=3000, d=8, separation=10.0):
    """Unit-variance blobs at the corners of a simplex, ``separation`` apart."""
    rng = np.random.default_rng(seed)
    centers = np.zeros((3, d))
    for k in range(3):
        centers[k, k] = separation / math.sqrt(2)
    labels = rng.integers(0, 3, n)
    return centers[labels] + rng.standard_normal((n, d)), labels, centers


def test_criterion_3_gmm_recovery():
    with Criterion(3, "GMM recovery", budget=60) as c:
        picked, mean_err, truth_err, worst_drop, runs = [], [], [], 0.0, 0
        for seed in range(20):
            X, labels, centers = three_blobs(seed)
            fit = gmm.select_k(X, range(1, 11), seed=seed)
            picked.append(fit.K)
            for cand in fit.candidates.values():
                for h in cand.restart_histories:
                    runs += 1
                    if len(h) > 1:
                        worst_drop = min(worst_drop, float(np.min(np.diff(h))))
            if fit.K != 3:
                continue
            # match components to generating blobs, then compare with the
            # blob sample means (the estimate EM should reach) and the truth
            sample = np.array([X[labels == k].mean(axis=0) for k in range(3)])
            perm = min(itertools.permutations(range(3)),
                       key=lambda p: np.sum((fit.means[list(p)] - sample) ** 2))
            means = fit.means[list(perm)]
            mean_err.append(float(np.max(np.linalg.norm(means - sample, axis=1))))
            truth_err.append(float(np.max(np.linalg.norm(means - centers, axis=1))))
        hits = picked.count(3)
        c.check("K=3 picked", hits >= 18, f"{hits}/20")
        c.check("means within 0.1 sigma", bool(mean_err) and max(mean_err) < 0.1,
                f"max {max(mean_err, default=float('nan')):.2e} from blob means, "
                f"{max(truth_err, default=float('nan')):.3f} from true centres")
        c.check("logL non-decreasing", worst_drop >= -1e-8,
                f"{runs} runs, worst step {worst_drop:.1e}")
    c.verify()


# --------------------------------------------------------------------------
# 4. BIC formula
# --------------------------------------------------------------------------

def gaussian_logl(X, mean, cov):
    n, d = X.shape
    diff = X - mean
    _, logdet = np.linalg.slogdet(cov)
    maha = np.einsum("ij,ij->i", diff, np.linalg.solve(cov, diff.T).T)
    return float(np.sum(-0.5 * (d * math.log(2 * math.pi) + logdet + maha)))


def test_criterion_4_bic_formula():
    with Criterion(4, "BIC formula") as c:
        worst = 0.0
        for seed, (n, d) in enumerate([(50, 1), (200, 2), (500, 3), (1000, 5), (3000, 8)]):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(n, d)) @ rng.normal(size=(d, d)) + rng.normal(size=d) * 5
            fit = gmm.em_fit(X, 1, seed=seed)
            mean = X.mean(axis=0)
            cov = np.cov(X.T, bias=True).reshape(d, d) + gmm.EMConfig.ridge * np.eye(d)
            p = d + d * (d + 1) // 2
            expected = -2 * gaussian_logl(X, mean, cov) + p * math.log(n)
            dev = abs(gmm.bic(fit, n) - expected)
            worst = max(worst, dev)
            c.check(f"n={n} d={d}", dev <= 1e-6)
            c.check(f"closed form n={n} d={d}",
                    np.allclose(fit.means[0], mean, rtol=0, atol=1e-9)
                    and np.allclose(fit.covariances[0], cov, rtol=1e-9, atol=1e-12))
        c.check("max deviation", worst <= 1e-6, f"{worst:.1e}")
    c.verify()


# --------------------------------------------------------------------------
# 5. classifier oracles
# --------------------------------------------------------------------------

def test_criterion_5_classifier_oracles():
    with Criterion(5, "classifier oracles", budget=60) as c:
        rng = np.random.default_rng(5)
        mismatches = 0
        for i in range(50):
            n, d = int(rng.integers(1, 501)), int(rng.integers(1, 7))
            k = min(int(rng.integers(1, 16)), n)
            integer = i % 2 == 0     # integer grids force distance and vote ties
            draw = ((lambda s: rng.integers(-3, 4, s).astype(float)) if integer
                    else (lambda s: rng.normal(size=s)))
            X, y, Q = draw((n, d)), rng.integers(0, 3, n), draw((20, d))
            got = cl.knn_train(X, y, k=k).predict(Q).tolist()
            mismatches += got != [knn_oracle(X, y, q, k) for q in Q]
        c.check("KNN = brute force", mismatches == 0, f"{50 - mismatches}/50 datasets")

        x = np.random.default_rng(0).uniform(-1, 1, (500, 1))
        y = np.where(x[:, 0] > 0, lb.BUY, lb.SELL)
        acc = float(np.mean(cl.rf_train(x, y, n_trees=300, seed=0).predict(x) == y))
        c.check("RF 1-D threshold", acc >= 0.99, f"train accuracy {acc:.3f}")

        X = np.random.default_rng(3).normal(size=(300, 6))
        y = np.random.default_rng(4).integers(0, 3, 300)
        docs = {(run, jobs): json.dumps(cl.rf_train(X, y, n_trees=60, seed=11,
                                                    n_jobs=jobs).to_dict())
                for run in (0, 1) for jobs in (1, 2, 4)}
        c.check("RF bit-identical", len(set(docs.values())) == 1,
                "2 runs x n_jobs 1/2/4")
        knn_docs = {json.dumps(cl.knn_train(X, y, k=5).to_dict()) for _ in range(2)}
        c.check("KNN bit-identical", len(knn_docs) == 1)
    c.verify()


# --------------------------------------------------------------------------
# 6. metrics algebra
# --------------------------------------------------------------------------

codes = st.sampled_from([lb.BUY, lb.SELL, lb.HOLD])
steps = st.tuples(codes, codes, st.floats(-0.5, 0.5, allow_nan=False))
APC_FAILURES = []


@settings(max_examples=1000, deadline=None, database=None,
          suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(steps, min_size=2, max_size=200))
def _fuzz_metrics(triples):
    true = [t for t, _, _ in triples]
    pred = [p for _, p, _ in triples]
    w = [r for _, _, r in triples]
    T = len(w)
    identity = (sum(w[t] for t in range(T - 1))
                + sum(w[t + 1] for t in range(T - 1) if pred[t] == lb.BUY)
                - sum(w[t + 1] for t in range(T - 1) if pred[t] == lb.SELL))
    got = ev.apc(w, pred)
    tally = {}
    for a, b in zip(true, pred):
        tally[a, b] = tally.get((a, b), 0) + 1
    counts = ev.confusion(true, pred)
    m = ev.per_class_and_mean_accuracy(counts)
    accs = []
    for cls in (lb.BUY, lb.SELL, lb.HOLD):
        support = sum(v for (a, _), v in tally.items() if a == cls)
        accs.append(tally.get((cls, cls), 0) / support if support else 0.0)
    ok = (abs(got - identity) <= 1e-12
          and all(counts.matrix[a, b] == tally.get((a, b), 0)
                  for a in range(3) for b in range(3))
          and [m.acc_b, m.acc_s, m.acc_h] == accs)
    if not ok:
        APC_FAILURES.append((triples, got, identity))
    assert ok


def test_criterion_6_metrics_algebra():
    with Criterion(6, "metrics algebra") as c:
        APC_FAILURES.clear()
        with warnings.catch_warnings():
            # fuzzed label sets often miss a class entirely
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                _fuzz_metrics()
                fuzz_ok = True
            except AssertionError:
                fuzz_ok = False
        c.check("1000 fuzzed triples", fuzz_ok and not APC_FAILURES,
                f"{len(APC_FAILURES)} failing example(s)")
        true = lb.encode(["Buy"] * 4 + ["Sell"] * 3 + ["Hold"] * 3)
        pred = lb.encode(["Buy", "Buy", "Sell", "Hold", "Sell", "Buy", "Sell",
                          "Hold", "Hold", "Buy"])
        m = ev.per_class_and_mean_accuracy(ev.confusion(true, pred))
        # by hand: Buy 2 of 4, Sell 2 of 3, Hold 2 of 3
        c.check("hand tally", (m.acc_b, m.acc_s, m.acc_h) == (2 / 4, 2 / 3, 2 / 3)
                and m.mean_acc == (2 / 4 + 2 / 3 + 2 / 3) / 3)
    c.verify()


# --------------------------------------------------------------------------
# 7. baseline bands
# --------------------------------------------------------------------------

def test_criterion_7_baseline_bands():
    with Criterion(7, "baseline bands", budget=120) as c:
        true = np.repeat([lb.BUY, lb.SELL, lb.HOLD], [667, 667, 666])
        np.random.default_rng(7).shuffle(true)
        returns = np.random.default_rng(8).normal(0, 1e-3, 2000)
        bands = ev.baseline_bands(true, returns, n_draws=10_000, seed=0)
        c.check("random mean_acc = 1/3", abs(bands.mean_acc.mean - 1 / 3) <= 0.01,
                f"mean {bands.mean_acc.mean:.4f}")
        identity = ev.score(true, true, returns).mean_acc
        c.check("identity above p97.5", identity == 1.0 and identity > bands.mean_acc.p97_5,
                f"p97.5 {bands.mean_acc.p97_5:.4f}")
    c.verify()


# --------------------------------------------------------------------------
# 8 and 9. end-to-end pipeline
# --------------------------------------------------------------------------

def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    """Default config on every bundled market: two single-command runs and
    one stage-by-stage run, all through the CLI."""
    base = tmp_path_factory.mktemp("e2e")
    cfg_path = base / "experiment.toml"
    cfg_path.write_text("".join(f'[[markets]]\nid = "{m}"\nbundled = "{m}"\n\n'
                                for m in sorted(BUNDLED)))
    t0 = time.perf_counter()
    codes = [cli.main(["run", "--config", str(cfg_path), "--out", str(base / name)])
             for name in ("run1", "run2")]
    for stage in pipeline.STAGES:
        codes.append(cli.main([stage, "--config", str(cfg_path),
                               "--out", str(base / "stagewise")]))
    elapsed = time.perf_counter() - t0
    return {"cfg": pipeline.load_config(cfg_path), "base": base, "codes": codes,
            "elapsed": elapsed}


def test_criterion_8_end_to_end_determinism(full_runs):
    with Criterion(8, "end-to-end determinism") as c:
        base = full_runs["base"]
        per_run = full_runs["elapsed"] / 3
        c.check("exit codes", full_runs["codes"] == [0] * (2 + len(pipeline.STAGES)))
        c.check("runtime", per_run < 600, f"{per_run:.1f}s per full run of 600s")
        run1, run2, staged = (tree_bytes(base / n) for n in ("run1", "run2", "stagewise"))
        c.check("run1 = run2", run1 == run2, f"{len(run1)} files")
        c.check("run = stagewise", run1 == staged)
    c.verify()


def test_criterion_9_report_grid(full_runs):
    with Criterion(9, "report grid") as c:
        cfg, out = full_runs["cfg"], full_runs["base"] / "run1"
        found = set()
        for p in sorted((out / "evaluate").glob("*.json")):
            a = json.loads(p.read_text())["axes"]
            found.add((a["market"], a["family"], a["scaling"], a["cluster"],
                       a["test_fraction"], a["algorithm"]))
        expected = set()
        for m in sorted(BUNDLED):
            for fam in ("proposed", "common"):
                doc = json.loads((out / "cluster" / f"{m}.{fam}.json").read_text())
                K = doc["scopes"][0]["model"]["K"]
                subsets = ["all"] + [f"c{k}" for k in range(K)]
                expected |= set(itertools.product(
                    [m], [fam], ["original", "standardised"], subsets, [0.2, 0.3, 0.4],
                    ["knn", "random_forest", "random_policy"]))
        c.check("grid", found == expected,
                f"{len(found)} reports, {len(expected)} cells; "
                f"missing {len(expected - found)}, extra {len(found - expected)}")
        for name in pipeline.FIGURES:
            c.check(f"figure table {name}", (out / "report" / name).exists())
    c.verify()

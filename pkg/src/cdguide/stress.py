"""Stress scenarios for portfolios: conditional generation of return windows.

Daily log-returns are winsorized, de-seasonalized by weekday and standardized;
rolling N-day windows (flattened to N*d vectors) train a diffusion model, and
guidance towards "the last k days of some tickers sum below tau" produces
stressed windows.  Portfolios fitted on the first N-k days are scored on the
cumulative return of the last m days and compared with the real windows that
meet the same condition.
"""

import csv
import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np

from .sets import Box, FunctionalSet, LinearSet


class IngestError(ValueError):
    pass


class PortfolioError(ValueError):
    pass


@dataclass
class Preprocessing:
    winsor: float
    lower: np.ndarray  # per-ticker caps
    upper: np.ndarray
    weekday_means: np.ndarray  # (7, d); rows for absent weekdays are zero
    std: np.ndarray
    present: np.ndarray = field(default_factory=lambda: np.arange(5))  # weekdays seen

    def standardize(self, x, weekdays):
        return (np.asarray(x, dtype=float) - self.weekday_means[weekdays]) / self.std

    def destandardize(self, z, weekdays=None):
        """Invert the standardization.  Without weekdays the average weekday
        effect over the observed weekdays is added back."""
        z = np.asarray(z, dtype=float)
        if weekdays is None:
            shift = self.mean_effect
        else:
            shift = self.weekday_means[np.asarray(weekdays)]
        return z * self.std + shift

    @property
    def mean_effect(self):
        return self.weekday_means[self.present].mean(axis=0)

    def to_dict(self):
        return {
            "winsor": self.winsor,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "weekday_means": self.weekday_means.tolist(),
            "std": self.std.tolist(),
            "weekdays_present": self.present.tolist(),
        }


@dataclass
class ReturnsPanel:
    dates: np.ndarray  # datetime64[D]
    tickers: list
    raw: np.ndarray  # (rows, d) as read
    values: np.ndarray  # standardized
    record: Preprocessing

    @property
    def weekdays(self):
        # 1970-01-01 was a Thursday
        return ((self.dates.astype("int64") + 3) % 7).astype(int)

    @property
    def n_rows(self):
        return len(self.dates)


def _read_csv(source):
    if hasattr(source, "read"):
        return list(csv.reader(source))
    with open(source, newline="") as fh:
        return list(csv.reader(fh))


def ingest(source, winsor=0.005, min_rows=2):
    """Read ``date,<ticker>...`` CSV (path or open file) and preprocess.

    Steps, in order: winsorize each column at the ``winsor`` / ``1 - winsor``
    quantiles, subtract per-weekday means, divide by the long-run std.
    """
    rows = _read_csv(source)
    if not rows:
        raise IngestError("empty CSV")
    header = [h.strip() for h in rows[0]]
    if header[0].lower() != "date":
        raise IngestError("first column must be 'date'")
    tickers = header[1:]
    if len(tickers) < 2:
        raise IngestError("need at least two tickers")
    dates, data, bad = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            d = np.datetime64(dt.date.fromisoformat(row[0].strip()), "D")
            vals = [float(c) for c in row[1:]]
            if len(vals) != len(tickers) or not np.all(np.isfinite(vals)):
                raise ValueError
        except (ValueError, IndexError):
            bad.append(lineno)
            continue
        dates.append(d)
        data.append(vals)
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise IngestError(f"missing or non-numeric values on CSV lines {shown}")
    if len(data) < min_rows:
        raise IngestError(f"only {len(data)} rows, need at least {min_rows}")
    dates = np.array(dates)
    if np.any(np.diff(dates.astype("int64")) <= 0):
        raise IngestError("dates must be strictly increasing")
    raw = np.array(data)
    return preprocess(dates, tickers, raw, winsor)


def preprocess(dates, tickers, raw, winsor=0.005):
    lower = np.quantile(raw, winsor, axis=0)
    upper = np.quantile(raw, 1 - winsor, axis=0)
    x = np.clip(raw, lower, upper)
    wd = ((dates.astype("int64") + 3) % 7).astype(int)
    means = np.zeros((7, raw.shape[1]))
    present = np.unique(wd)
    for k in present:
        means[k] = x[wd == k].mean(axis=0)
    x = x - means[wd]
    std = x.std(axis=0)
    zero = [t for t, s in zip(tickers, std) if not s > 1e-12 * max(1.0, np.abs(raw).max())]
    if zero:
        raise IngestError(f"zero long-run std for {', '.join(zero)}")
    rec = Preprocessing(winsor, lower, upper, means, std, present)
    return ReturnsPanel(dates, list(tickers), raw, x / std, rec)


def synthetic_returns(n_days=3000, tickers=("AAA", "BBB", "CCC", "DDD"), seed=0, start="2010-06-30"):
    """Correlated fat-tailed daily log-returns on business days, with weekday effects.

    Returns ``(dates, tickers, returns)``.
    """
    rng = np.random.default_rng(seed)
    d = len(tickers)
    vols = np.linspace(0.012, 0.035, d)
    corr = np.full((d, d), 0.35) + 0.65 * np.eye(d)
    L = np.linalg.cholesky(corr)
    nu = 4.0
    # Student-t shocks scaled to unit variance
    z = rng.standard_normal((n_days, d)) @ L.T
    chi = rng.chisquare(nu, (n_days, 1)) / nu
    shocks = z / np.sqrt(chi) * np.sqrt((nu - 2) / nu)
    bdays = np.busday_offset(np.datetime64(start, "D"), np.arange(n_days), roll="forward")
    wd = ((bdays.astype("int64") + 3) % 7).astype(int)
    effect = np.array([-4e-4, 1e-4, 2e-4, 0.0, 3e-4, 0.0, 0.0])[wd][:, None]
    drift = 2e-4
    return bdays, list(tickers), drift + effect * (vols / vols.mean()) + shocks * vols


def write_returns_csv(path, dates, tickers, returns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *tickers])
        for d, row in zip(dates, returns):
            w.writerow([str(d), *(f"{v:.10g}" for v in row)])


@dataclass
class WindowSet:
    windows: np.ndarray  # (W, N, d) standardized returns
    N: int
    k: int
    m: int
    tau: float
    weekdays: np.ndarray | None = None  # (W, N)
    mask: np.ndarray | None = None
    start_dates: np.ndarray | None = None

    def __len__(self):
        return len(self.windows)

    def flat(self):
        return self.windows.reshape(len(self.windows), -1)

    def subset(self, sel):
        return WindowSet(
            self.windows[sel], self.N, self.k, self.m, self.tau,
            None if self.weekdays is None else self.weekdays[sel],
            None if self.mask is None else self.mask[sel],
            None if self.start_dates is None else self.start_dates[sel],
        )


def tau_standardized(panel, tau, cond_idx):
    """Threshold per conditioned ticker in standardized units (``tau / std``)."""
    return np.array([tau / panel.record.std[i] for i in cond_idx])


def window(panel, N=64, k=10, m=5, tau=-0.10, cond_tickers=None):
    """All stride-1 windows and the mask of windows meeting the stress condition."""
    if not m <= k < N:
        raise ValueError("need m <= k < N")
    rows, d = panel.values.shape
    if N > rows:
        raise ValueError(f"window length {N} exceeds panel length {rows}")
    cond_tickers = cond_tickers or [panel.tickers[-1]]
    idx = [panel.tickers.index(c) for c in cond_tickers]
    W = rows - N + 1
    view = np.lib.stride_tricks.sliding_window_view(panel.values, N, axis=0)  # (W, d, N)
    windows = np.ascontiguousarray(np.swapaxes(view, 1, 2))
    wd = np.lib.stride_tricks.sliding_window_view(panel.weekdays, N)
    thr = tau_standardized(panel, tau, idx)
    sums = windows[:, N - k :, idx].sum(axis=1)
    mask = np.all(sums < thr, axis=1)
    ws = WindowSet(windows, N, k, m, float(tau), wd.copy(), mask, panel.dates[:W].copy())
    ws.cond_idx = idx
    return ws


def condition_set(panel, N, k, tau, cond_tickers):
    """Guidance set on flattened windows: last-k sums of each conditioned ticker below tau."""
    d = len(panel.tickers)
    idx = [panel.tickers.index(c) for c in cond_tickers]
    thr = tau_standardized(panel, tau, idx)
    Wmat = np.zeros((len(idx), N * d))
    for r, i in enumerate(idx):
        Wmat[r, np.arange(N - k, N) * d + i] = 1.0
    if len(idx) == 1:
        return LinearSet(Wmat[0], -np.inf, thr[0])
    return FunctionalSet(lambda y: y @ Wmat.T, Box(np.full(len(idx), -np.inf), thr), N * d, "last-k sums")


def _cov(returns):
    r = np.asarray(returns, dtype=float)
    return np.atleast_2d(np.cov(r, rowvar=False))


def _ridge(cov):
    d = len(cov)
    lam = 1e-6 * np.trace(cov) / d
    out = cov + lam * np.eye(d)
    try:
        np.linalg.cholesky(out)
    except np.linalg.LinAlgError:
        raise PortfolioError("covariance not positive definite after ridge") from None
    return out


def risk_parity(cov, tol=1e-10, max_sweeps=10_000):
    """Long-only equal-risk-contribution weights by cyclic coordinate descent on
    ``x' S x / 2 - sum(log x) / d``."""
    cov = np.asarray(cov, dtype=float)
    d = len(cov)
    diag = np.diag(cov)
    if np.any(diag <= 0):
        raise PortfolioError("non-positive variance")
    b = 1.0 / d
    x = 1.0 / np.sqrt(diag)
    for _ in range(max_sweeps):
        for i in range(d):
            c = cov[i] @ x - diag[i] * x[i]
            x[i] = (-c + np.sqrt(c * c + 4 * diag[i] * b)) / (2 * diag[i])
        w = x / x.sum()
        rc = w * (cov @ w)
        if np.max(np.abs(rc - rc.mean())) <= tol * rc.mean():
            return w
    raise PortfolioError("risk parity did not converge")


RULES = ("equal", "min_variance", "risk_parity")


def portfolio(rule, returns=None, cov=None):
    """Weights summing to one from the estimation rows (or a given covariance)."""
    if cov is None:
        cov = _cov(returns)
    cov = np.asarray(cov, dtype=float)
    d = len(cov)
    if rule == "equal":
        return np.full(d, 1.0 / d)
    if rule == "min_variance":
        c = _ridge(cov)
        x = np.linalg.solve(c, np.ones(d))
        return x / x.sum()
    if rule == "risk_parity":
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            cov = _ridge(cov)
        return risk_parity(cov)
    raise ValueError(f"unknown portfolio rule {rule!r}")


def evaluate(weights, window_z, m, record, weekdays=None):
    """Cumulative log-return of the last ``m`` days of a standardized window.

    Daily portfolio log-return is ``log sum_i w_i exp(r_i)`` with ``r`` the
    de-standardized log-returns.
    """
    r = record.destandardize(np.asarray(window_z)[-m:], None if weekdays is None else np.asarray(weekdays)[-m:])
    daily = np.log(np.exp(r) @ np.asarray(weights))
    return float(daily.sum())


def evaluate_set(ws, rule, record):
    """Apply ``rule`` on the first N-k rows of each window, score the last m."""
    est = ws.N - ws.k
    out = np.empty(len(ws))
    for j, win in enumerate(ws.windows):
        raw_est = record.destandardize(win[:est], None if ws.weekdays is None else ws.weekdays[j][:est])
        w = portfolio(rule, raw_est)
        out[j] = evaluate(w, win, ws.m, record, None if ws.weekdays is None else ws.weekdays[j])
    return out


def nearest_rank(x, p):
    """Type-1 quantile: the ceil(p n)-th smallest value."""
    x = np.sort(np.asarray(x, dtype=float))
    if len(x) == 0:
        raise ValueError("quantile of an empty sample")
    r = max(int(np.ceil(p * len(x))), 1)
    return float(x[r - 1])


def summarize(values):
    v = np.asarray(values, dtype=float)
    return {
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
        "q05": nearest_rank(v, 0.05),
        "q10": nearest_rank(v, 0.10),
    }


REPORT_COLUMNS = ("rule", "source", "eta", "mean", "std", "q05", "q10", "n")


def stress_report(generated, real, record, rules=RULES):
    """Summary rows per rule and source.

    ``generated`` maps ``(source, eta)`` to a WindowSet (a bare WindowSet is
    taken as source "generated"); ``real`` holds the real windows meeting the
    condition.
    """
    if len(real) == 0:
        hits = 0 if real.mask is None else int(real.mask.sum())
        raise ValueError(f"no real windows meet the condition ({hits} condition hits)")
    if isinstance(generated, WindowSet):
        generated = {("generated", None): generated}
    rows = []
    for rule in rules:
        sources = [(("real", None), real), *generated.items()]
        for (source, eta), ws in sources:
            if len(ws) == 0:
                raise ValueError(f"empty window set for source {source}")
            rows.append({"rule": rule, "source": source, "eta": eta, **summarize(evaluate_set(ws, rule, record)), "n": len(ws)})
    return rows


def write_report(rows, csv_path=None, json_path=None, meta=None):
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([
                    r["rule"], r["source"], "" if r["eta"] is None else repr(float(r["eta"])),
                    *(repr(float(r[c])) for c in ("mean", "std", "q05", "q10")), r["n"],
                ])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"rows": rows, **(meta or {})}, fh, indent=2, sort_keys=True)

import io

import numpy as np
import pytest

from cdguide import stress as st
from cdguide.sets import LinearSet


def csv_text(dates, tickers, values):
    buf = io.StringIO()
    buf.write("date," + ",".join(tickers) + "\n")
    for d, row in zip(dates, values):
        buf.write(str(d) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    buf.seek(0)
    return buf


@pytest.fixture(scope="module")
def panel():
    dates, tickers, raw = st.synthetic_returns(3000, seed=0)
    return st.ingest(csv_text(dates, tickers, raw))


def identity_record(d):
    return st.Preprocessing(0.0, np.full(d, -np.inf), np.full(d, np.inf), np.zeros((7, d)), np.ones(d))


def test_standardization(panel):
    assert np.allclose(panel.values.std(axis=0), 1.0, atol=1e-12)
    wd = panel.weekdays
    for k in np.unique(wd):
        assert np.all(np.abs(panel.values[wd == k].mean(axis=0)) <= 1e-12)


def test_winsor_caps(panel):
    rec = panel.record
    np.testing.assert_allclose(rec.upper, np.quantile(panel.raw, 0.995, axis=0))
    clipped = np.clip(panel.raw, rec.lower, rec.upper)
    np.testing.assert_array_equal(clipped.max(axis=0), rec.upper)
    back = rec.destandardize(panel.values, panel.weekdays)
    np.testing.assert_allclose(back, clipped, atol=1e-14)


def test_constant_column_rejected():
    dates = np.arange(np.datetime64("2020-01-06"), np.datetime64("2020-01-06") + 30)
    vals = np.column_stack([np.random.default_rng(0).normal(size=30), np.full(30, 0.01)])
    with pytest.raises(st.IngestError, match="BBB"):
        st.ingest(csv_text(dates, ["AAA", "BBB"], vals))


def test_bad_rows_are_listed():
    text = "date,AAA,BBB\n2020-01-01,0.1,0.2\n2020-01-02,x,0.1\n2020-01-03,0.1\n2020-01-06,0.3,0.1\n"
    with pytest.raises(st.IngestError, match="3, 4"):
        st.ingest(io.StringIO(text))


def test_dates_must_increase():
    text = "date,AAA,BBB\n2020-01-02,0.1,0.2\n2020-01-01,0.2,0.1\n2020-01-03,0.1,0.3\n"
    with pytest.raises(st.IngestError, match="increasing"):
        st.ingest(io.StringIO(text))


def test_single_ticker_rejected():
    with pytest.raises(st.IngestError, match="two tickers"):
        st.ingest(io.StringIO("date,AAA\n2020-01-01,0.1\n2020-01-02,0.2\n"))


def test_window_count_and_infinite_tau(panel):
    ws = st.window(panel, N=64, k=10, m=5, tau=np.inf, cond_tickers=["DDD"])
    assert len(ws) == panel.n_rows - 64 + 1
    assert ws.windows.shape == (panel.n_rows - 63, 64, 4)
    assert ws.mask.all()
    np.testing.assert_array_equal(ws.windows[5], panel.values[5:69])


def test_engineered_crash_window():
    rng = np.random.default_rng(1)
    n, N, k = 70, 64, 10
    dates = np.busday_offset(np.datetime64("2021-01-04"), np.arange(n))
    vals = 1e-4 * rng.standard_normal((n, 2))
    crash = 66
    vals[crash, 1] = -0.5
    vals[crash + 1, 1] = 0.5  # rebound cancels the crash in every later window
    p = st.ingest(csv_text(dates, ["AAA", "BBB"], vals), winsor=0.0)
    ws = st.window(p, N=N, k=k, m=5, tau=-0.10, cond_tickers=["BBB"])
    expected = np.zeros(n - N + 1, bool)
    expected[crash - N + 1] = True
    np.testing.assert_array_equal(ws.mask, expected)
    S = st.condition_set(p, N, k, -0.10, ["BBB"])
    assert isinstance(S, LinearSet)
    np.testing.assert_array_equal(S.contains(ws.flat()), expected)


def test_equal_weights():
    np.testing.assert_array_equal(st.portfolio("equal", cov=np.eye(4)), [0.25] * 4)


def test_min_variance_identity():
    np.testing.assert_allclose(st.portfolio("min_variance", cov=np.eye(4)), [0.25] * 4, rtol=1e-12)


def test_risk_parity_diagonal():
    sig = np.array([0.1, 0.2, 0.4, 0.05])
    w = st.portfolio("risk_parity", cov=np.diag(sig**2))
    expected = (1 / sig) / np.sum(1 / sig)
    np.testing.assert_allclose(w, expected, rtol=1e-9)


def test_risk_parity_equalizes_contributions():
    A = np.random.default_rng(2).normal(size=(5, 5))
    cov = A @ A.T + 0.5 * np.eye(5)
    w = st.risk_parity(cov)
    rc = w * (cov @ w)
    assert np.all(w > 0) and w.sum() == pytest.approx(1.0)
    assert np.ptp(rc) <= 1e-9 * rc.mean()


def test_min_variance_is_optimal():
    A = np.random.default_rng(3).normal(size=(4, 4))
    cov = A @ A.T + np.eye(4)
    w = st.portfolio("min_variance", cov=cov)
    rng = np.random.default_rng(4)
    for _ in range(50):
        d = rng.normal(size=4)
        d -= d.mean()
        v = w + 0.01 * d
        assert v @ cov @ v >= w @ cov @ w - 1e-12


def test_evaluate_zero_returns():
    assert st.evaluate([0.5, 0.5], np.zeros((10, 2)), 5, identity_record(2)) == 0.0


def test_evaluate_single_asset():
    rec = identity_record(1)
    assert st.evaluate([1.0], np.full((8, 1), 0.01), 5, rec) == pytest.approx(0.05, rel=1e-14)


def test_evaluate_fixture():
    rec = identity_record(2)
    z = np.array([[0.0, 0.0], [0.01, -0.02], [0.03, 0.01]])
    # log(0.5 e^0.01 + 0.5 e^-0.02) + log(0.5 e^0.03 + 0.5 e^0.01)
    expected = -0.004887504218496916 + 0.020049999166688984
    assert st.evaluate([0.5, 0.5], z, 2, rec) == pytest.approx(expected, rel=1e-12)


def test_evaluate_destandardizes():
    rec = st.Preprocessing(0.0, np.zeros(1), np.zeros(1), np.full((7, 1), 0.001), np.array([0.02]), np.arange(5))
    z = np.ones((3, 1))
    assert st.evaluate([1.0], z, 3, rec) == pytest.approx(3 * 0.021)


def test_nearest_rank():
    x = [10, 3, 7, 1, 9, 2, 8, 6, 4, 5]
    assert st.nearest_rank(x, 0.05) == 1
    assert st.nearest_rank(x, 0.10) == 1
    assert st.nearest_rank(x, 0.15) == 2
    assert st.nearest_rank(x, 0.5) == 5
    assert st.nearest_rank(x, 1.0) == 10


def test_report_shape_and_identity(panel):
    ws = st.window(panel, N=32, k=8, m=4, tau=-0.05, cond_tickers=["DDD"])
    real = ws.subset(ws.mask)
    assert len(real) > 0
    rows = st.stress_report({("copy", 1.0): real}, real, panel.record)
    assert len(rows) == 6
    by = {(r["rule"], r["source"]): r for r in rows}
    for rule in st.RULES:
        a, b = by[(rule, "real")], by[(rule, "copy")]
        for c in ("mean", "std", "q05", "q10"):
            assert a[c] == b[c]
    assert {k for k in rows[0]} == set(st.REPORT_COLUMNS)


def test_report_needs_real_hits(panel):
    ws = st.window(panel, N=32, k=8, m=4, tau=-50.0, cond_tickers=["DDD"])
    with pytest.raises(ValueError, match="no real windows"):
        st.stress_report(ws.subset(ws.mask), ws.subset(ws.mask), panel.record)


def test_report_files(tmp_path, panel):
    ws = st.window(panel, N=32, k=8, m=4, tau=-0.05, cond_tickers=["DDD"])
    real = ws.subset(ws.mask)
    rows = st.stress_report(real, real, panel.record)
    st.write_report(rows, tmp_path / "r.csv", tmp_path / "r.json", {"note": 1})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(st.REPORT_COLUMNS)
    assert len(lines) == 7

"""Attention memory benchmark tests: correctness of the measured subjects,
analytic counts, ladder bookkeeping, slope fitting."""

import numpy as np
import pytest

from oracles import token_attention_reference, xca_reference
from pyrflow.bench import (
    attention_elements,
    fit_loglog_slope,
    ladder_slopes,
    measure_peak_bytes,
    predicted_peak_bytes,
    run_ladder,
    token_attention_np,
    write_csv,
    xca_attention_np,
)


class TestMeasurementSubjects:
    def test_token_attention_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        k, q, v = rng.standard_normal((3, 20, 6))
        got = token_attention_np(k, q, v)
        assert np.abs(got - token_attention_reference(k, q, v)).max() < 1e-12

    def test_xca_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        k, q, v = rng.standard_normal((3, 25, 8))
        got = xca_attention_np(k, q, v, heads=4)
        want = xca_reference(k, q, v, np.ones(4), heads=4)
        assert np.abs(got - want).max() < 1e-12


class TestAnalyticCounts:
    def test_token_count_is_exactly_quadratic(self):
        for n in (10, 100, 1000):
            assert attention_elements(n, 256, 8, "token") == n * n

    def test_xca_count_is_constant_in_tokens(self):
        counts = {attention_elements(n, 256, 8, "xca") for n in (32**2, 91**2, 256**2, 10**6)}
        assert counts == {8192}

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            attention_elements(10, 256, 8, "windowed")


class TestEmpiricalMeasurement:
    def test_peak_excludes_preallocated_inputs(self):
        big = np.zeros(1_000_000)
        peak = measure_peak_bytes(lambda a: float(a[0]), big)
        assert peak < big.nbytes / 10

    def test_peak_sees_transient_allocations(self):
        n = 300_000
        peak = measure_peak_bytes(lambda: np.zeros(n).sum())
        assert peak >= n * 8

    def test_token_memory_grows_quadratically(self):
        # sides chosen so the N^2 map dominates the O(N d) work buffers
        sides = (16, 24, 32, 48, 64)
        rows = run_ladder(sides=sides, dim=8, heads=4, mechanisms=("token",))
        slope = ladder_slopes(rows)["token"]
        assert 1.75 <= slope <= 2.25

    def test_xca_memory_grows_at_most_linearly(self):
        sides = (8, 12, 16, 24, 32)
        rows = run_ladder(sides=sides, dim=16, heads=4, mechanisms=("xca",))
        slope = ladder_slopes(rows)["xca"]
        assert slope <= 1.2

    def test_measured_memory_monotone_in_tokens(self):
        rows = run_ladder(sides=(8, 16, 32), dim=16, heads=4)
        for kind in ("token", "xca"):
            vals = [r["measured_bytes"] for r in rows if r["kind"] == kind]
            assert all(a <= b for a, b in zip(vals, vals[1:]))


class TestBudgetTruncation:
    def test_over_budget_token_rungs_are_skipped_not_run(self):
        rows = run_ladder(sides=(8, 64), dim=64, heads=8, budget_bytes=1_000_000)
        token = {r["side"]: r for r in rows if r["kind"] == "token"}
        assert token[8]["measured_bytes"] is not None
        assert token[64]["measured_bytes"] is None  # 4096^2 floats predicted over budget
        xca = {r["side"]: r for r in rows if r["kind"] == "xca"}
        assert all(v["measured_bytes"] is not None for v in xca.values())

    def test_prediction_covers_actual_token_peak(self):
        rng = np.random.default_rng(2)
        n, d = 900, 32
        k, q, v = rng.standard_normal((3, n, d))
        actual = measure_peak_bytes(token_attention_np, k, q, v)
        assert actual <= predicted_peak_bytes(n, d, 1, "token", 8)


class TestSlopeFit:
    def test_exact_powers_recovered(self):
        ns = [100, 200, 400, 800]
        assert fit_loglog_slope(ns, [n**2 for n in ns]) == pytest.approx(2.0)
        assert fit_loglog_slope(ns, [5 * n for n in ns]) == pytest.approx(1.0)
        assert fit_loglog_slope(ns, [7] * 4) == pytest.approx(0.0)

    def test_needs_at_least_two_points(self):
        with pytest.raises(ValueError):
            fit_loglog_slope([10], [100])

    def test_ladder_slopes_requires_four_points(self):
        rows = run_ladder(sides=(8, 12, 16), dim=16, heads=4, mechanisms=("xca",))
        with pytest.raises(ValueError):
            ladder_slopes(rows)


class TestReportFiles:
    def test_csv_written_with_all_columns(self, tmp_path):
        rows = run_ladder(sides=(8, 12), dim=16, heads=4)
        path = str(tmp_path / "mem.csv")
        write_csv(rows, path)
        header = open(path).readline().strip().split(",")
        assert header == [
            "kind",
            "side",
            "n_tokens",
            "analytic_elements",
            "predicted_bytes",
            "measured_bytes",
        ]

    def test_plot_written(self, tmp_path):
        from pyrflow.bench import plot_ladder

        rows = run_ladder(sides=(8, 12, 16, 24), dim=16, heads=4)
        path = str(tmp_path / "mem.png")
        plot_ladder(rows, path)
        assert (tmp_path / "mem.png").stat().st_size > 1000

import csv

import numpy as np
import pytest

from mambasip import bench
from mambasip.bench import BenchReport, bench_scaling, fit_exponent, stepwise_memory, write_bench


def test_fit_exponent_recovers_power_laws():
    n = np.array([256, 512, 1024, 2048])
    assert fit_exponent(n, 3e-7 * n ** 2.0) == pytest.approx(2.0)
    assert fit_exponent(n, 5e-4 * n) == pytest.approx(1.0)


@pytest.mark.parametrize("lengths", [[64, 32, 512], [64, 64, 512], [64, 128, 256], [64]])
def test_lengths_validated(lengths):
    with pytest.raises(ValueError):
        bench_scaling("mamba", lengths, d=8, repetitions=1)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        bench_scaling("gru", [8, 16, 64], d=8, repetitions=1)


@pytest.mark.parametrize("kind", bench.KINDS)
def test_report_shape(kind, monkeypatch):
    monkeypatch.setattr(bench, "MIN_SAMPLE_SECONDS", 0.005)
    r = bench_scaling(kind, [8, 16, 32, 64], d=8, repetitions=2)
    assert r.lengths == [8, 16, 32, 64] and len(r.seconds) == len(r.spread) == len(r.peak_bytes) == 4
    assert all(s > 0 for s in r.seconds) and all(p > 0 for p in r.peak_bytes)
    assert np.isfinite(r.exponent)


def test_unresolvable_points_are_flagged_and_excluded(monkeypatch):
    monkeypatch.setattr(bench, "MIN_SAMPLE_SECONDS", 0.0)
    monkeypatch.setattr(bench, "MIN_RESOLVABLE", 1e30)
    r = bench_scaling("mamba", [8, 16, 64], d=8, repetitions=1, measure_memory=False)
    assert r.flagged == [8, 16, 64] and np.isnan(r.exponent)
    assert r.seconds[0] > 0  # kept in the report, only left out of the fit


def test_stepwise_state_is_constant():
    rows = stepwise_memory([16, 64, 256], d=16)
    assert len({r["state_bytes"] for r in rows}) == 1
    peaks = [r["peak_bytes"] for r in rows]
    assert max(peaks) < 1.5 * min(peaks)


def test_bench_csv(tmp_path):
    r = BenchReport("mamba", [8, 64], [1e-3, 8e-3], [0.1, 0.2], [100, 800], [8], 1.0)
    write_bench(tmp_path / "b.csv", [r])
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["kind", "length", "seconds", "spread", "peak_bytes", "flagged", "exponent"]
    assert rows[1][5] == "1" and rows[2][5] == "0"

"""Benchmark harness: slope fits and the quadratic/linear runtime contrast."""

import pytest

from cosh3d import bench


class TestSlopeFit:
    def test_exact_power_laws(self):
        ns = [256, 1024, 4096]
        assert bench.loglog_slope(ns, [n**2 for n in ns]) == pytest.approx(2.0, abs=1e-9)
        assert bench.loglog_slope(ns, [5.0 * n for n in ns]) == pytest.approx(1.0, abs=1e-9)

    def test_single_point_rejected(self):
        with pytest.raises(ValueError):
            bench.loglog_slope([256], [1.0])

    def test_slopes_by_kernel_groups_records(self):
        records = [
            bench.BenchRecord("softmax", n, 8, 1, 1.1, 5, median_ns=float(n) ** 2)
            for n in (64, 256)
        ]
        records.append(bench.BenchRecord("softmax", 1024, 8, 1, 1.1, 5, status="oom"))
        slopes = bench.slopes_by_kernel(records)
        assert slopes["softmax"] == pytest.approx(2.0, abs=1e-9)  # oom row excluded


class TestTiming:
    def test_reps_floor_enforced(self):
        with pytest.raises(ValueError):
            bench.time_kernel("softmax", 32, 8, reps=3)

    def test_unknown_kernel_rejected(self):
        with pytest.raises(ValueError):
            bench.time_kernel("flash", 32, 8)

    def test_record_statistics_sane(self):
        rec = bench.time_kernel("cosh_linear", 128, 16, reps=5)
        assert rec.status == "ok"
        assert rec.median_ns > 0
        assert rec.median_ns <= rec.mean_ns + 3 * rec.stddev_ns

    def test_unsorted_sweep_rejected(self):
        with pytest.raises(ValueError):
            bench.run_sweep(n_list=(1024, 256))


class TestScalingContrast:
    def test_quadrupling_ratio_separates_kernels(self):
        # doubling N twice: the linear kernel stays under an 8x ratio, the
        # softmax kernel goes above it
        ratios = {}
        for kernel in bench.KERNELS:
            recs = {
                n: bench.time_kernel(kernel, n, 64, reps=5, seed=1)
                for n in (2048, 8192)
            }
            ratios[kernel] = recs[8192].median_ns / recs[2048].median_ns
        assert ratios["cosh_linear"] < 8.0, ratios
        assert ratios["softmax"] > 8.0, ratios

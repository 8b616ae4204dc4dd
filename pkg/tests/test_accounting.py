"""Unit tests for parameter/size/FLOPs accounting."""

import csv
import io
import json

import pytest

from odn.accounting import (
    reduction_percent,
    render_csv,
    render_json_lines,
    render_table,
    stats_at_depth,
    verify_against_instantiated,
)
from odn.network import build_network


class TestFullDepthCounts:
    def test_resnet18_full(self):
        s = stats_at_depth("resnet18", 8)
        assert s.trainable_params == 11_173_962
        assert abs(s.params_millions - 11.17) < 0.005
        assert abs(s.size_mb - 44.78) < 44.78 * 0.005

    def test_resnet34_full(self):
        s = stats_at_depth("resnet34", 16)
        assert abs(s.params_millions - 21.28) < 0.005
        assert abs(s.size_mb - 85.29) < 85.29 * 0.005

    def test_resnet50_full(self):
        s = stats_at_depth("resnet50", 16)
        assert abs(s.params_millions - 23.52) < 0.005
        assert abs(s.size_mb - 94.43) < 94.43 * 0.005

    def test_resnet18_depth2(self):
        s = stats_at_depth("resnet18", 2)
        assert abs(s.params_millions - 0.15) < 0.15 * 0.05
        assert abs(s.size_mb - 0.61) < 0.61 * 0.05

    def test_reductions(self):
        full18 = stats_at_depth("resnet18", 8)
        assert abs(reduction_percent(full18, stats_at_depth("resnet18", 2)) - 98.64) < 0.3
        full34 = stats_at_depth("resnet34", 16)
        assert abs(reduction_percent(full34, stats_at_depth("resnet34", 5)) - 96.44) < 0.3


class TestInternalConsistency:
    def test_size_formula(self):
        s = stats_at_depth("resnet18", 3)
        assert s.size_bytes == 4 * (s.trainable_params + s.buffer_values)
        assert s.size_mb == s.size_bytes / 1e6

    def test_monotone_in_depth(self):
        for arch, dmax in (("resnet18", 8), ("resnet34", 16), ("resnet50", 16)):
            stats = [stats_at_depth(arch, d) for d in range(1, dmax + 1)]
            # params grow with depth; head churn can only shrink the linear layer,
            # which every appended block more than offsets
            params = [s.trainable_params for s in stats]
            flops = [s.flops for s in stats]
            assert params == sorted(params)
            assert flops == sorted(flops)

    def test_depth_delta_is_block_plus_head_swap(self):
        # params(d) - params(d-1) = new block + head_d - head_{d-1}
        s1, s2 = stats_at_depth("resnet18", 1), stats_at_depth("resnet18", 2)
        # blocks 1 and 2 are identical 64->64 basics; heads identical too
        block_params = 2 * (3 * 3 * 64 * 64) + 2 * (2 * 64)
        assert s2.trainable_params - s1.trainable_params == block_params

    def test_depth_validated(self):
        with pytest.raises(ValueError):
            stats_at_depth("resnet18", 0)
        with pytest.raises(ValueError):
            stats_at_depth("resnet18", 9)

    def test_num_classes_only_touches_head(self):
        a = stats_at_depth("resnet18", 8, num_classes=10)
        b = stats_at_depth("resnet18", 8, num_classes=100)
        assert b.trainable_params - a.trainable_params == 90 * 512 + 90


class TestVerificationAgainstInstantiated:
    @pytest.mark.parametrize("depth", range(1, 9))
    def test_resnet18_quarter_width(self, depth):
        net = build_network("resnet18", 1, 4, width_multiplier=0.25)
        report = verify_against_instantiated(net, depth, input_shape=(1, 16, 16))
        assert report.passed, report.mismatches
        assert report.analytic_params == report.enumerated_params
        assert report.analytic_buffers == report.enumerated_buffers

    @pytest.mark.parametrize("arch,depth", [("resnet34", 5), ("resnet50", 4), ("resnet50", 16)])
    def test_other_archs(self, arch, depth):
        net = build_network(arch, 3, 10, width_multiplier=0.5)
        assert verify_against_instantiated(net, depth).passed


class TestRendering:
    def setup_method(self):
        self.full = stats_at_depth("resnet18", 8)
        self.rows = [stats_at_depth("resnet18", d) for d in (2, 8)]

    def test_table_contains_headline_numbers(self):
        table = render_table(self.rows, self.full)
        assert "0.15 M" in table and "0.60 MB" in table
        assert "11.17 M" in table and "2/8" in table and "8/8" in table

    def test_csv_round_trips(self):
        rows = list(csv.DictReader(io.StringIO(render_csv(self.rows, self.full))))
        assert len(rows) == 2
        assert int(rows[1]["params"]) == 11_173_962
        assert float(rows[0]["size_reduction_percent"]) == pytest.approx(98.65, abs=0.01)

    def test_json_lines(self):
        lines = render_json_lines(self.rows, self.full).strip().splitlines()
        parsed = [json.loads(line) for line in lines]
        assert parsed[0]["depth"] == 2 and parsed[1]["depth"] == 8
        assert parsed[1]["size_reduction_percent"] == 0.0

    def test_reduction_arch_mismatch(self):
        with pytest.raises(ValueError):
            reduction_percent(self.full, stats_at_depth("resnet34", 2))

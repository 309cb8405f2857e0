from dataclasses import fields
from fractions import Fraction

import numpy as np
import pytest

from tsf.analysis import (AUX, CSV_HEADER, AblationError, AblationGrid, UnsupportedVariantError, ablation_csv,
                          complexity_json, complexity_report, complexity_text, correlation_grids,
                          export_correlation_maps, format_grid, parse_grid, run_ablation, run_cell)
from tsf.attention import KINDS
from tsf.config import RunConfig
from tsf.data import MetricsRecord, synth_generate
from tsf.model import ModelConfig, PatchProto

TINY = RunConfig(n_base=6, n_novel=5, images_per_class=10, image_size=16, widths=(4, 8), steps=2,
                 train_q_per_class=2, q_per_class=4, episodes=6)


@pytest.fixture(scope="module")
def tiny_bundle():
    return synth_generate(TINY.generator(), 0)


def _fake_cell(cfg, bundle, seed):
    # accuracy encodes the cell so bookkeeping can be checked without training
    acc = {"none": 0.3, "transformer": 0.2, "tsf": 0.5}[cfg.neck] + seed / 100
    return MetricsRecord(acc, 0.01, 10, f"{cfg.neck}-{seed}")


class TestGrid:
    @pytest.mark.parametrize("axis,values", [("neck_variant", ("none", "tsf")), ("heads", (1, 2)),
                                             ("lambda", (0.0, 0.5, 1.0, 1.5, 2.0)), ("n_filter", (1, 5, 64)),
                                             ("temperature", (1.0, 10.0)), ("aux", tuple(AUX))])
    def test_cells_differ_only_on_axis(self, axis, values):
        base = RunConfig(neck="transformer", heads=4, lam=0.25, n_filter=3, temperature=2.0)
        grid = AblationGrid(axis, values, base, (0,))
        for cell in grid.cells():
            changed = {f.name for f in fields(RunConfig) if getattr(cell, f.name) != getattr(base, f.name)}
            allowed = {"neck_variant": {"neck"}, "heads": {"heads"}, "lambda": {"lam"}, "n_filter": {"n_filter"},
                       "temperature": {"temperature"}, "aux": {"use_global", "use_rotation"}}[axis]
            assert changed <= allowed

    def test_unknown_axis(self):
        with pytest.raises(AblationError):
            AblationGrid("depth", (1,), RunConfig(), (0,))

    def test_bad_aux_value(self):
        with pytest.raises(AblationError):
            AblationGrid("aux", ("everything",), RunConfig(), (0,))


class TestRunAblation:
    def test_rows_and_hashes(self, tiny_bundle):
        grid = AblationGrid("neck_variant", ("none", "transformer", "tsf"), TINY, (0, 1, 2))
        rows = run_ablation(grid, tiny_bundle, cell_fn=_fake_cell)
        assert [r.value for r in rows] == ["none", "transformer", "tsf"]
        assert len({r.data_hash for r in rows}) == 1
        assert rows[2].mean_accuracy == pytest.approx(0.51, abs=1e-12)
        assert rows[2].seed_std == pytest.approx(0.01, abs=1e-12)

    def test_failure_is_recorded_and_grid_continues(self, tiny_bundle):
        def flaky(cfg, bundle, seed):
            if cfg.neck == "transformer" and seed == 1:
                raise FloatingPointError("boom")
            return _fake_cell(cfg, bundle, seed)

        grid = AblationGrid("neck_variant", ("none", "transformer", "tsf"), TINY, (0, 1))
        rows = run_ablation(grid, tiny_bundle, cell_fn=flaky)
        assert [r.ok for r in rows] == [True, False, True]
        assert "boom" in rows[1].error
        csv = ablation_csv(rows).splitlines()
        assert csv[0] == CSV_HEADER
        assert len(csv) == 4 and csv[2].endswith("failed: FloatingPointError: boom")

    def test_threads_do_not_change_results(self, tiny_bundle):
        grid = AblationGrid("neck_variant", ("none", "tsf"), TINY, (0, 1))
        one = run_ablation(grid, tiny_bundle, threads=1)
        four = run_ablation(grid, tiny_bundle, threads=4)
        assert ablation_csv(one) == ablation_csv(four)

    def test_cells_are_bitwise_reproducible(self, tiny_bundle):
        assert run_cell(TINY, tiny_bundle, 5) == run_cell(TINY, tiny_bundle, 5)


class TestComplexity:
    def test_worked_instance(self):
        report = complexity_report(8, 8, 64, 5, runs=0)
        assert report["ratio"] == "64/5" and report["ratio_value"] == 12.8
        assert [r["kind"] for r in report["rows"]] == list(KINDS)
        assert "timing" not in report

    def test_fixed_point(self):
        report = complexity_report(4, 4, 8, 16, runs=0)
        assert Fraction(report["ratio"]) == 1

    def test_doubling_channels(self):
        a = {r["kind"]: r["macs"] for r in complexity_report(8, 8, 32, 5, runs=0)["rows"]}
        b = {r["kind"]: r["macs"] for r in complexity_report(8, 8, 64, 5, runs=0)["rows"]}
        assert all(b[k] == 2 * a[k] for k in a)

    def test_timing_and_rendering(self):
        report = complexity_report(4, 4, 8, 2, heads=(1, 2), runs=3, warmup=1)
        assert len(report["timing"]["median_seconds"]) == 2 * len(KINDS)
        assert all(t["median"] >= 0 for t in report["timing"]["median_seconds"])
        text = complexity_text(report)
        assert "16/2" not in text and "= 8/1" in text
        assert '"timing"' not in complexity_json(report, include_timing=False)

    def test_tsf_params_at_640(self):
        rows = complexity_report(8, 8, 640, 5, runs=0)["rows"]
        assert {r["kind"]: r["params"] for r in rows}["tsf"] == 826_240


@pytest.fixture(scope="module")
def model():
    return PatchProto(ModelConfig(image_size=16, widths=(4, 8), use_global=False), seed=0)


class TestCorrelationMaps:
    def test_seven_grids_rows_sum_to_one(self, model):
        image = np.random.default_rng(0).normal(size=(1, 16, 16))
        grids = correlation_grids(model, image)
        assert list(grids) == ["f", "fprime", "theta0", "theta1", "theta2", "theta3", "theta4"]
        stacked = np.stack([grids[f"theta{i}"] for i in range(5)])
        np.testing.assert_allclose(stacked.sum(axis=0), 1.0, atol=1e-12)
        assert all(g.shape == (4, 4) for g in grids.values())

    def test_export_round_trip_is_exact(self, model, tmp_path):
        images = np.random.default_rng(1).normal(size=(2, 1, 16, 16))
        paths = export_correlation_maps(model, images, tmp_path)
        assert len(paths) == 14
        for k in range(2):
            for name, grid in correlation_grids(model, images[k]).items():
                parsed = parse_grid((tmp_path / f"img{k:04d}_{name}.csv").read_text())
                np.testing.assert_array_equal(parsed, grid)

    def test_deterministic(self, model, tmp_path):
        images = np.random.default_rng(2).normal(size=(1, 1, 16, 16))
        a = [open(p).read() for p in export_correlation_maps(model, images, tmp_path / "a")]
        b = [open(p).read() for p in export_correlation_maps(model, images, tmp_path / "b")]
        assert a == b

    def test_seventeen_digits(self):
        assert format_grid(np.array([[0.1, 1 / 3]])) == "0.10000000000000001,0.33333333333333331\n"

    @pytest.mark.parametrize("neck", ["none", "transformer", "tsf_proj"])
    def test_other_necks_unsupported(self, neck):
        model = PatchProto(ModelConfig(image_size=16, widths=(4, 8), neck=neck, use_global=False), seed=0)
        with pytest.raises(UnsupportedVariantError):
            correlation_grids(model, np.zeros((1, 16, 16)))

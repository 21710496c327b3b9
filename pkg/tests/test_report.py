"""CSV tables and SVG charts of harness results."""

import xml.etree.ElementTree as ET

import pytest

from harness import PowerLawFit, RunReport, ScalingResult, TimingRecord
from report import (ALPHA_FILE, RUNS_FILE, SELECTIONS_FILE, TIMINGS_FILE, emit_report, emit_scaling_report,
                    load_runs, read_table, rebuild_report, selection_table)

CANDIDATES = {1: ["t1-MLP1-r0", "t1-CNN1-r0", "t1-SF-r0"], 2: ["t2-MLP2-r0", "t2-LSTM2-r0", "t2-MASS-r0"]}


def darts_report(seed, v1, auc=0.7, t1="t1-CNN1-r0", t2="t2-MASS-r0"):
    return RunReport(run_id=f"darts{seed}{int(v1 * 100):03d}", seed=seed, method="darts", v1=v1,
                     model_t1=t1, model_t2=t2, mse_t1=0.01 * (seed + 1), auc_t2=auc, gp_fraction=0.9,
                     epochs_pre=10, epochs_search=2, epochs_post=4, wall_seconds=1.5, n_models=3, n_events=120,
                     alpha_trajectory=[{1: [0.0, 0.1, 0.0], 2: [0.0, 0.0, 0.2]},
                                       {1: [0.0, 0.3, -0.1], 2: [-0.1, 0.0, 0.4]}],
                     candidates=CANDIDATES)


def grid_report(seed, t1, t2, auc):
    return RunReport(run_id=f"grid{seed}{t1}{t2}", seed=seed, method="grid", v1=0.5, model_t1=t1, model_t2=t2,
                     mse_t1=0.02, auc_t2=auc, gp_fraction=0.8, epochs_pre=6, epochs_post=3)


def parse_svg(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")
    return root


class TestEmitReport:
    def test_no_runs(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], str(tmp_path))

    def test_single_run(self, tmp_path):
        written = emit_report([darts_report(0, 0.5)], str(tmp_path))
        lines = (tmp_path / RUNS_FILE).read_text().strip().splitlines()
        assert len(lines) == 2
        assert lines[0].split(",") == list(RunReport.CSV_COLUMNS)
        for name in ("metrics_vs_v1.svg", "alpha_trajectory.svg", "selections.svg"):
            parse_svg(written[name])

    def test_wall_times_go_to_timings(self, tmp_path):
        emit_report([darts_report(0, 0.5)], str(tmp_path))
        assert "wall_seconds" not in (tmp_path / RUNS_FILE).read_text()
        timings = read_table(tmp_path / TIMINGS_FILE)
        assert timings["wall_seconds"].tolist() == [1.5]

    def test_alpha_table(self, tmp_path):
        emit_report([darts_report(0, 0.5)], str(tmp_path))
        alpha = read_table(tmp_path / ALPHA_FILE)
        assert len(alpha) == 2 * 2 * 3
        sums = alpha.groupby(["epoch", "task"])["softmax"].sum()
        assert sums.values == pytest.approx(1.0)

    def test_merge_is_idempotent(self, tmp_path):
        reports = [darts_report(1, 0.9), darts_report(0, 0.5)]
        emit_report(reports, str(tmp_path))
        first = {name: (tmp_path / name).read_bytes() for name in (RUNS_FILE, ALPHA_FILE, "metrics_vs_v1.svg")}
        emit_report(reports[::-1], str(tmp_path))
        for name, content in first.items():
            assert (tmp_path / name).read_bytes() == content, name

    def test_rerun_replaces_rows(self, tmp_path):
        emit_report([darts_report(0, 0.5, auc=0.6)], str(tmp_path))
        emit_report([darts_report(0, 0.5, auc=0.8), darts_report(1, 0.5)], str(tmp_path))
        runs = load_runs(str(tmp_path))
        assert len(runs) == 2
        assert runs[0].auc_t2 == 0.8

    def test_floats_survive_round_trip(self, tmp_path):
        report = darts_report(0, 0.1, auc=0.7123456789012345)
        emit_report([report], str(tmp_path))
        assert load_runs(str(tmp_path))[0].to_row() == report.to_row()

    def test_failed_runs_are_kept(self, tmp_path):
        failed = RunReport(run_id="failedrun000", seed=3, method="spos", v1=0.5, status="failed:NonFiniteError")
        emit_report([darts_report(0, 0.5), failed], str(tmp_path))
        runs = {r.run_id: r for r in load_runs(str(tmp_path))}
        assert runs["failedrun000"].status == "failed:NonFiniteError"
        assert runs["failedrun000"].model_t1 == ""


class TestSelections:
    def test_ordered_by_grid_median(self, tmp_path):
        reports = [darts_report(0, 0.5, t2="t2-MASS-r0"), darts_report(1, 0.5, t2="t2-LSTM2-r0"),
                   darts_report(2, 0.5, t2="t2-LSTM2-r0"),
                   grid_report(0, "t1-CNN1-r0", "t2-MASS-r0", 0.9),
                   grid_report(0, "t1-CNN1-r0", "t2-LSTM2-r0", 0.6)]
        emit_report(reports, str(tmp_path))
        table = read_table(tmp_path / SELECTIONS_FILE)
        assert table["model_t2"].tolist() == ["t2-MASS-r0", "t2-LSTM2-r0"]
        assert table["count"].tolist() == [1, 2]

    def test_no_search_runs(self, tmp_path):
        emit_report([grid_report(0, "t1-SF-r0", "t2-MASS-r0", 0.7)], str(tmp_path))
        assert selection_table(read_table(tmp_path / RUNS_FILE)).empty


class TestScalingReport:
    def scaling_result(self):
        timings = [TimingRecord("grid", n, 120, 0.1 * n * n, r, trainings=n * n // 9)
                   for n in (3, 6, 12) for r in (0, 1)]
        fits = {("grid", 120): PowerLawFit(C=0.1, a=2.0, residual=0.0, x_range=(3.0, 12.0), n_points=3)}
        auc = [{"method": "grid", "k": k, "n_models": 3 * k, "seed": 0, "auc_t2": 0.7} for k in (1, 2, 4)]
        return ScalingResult(timings, fits, auc)

    def test_tables_and_chart(self, tmp_path):
        written = emit_scaling_report(self.scaling_result(), str(tmp_path))
        assert len(read_table(tmp_path / TIMINGS_FILE)) == 6
        fits = read_table(tmp_path / "scaling_fits.csv")
        assert fits["a"].tolist() == [2.0]
        parse_svg(written["scaling.svg"])
        parse_svg(written["scaling_auc.svg"])

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            emit_scaling_report(ScalingResult([], {}, []), str(tmp_path))


class TestRebuild:
    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            rebuild_report(str(tmp_path))

    def test_rebuild_matches(self, tmp_path):
        emit_report([darts_report(0, 0.5), darts_report(1, 0.9)], str(tmp_path))
        before = (tmp_path / SELECTIONS_FILE).read_bytes()
        (tmp_path / SELECTIONS_FILE).unlink()
        written = rebuild_report(str(tmp_path))
        assert (tmp_path / SELECTIONS_FILE).read_bytes() == before
        assert "metrics_vs_v1.svg" in written

    def test_load_runs_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_runs(str(tmp_path))

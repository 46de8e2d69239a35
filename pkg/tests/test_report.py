import numpy as np
import pytest

from langloc import report as report_mod
from langloc.report import (
    AVERAGE_ROW,
    FIXTURES,
    ReportError,
    compare_report,
    fixture_values,
    format_comparison_table,
    format_metrics_table,
    load_metrics_report,
    save_comparison,
    save_metrics_report,
    write_pgm,
)
from langloc.training import MetricsReport, SceneMetrics


def sample_report():
    scenes = [
        SceneMetrics("chess", 10, 0.11, 4.2, 1.0),
        SceneMetrics("fire", 10, 0.23, 10.1, 0.9),
    ]
    return MetricsReport(
        scenes=scenes,
        average_position_m=0.17,
        average_rotation_deg=7.15,
        accuracy=0.95,
        sample_count=20,
    )


class TestMetricsReportIO:
    def test_round_trip(self, tmp_path):
        report = sample_report()
        path = tmp_path / "report.tsv"
        save_metrics_report(report, path)
        again = load_metrics_report(path)
        assert [s.name for s in again.scenes] == ["chess", "fire"]
        assert again.scenes[0].median_position_m == 0.11
        assert again.average_position_m == 0.17
        assert again.accuracy == 0.95
        assert again.sample_count == 20

    def test_versioned_header(self, tmp_path):
        path = tmp_path / "report.tsv"
        save_metrics_report(sample_report(), path)
        assert path.read_text().splitlines()[0] == report_mod.REPORT_HEADER
        path.write_text("garbage\n")
        with pytest.raises(ReportError):
            load_metrics_report(path)

    def test_average_scene_name_collision_rejected(self, tmp_path):
        report = sample_report()
        report.scenes.append(SceneMetrics(AVERAGE_ROW, 1, 0.1, 1.0, 1.0))
        with pytest.raises(ReportError):
            save_metrics_report(report, tmp_path / "x.tsv")

    def test_human_table_carries_units(self):
        text = format_metrics_table(sample_report())
        assert "[m]" in text and "[deg]" in text
        assert "chess" in text and AVERAGE_ROW in text


class TestFixtures:
    def test_reference_averages(self):
        assert fixture_values("7scenes")[AVERAGE_ROW] == (0.16, 6.98)
        assert fixture_values("cambridge")[AVERAGE_ROW] == (0.93, 2.90)

    def test_every_method_covers_the_scene_set(self):
        for suite, methods in FIXTURES.items():
            scene_sets = {frozenset(rows) for rows in methods.values()}
            assert len(scene_sets) == 1, suite

    def test_unknown_names(self):
        with pytest.raises(ReportError):
            fixture_values("indoors")
        with pytest.raises(ReportError):
            fixture_values("7scenes", "not-a-method")

    def test_some_known_baselines_present(self):
        assert "mspn" in FIXTURES["7scenes"]
        assert "ms-trans" in FIXTURES["cambridge"]
        assert fixture_values("7scenes", "mspn")[AVERAGE_ROW] == (0.21, 8.64)


class TestComparison:
    def _full_report(self):
        ref = fixture_values("7scenes")
        scenes = [
            SceneMetrics(name, 5, ref[name][0], ref[name][1], 1.0)
            for name in ref
            if name != AVERAGE_ROW
        ]
        return MetricsReport(
            scenes=scenes,
            average_position_m=float(np.mean([s.median_position_m for s in scenes])),
            average_rotation_deg=float(np.mean([s.median_rotation_deg for s in scenes])),
            accuracy=1.0,
            sample_count=35,
        )

    def test_equal_report_zero_scene_deltas(self):
        table = compare_report(self._full_report(), "7scenes")
        for row in table.rows:
            if row.scene == AVERAGE_ROW:
                continue
            assert row.delta_position_m == 0.0
            assert row.delta_rotation_deg == 0.0

    def test_mismatched_scene_set(self):
        report = self._full_report()
        report.scenes = report.scenes[:-1]
        with pytest.raises(ReportError, match="scene sets differ"):
            compare_report(report, "7scenes")

    def test_saved_comparison_labels_source(self, tmp_path):
        table = compare_report(self._full_report(), "7scenes")
        path = tmp_path / "cmp.tsv"
        save_comparison(table, path)
        text = path.read_text()
        assert "published" in text
        assert "not reproduced" in text
        assert format_comparison_table(table).count("published")


class TestPgm:
    def test_header_and_scaling(self, tmp_path):
        values = np.array([[0.0, 0.5], [1.0, 0.25]])
        path = tmp_path / "map.pgm"
        write_pgm(path, values)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        pixels = np.frombuffer(blob[len(b"P5\n2 2\n255\n"):], dtype=np.uint8)
        assert pixels.tolist() == [0, 128, 255, 64]

    def test_constant_map_is_black(self, tmp_path):
        path = tmp_path / "flat.pgm"
        write_pgm(path, np.full((3, 3), 0.7))
        pixels = np.frombuffer(path.read_bytes()[len(b"P5\n3 3\n255\n"):], dtype=np.uint8)
        assert not pixels.any()

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ReportError):
            write_pgm(tmp_path / "bad.pgm", np.zeros(4))


class TestFigures:
    def test_metrics_figure_renders(self, tmp_path):
        report_mod.render_metrics_figure(sample_report(), tmp_path / "fig.png")
        blob = (tmp_path / "fig.png").read_bytes()
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"

    def test_loss_curves_render(self, tmp_path):
        from langloc.training import StepRecord

        records = [
            StepRecord(i, 1e-3, 10.0 / (i + 1), 1.0 / (i + 1), -4.0 + i * 0.01, -2.0)
            for i in range(20)
        ]
        report_mod.render_loss_curves(records, tmp_path / "loss.png")
        assert (tmp_path / "loss.png").stat().st_size > 0

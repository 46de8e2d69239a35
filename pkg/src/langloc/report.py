"""Delimited reports, published reference tables, and figure rendering.

Reports are line-oriented TSV with a versioned header so they diff cleanly
in tests. Alongside each delimited file the CLI renders a matplotlib figure
(PNG, Agg backend) for quick visual inspection. Fixture values are
published benchmark numbers carried for comparison only; the desk-scale
artifact does not reproduce them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .training import MetricsReport, SceneMetrics, StepRecord

REPORT_HEADER = "# langloc-report v1"
COMPARISON_HEADER = "# langloc-comparison v1"

AVERAGE_ROW = "average"

FIXTURE_SOURCE = "published"

# Published benchmark results: {suite: {method: {scene: (position m, rotation deg)}}}.
# The row for the architecture this package implements is keyed "reference".
FIXTURES: dict[str, dict[str, dict[str, tuple[float, float]]]] = {
    "7scenes": {
        "posenet": {
            "chess": (0.32, 7.60), "fire": (0.48, 14.6), "heads": (0.31, 12.2),
            "office": (0.48, 7.68), "pumpkin": (0.47, 8.42), "redkitchen": (0.59, 8.64),
            "stairs": (0.47, 13.81), AVERAGE_ROW: (0.45, 10.42),
        },
        "bayesian-posenet": {
            "chess": (0.38, 7.24), "fire": (0.43, 13.8), "heads": (0.30, 12.3),
            "office": (0.49, 8.09), "pumpkin": (0.63, 7.18), "redkitchen": (0.59, 7.59),
            "stairs": (0.48, 13.22), AVERAGE_ROW: (0.47, 9.91),
        },
        "posenet-lstm": {
            "chess": (0.24, 5.79), "fire": (0.34, 12.0), "heads": (0.22, 13.8),
            "office": (0.31, 8.11), "pumpkin": (0.34, 7.03), "redkitchen": (0.37, 8.83),
            "stairs": (0.41, 13.21), AVERAGE_ROW: (0.32, 9.82),
        },
        "posenet17": {
            "chess": (0.14, 4.53), "fire": (0.29, 11.5), "heads": (0.19, 13.1),
            "office": (0.20, 5.62), "pumpkin": (0.27, 4.77), "redkitchen": (0.24, 5.37),
            "stairs": (0.36, 12.53), AVERAGE_ROW: (0.24, 8.20),
        },
        "irpnet": {
            "chess": (0.13, 5.78), "fire": (0.27, 9.83), "heads": (0.17, 13.2),
            "office": (0.25, 6.41), "pumpkin": (0.23, 5.83), "redkitchen": (0.31, 7.32),
            "stairs": (0.35, 11.91), AVERAGE_ROW: (0.24, 8.61),
        },
        "hourglass": {
            "chess": (0.15, 6.18), "fire": (0.27, 10.83), "heads": (0.20, 11.6),
            "office": (0.26, 8.59), "pumpkin": (0.26, 7.32), "redkitchen": (0.29, 10.7),
            "stairs": (0.30, 12.75), AVERAGE_ROW: (0.25, 9.71),
        },
        "atloc": {
            "chess": (0.11, 4.37), "fire": (0.27, 11.7), "heads": (0.16, 11.9),
            "office": (0.19, 5.61), "pumpkin": (0.22, 4.54), "redkitchen": (0.25, 5.62),
            "stairs": (0.28, 10.9), AVERAGE_ROW: (0.21, 7.81),
        },
        "mspn": {
            "chess": (0.10, 4.76), "fire": (0.29, 11.5), "heads": (0.17, 13.2),
            "office": (0.17, 6.87), "pumpkin": (0.21, 5.53), "redkitchen": (0.23, 6.81),
            "stairs": (0.31, 11.81), AVERAGE_ROW: (0.21, 8.64),
        },
        "ms-trans": {
            "chess": (0.11, 4.67), "fire": (0.26, 9.78), "heads": (0.16, 12.8),
            "office": (0.17, 5.66), "pumpkin": (0.18, 4.44), "redkitchen": (0.21, 5.99),
            "stairs": (0.29, 8.45), AVERAGE_ROW: (0.20, 7.40),
        },
        "c2f-mstrans": {
            "chess": (0.10, 4.63), "fire": (0.25, 9.89), "heads": (0.14, 12.5),
            "office": (0.16, 5.65), "pumpkin": (0.16, 4.42), "redkitchen": (0.18, 6.29),
            "stairs": (0.27, 7.86), AVERAGE_ROW: (0.18, 7.32),
        },
        "reference": {
            "chess": (0.09, 3.95), "fire": (0.22, 9.45), "heads": (0.11, 11.9),
            "office": (0.14, 5.68), "pumpkin": (0.16, 3.82), "redkitchen": (0.14, 6.11),
            "stairs": (0.23, 8.11), AVERAGE_ROW: (0.16, 6.98),
        },
    },
    "cambridge": {
        "posenet": {
            "kingscollege": (1.94, 5.43), "oldhospital": (0.61, 2.92),
            "shopfacade": (1.16, 3.92), "stmaryschurch": (2.67, 8.52),
            AVERAGE_ROW: (1.60, 5.20),
        },
        "bayesian-posenet": {
            "kingscollege": (1.76, 4.08), "oldhospital": (2.59, 5.18),
            "shopfacade": (1.27, 7.58), "stmaryschurch": (2.13, 8.42),
            AVERAGE_ROW: (1.94, 6.32),
        },
        "mapnet": {
            "kingscollege": (1.08, 1.91), "oldhospital": (1.96, 3.95),
            "shopfacade": (1.51, 4.26), "stmaryschurch": (2.02, 4.57),
            AVERAGE_ROW: (1.64, 3.67),
        },
        "posenet17": {
            "kingscollege": (1.62, 2.31), "oldhospital": (2.64, 3.93),
            "shopfacade": (1.16, 5.77), "stmaryschurch": (2.95, 6.50),
            AVERAGE_ROW: (2.09, 4.63),
        },
        "irpnet": {
            "kingscollege": (1.21, 2.19), "oldhospital": (1.89, 3.42),
            "shopfacade": (0.74, 3.51), "stmaryschurch": (1.89, 4.98),
            AVERAGE_ROW: (1.43, 3.53),
        },
        "posenet-lstm": {
            "kingscollege": (0.99, 3.74), "oldhospital": (1.53, 4.33),
            "shopfacade": (1.20, 7.48), "stmaryschurch": (1.54, 6.72),
            AVERAGE_ROW: (1.32, 5.57),
        },
        "mspn": {
            "kingscollege": (1.77, 3.76), "oldhospital": (2.55, 4.05),
            "shopfacade": (2.92, 7.49), "stmaryschurch": (2.67, 6.18),
            AVERAGE_ROW: (2.48, 5.37),
        },
        "ms-trans": {
            "kingscollege": (0.85, 1.63), "oldhospital": (1.83, 2.43),
            "shopfacade": (0.88, 3.11), "stmaryschurch": (1.64, 4.03),
            AVERAGE_ROW: (1.30, 2.80),
        },
        "c2f-mstrans": {
            "kingscollege": (0.71, 2.71), "oldhospital": (1.50, 2.98),
            "shopfacade": (0.61, 2.92), "stmaryschurch": (1.16, 3.92),
            AVERAGE_ROW: (0.99, 3.13),
        },
        "reference": {
            "kingscollege": (0.62, 1.89), "oldhospital": (1.38, 2.41),
            "shopfacade": (0.63, 3.22), "stmaryschurch": (1.09, 4.09),
            AVERAGE_ROW: (0.93, 2.90),
        },
    },
}


class ReportError(ValueError):
    """Malformed report file or mismatched comparison inputs."""


def fixture_values(suite: str, method: str = "reference") -> dict[str, tuple[float, float]]:
    """Published (position m, rotation deg) rows for one method."""
    try:
        table = FIXTURES[suite]
    except KeyError:
        raise ReportError(f"unknown fixture suite {suite!r}; have {sorted(FIXTURES)}") from None
    try:
        return table[method]
    except KeyError:
        raise ReportError(
            f"unknown method {method!r} in suite {suite!r}; have {sorted(table)}"
        ) from None


# ---------------------------------------------------------------------------
# metrics report TSV


def save_metrics_report(report: MetricsReport, path) -> None:
    lines = [
        REPORT_HEADER,
        "scene\tsamples\tmedian_position_m\tmedian_rotation_deg\tscene_accuracy",
    ]
    for s in report.scenes:
        if s.name == AVERAGE_ROW:
            raise ReportError(f"scene name {AVERAGE_ROW!r} collides with the average row")
        lines.append(
            f"{s.name}\t{s.sample_count}\t{s.median_position_m!r}"
            f"\t{s.median_rotation_deg!r}\t{s.accuracy!r}"
        )
    lines.append(
        f"{AVERAGE_ROW}\t{report.sample_count}\t{report.average_position_m!r}"
        f"\t{report.average_rotation_deg!r}\t{report.accuracy!r}"
    )
    Path(path).write_text("\n".join(lines) + "\n")


def load_metrics_report(path) -> MetricsReport:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ReportError(f"{path}: missing report header {REPORT_HEADER!r}")
    scenes = []
    average = None
    for line in lines[2:]:
        name, count, pos, rot, acc = line.split("\t")
        row = SceneMetrics(name, int(count), float(pos), float(rot), float(acc))
        if name == AVERAGE_ROW:
            average = row
        else:
            scenes.append(row)
    if average is None:
        raise ReportError(f"{path}: no {AVERAGE_ROW!r} row")
    return MetricsReport(
        scenes=scenes,
        average_position_m=average.median_position_m,
        average_rotation_deg=average.median_rotation_deg,
        accuracy=average.accuracy,
        sample_count=average.sample_count,
    )


def format_metrics_table(report: MetricsReport) -> str:
    """Human-readable fixed-width rendering of a metrics report."""
    rows = [("scene", "samples", "pos [m]", "rot [deg]", "accuracy")]
    for s in report.scenes + [
        SceneMetrics(AVERAGE_ROW, report.sample_count, report.average_position_m,
                     report.average_rotation_deg, report.accuracy)
    ]:
        rows.append(
            (s.name, str(s.sample_count), f"{s.median_position_m:.4f}",
             f"{s.median_rotation_deg:.3f}", f"{s.accuracy:.3f}")
        )
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows)


# ---------------------------------------------------------------------------
# comparison against published numbers


@dataclass
class ComparisonRow:
    scene: str
    report_position_m: float
    reference_position_m: float
    delta_position_m: float
    report_rotation_deg: float
    reference_rotation_deg: float
    delta_rotation_deg: float


@dataclass
class ComparisonTable:
    suite: str
    method: str
    source: str
    rows: list[ComparisonRow]


def compare_report(report: MetricsReport, suite: str, method: str = "reference") -> ComparisonTable:
    """Side-by-side deltas (report minus published reference) per scene.

    The scene sets must match exactly; fixture values are published numbers,
    not something this artifact reproduces.
    """
    fixture = fixture_values(suite, method)
    fixture_scenes = set(fixture) - {AVERAGE_ROW}
    report_scenes = {s.name for s in report.scenes}
    if fixture_scenes != report_scenes:
        raise ReportError(
            f"scene sets differ: report has {sorted(report_scenes)}, "
            f"fixture {suite!r} has {sorted(fixture_scenes)}"
        )
    rows = []
    for s in report.scenes + [
        SceneMetrics(AVERAGE_ROW, report.sample_count, report.average_position_m,
                     report.average_rotation_deg, report.accuracy)
    ]:
        ref_pos, ref_rot = fixture[s.name]
        rows.append(
            ComparisonRow(
                scene=s.name,
                report_position_m=s.median_position_m,
                reference_position_m=ref_pos,
                delta_position_m=s.median_position_m - ref_pos,
                report_rotation_deg=s.median_rotation_deg,
                reference_rotation_deg=ref_rot,
                delta_rotation_deg=s.median_rotation_deg - ref_rot,
            )
        )
    return ComparisonTable(suite=suite, method=method, source=FIXTURE_SOURCE, rows=rows)


def save_comparison(table: ComparisonTable, path) -> None:
    lines = [
        COMPARISON_HEADER,
        f"# suite={table.suite} method={table.method} reference-source={table.source}",
        "# reference columns are published numbers, not reproduced by this desk-scale artifact",
        "scene\treport_position_m\treference_position_m\tdelta_position_m"
        "\treport_rotation_deg\treference_rotation_deg\tdelta_rotation_deg",
    ]
    for r in table.rows:
        lines.append(
            f"{r.scene}\t{r.report_position_m!r}\t{r.reference_position_m!r}"
            f"\t{r.delta_position_m!r}\t{r.report_rotation_deg!r}"
            f"\t{r.reference_rotation_deg!r}\t{r.delta_rotation_deg!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def format_comparison_table(table: ComparisonTable) -> str:
    header = ("scene", "pos [m]", "ref pos [m]", "d pos [m]",
              "rot [deg]", "ref rot [deg]", "d rot [deg]")
    rows = [header]
    for r in table.rows:
        rows.append(
            (r.scene, f"{r.report_position_m:.4f}", f"{r.reference_position_m:.4f}",
             f"{r.delta_position_m:+.4f}", f"{r.report_rotation_deg:.3f}",
             f"{r.reference_rotation_deg:.3f}", f"{r.delta_rotation_deg:+.3f}")
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    body = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    note = f"reference = {table.source} {table.method!r} numbers for suite {table.suite!r}"
    return body + "\n" + note


# ---------------------------------------------------------------------------
# figures


def render_metrics_figure(report: MetricsReport, path) -> None:
    names = [s.name for s in report.scenes]
    fig, (ax_pos, ax_rot) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_pos.bar(names, [s.median_position_m for s in report.scenes], color="#4878d0")
    ax_pos.axhline(report.average_position_m, color="k", linestyle=":", linewidth=1)
    ax_pos.set_ylabel("median position error [m]")
    ax_rot.bar(names, [s.median_rotation_deg for s in report.scenes], color="#d65f5f")
    ax_rot.axhline(report.average_rotation_deg, color="k", linestyle=":", linewidth=1)
    ax_rot.set_ylabel("median rotation error [deg]")
    for ax in (ax_pos, ax_rot):
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_comparison_figure(table: ComparisonTable, path) -> None:
    scenes = [r.scene for r in table.rows]
    x = np.arange(len(scenes))
    width = 0.38
    fig, (ax_pos, ax_rot) = plt.subplots(1, 2, figsize=(10, 3.4))
    ax_pos.bar(x - width / 2, [r.report_position_m for r in table.rows], width, label="report")
    ax_pos.bar(x + width / 2, [r.reference_position_m for r in table.rows], width,
               label=f"{table.source} reference")
    ax_pos.set_ylabel("median position error [m]")
    ax_rot.bar(x - width / 2, [r.report_rotation_deg for r in table.rows], width, label="report")
    ax_rot.bar(x + width / 2, [r.reference_rotation_deg for r in table.rows], width,
               label=f"{table.source} reference")
    ax_rot.set_ylabel("median rotation error [deg]")
    for ax in (ax_pos, ax_rot):
        ax.set_xticks(x)
        ax.set_xticklabels(scenes, rotation=45, ha="right")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_loss_curves(records: list[StepRecord], path) -> None:
    steps = [r.step for r in records]
    fig, (ax_loss, ax_ab) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(steps, [r.loss for r in records], label="total", lw=1)
    ax_loss.plot(steps, [r.l_cls for r in records], label="classification", lw=1)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_ab.plot(steps, [r.alpha for r in records], label="alpha", lw=1)
    ax_ab.plot(steps, [r.beta for r in records], label="beta", lw=1)
    ax_ab.set_xlabel("step")
    ax_ab.set_ylabel("balance scalars")
    ax_ab.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# attention export


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2-D array as a binary portable graymap, min-max normalized
    per map to the full 0..255 range (a constant map becomes all zeros)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ReportError(f"PGM needs a 2-D array, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = (values - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(values)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())

###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Module for converting training logs and evaluation reports into CSV files,
plots, Excel workbooks and database tables.
"""
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import xlsxwriter  # noqa: E402

SUMMARY_KEYS = [
    "protocol",
    "eta",
    "n_queries",
    "n_gallery",
    "rank1",
    "rank5",
    "rank10",
    "map",
    "decoder_calls",
    "mam_accuracy",
]


def add_key_to_df(df, test_number):
    """ Inserts the key columns at the beginning of the dataframe"""
    df.insert(0, "test_number", test_number)
    return df


def summary_frame(metrics):
    return pd.DataFrame(
        [(k, metrics[k]) for k in SUMMARY_KEYS if k in metrics], columns=["item", "value"]
    )


def write_eval_report(report, out_dir, name="eval_report"):
    """
    Per-query top-10 rows, a blank line, then the summary block. Wall time
    goes to a separate json file so the report itself is reproducible.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.csv"
    report.top_k_frame(10).to_csv(path, index=False, float_format="%.6f")
    with open(path, "a", encoding="utf-8") as f:
        f.write("\n")
    summary_frame(report.metrics).to_csv(path, mode="a", index=False, float_format="%.6f")
    timing = dict(wall_time_seconds=report.wall_time, queries=report.metrics["n_queries"])
    (out_dir / f"{name.replace('report', 'timing')}.json").write_text(json.dumps(timing, indent=2))
    return path


def write_sweep(rows, kind, x_key, out_dir, y_keys=("rank1", "map"), hue=None):
    """
    One CSV row per setting plus a line plot of the metrics against ``x_key``,
    one line per metric (and per ``hue`` value when given).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(rows)
    csv_path = out_dir / f"sweep_{kind}.csv"
    df.to_csv(csv_path, index=False, float_format="%.6f")

    fig, ax = plt.subplots(figsize=(6, 4))
    groups = df.groupby(hue, sort=False) if hue else [(None, df)]
    for label, part in groups:
        x = part[x_key].astype(str) if part[x_key].dtype == object else part[x_key]
        for key in y_keys:
            if key in part:
                name = key if label is None else f"{key} ({label})"
                ax.plot(x, part[key], marker="o", label=name)
    ax.set_xlabel(x_key)
    ax.set_ylabel("score")
    ax.set_title(f"{kind} sweep")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"sweep_{kind}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path


def summary(scene, report, test_number, workbook=None, sheet_format=None, agg_dict=None):
    """
    Retrieval metrics.

    :param workbook: Excel workbook to be saved to disk.
    :param report: EvalReport.
    :param sheet_format: Dictionary holding formatting information such as col width, font etc.
    :param agg_dict: Collects the dataframes headed for the database.
    :return workbook, agg_dict:
    """
    df = summary_frame(report.metrics)
    if scene["save_db"]:
        wide = pd.DataFrame([{k: report.metrics[k] for k in SUMMARY_KEYS if k in report.metrics}])
        agg_dict["summary"] = add_key_to_df(wide, test_number)

    if scene["save_excel"]:
        worksheet = workbook.add_worksheet("summary")
        worksheet.write_row(0, 0, ["Item", "Value"])
        worksheet.set_row(0, None, sheet_format["header_format"])
        worksheet.set_column("A:A", sheet_format["x_wide"], sheet_format["align_left"])
        worksheet.set_column("B:B", sheet_format["medium"], sheet_format["float_4d"])
        for i, (k, v) in enumerate(df.itertuples(index=False)):
            worksheet.write_row(i + 1, 0, [k, v])

    return workbook, agg_dict


def queries(scene, report, test_number, workbook=None, sheet_format=None, agg_dict=None):
    """Per-query top-10 gallery lists."""
    df = report.top_k_frame(10)
    if scene["save_db"] and scene["full_export"]:
        agg_dict["queries"] = add_key_to_df(df.copy(), test_number)

    if scene["save_excel"]:
        worksheet = workbook.add_worksheet("queries")
        worksheet.write_row(0, 0, [c.capitalize() for c in df.columns])
        worksheet.set_row(0, None, sheet_format["header_format"])
        worksheet.set_column("C:C", sheet_format["xx_wide"], None)
        for i, row in enumerate(df.itertuples(index=False)):
            worksheet.write_row(i + 1, 0, list(row))

    return workbook, agg_dict


def training(scene, log_frame, test_number, workbook=None, sheet_format=None, agg_dict=None):
    """Per-step loss breakdown."""
    if log_frame is None or log_frame.empty:
        return workbook, agg_dict
    if scene["save_db"] and scene["full_export"]:
        agg_dict["training"] = add_key_to_df(log_frame.copy(), test_number)

    if scene["save_excel"]:
        worksheet = workbook.add_worksheet("training")
        worksheet.write_row(0, 0, [c.capitalize() for c in log_frame.columns])
        worksheet.set_row(0, None, sheet_format["header_format"])
        worksheet.set_column("A:A", sheet_format["narrow"], sheet_format["int_0d"])
        worksheet.set_column("B:E", sheet_format["medium"], sheet_format["float_4d"])
        worksheet.set_column("F:F", sheet_format["medium"], sheet_format["float_sci"])
        for i, row in enumerate(log_frame.itertuples(index=False)):
            worksheet.write_row(i + 1, 0, list(row))

    return workbook, agg_dict


def dimension(scene, test_number, workbook=None, sheet_format=None, agg_dict=None):
    """
    Input parameters.

    Only the ``db_cols`` (experiment-defining keys) go to the database; the
    workbook lists everything.
    """
    scene = dict(scene)
    db_cols = scene.pop("db_cols", [])
    for k, v in scene.items():
        if isinstance(v, (list, tuple, dict)):
            scene[k] = json.dumps(v)

    if scene["save_db"]:
        df = pd.DataFrame([{c.replace(".", "_"): scene[c] for c in db_cols if c in scene}])
        agg_dict["dimension"] = add_key_to_df(df, test_number)

    if scene["save_excel"]:
        worksheet = workbook.add_worksheet("dimension")
        worksheet.write_row(0, 0, ["Item", "Value"])
        worksheet.write_row(1, 0, ["test number", test_number])
        worksheet.set_row(0, None, sheet_format["header_format"])
        worksheet.set_column("A:B", sheet_format["x_wide"], sheet_format["align_left"])
        for i, (k, v) in enumerate(scene.items()):
            worksheet.write_row(i + 2, 0, [k, v if v is not None else ""])

    return workbook, agg_dict


def result(scene, report, test_number, log_frame=None):
    """
    Collect the run's outputs for the database and/or an Excel workbook.

    :return agg_dict: table name -> DataFrame (empty when save_db is off).
    """
    agg_dict = {}
    workbook = sheet_format = None

    if scene["save_excel"]:
        path = Path(scene["save_path"])
        path.mkdir(parents=True, exist_ok=True)
        filename = f"{scene['save_name']}-{test_number[:8]}.xlsx"
        workbook = xlsxwriter.Workbook(path / filename)

        # Column widths and cell formats.
        sheet_format = dict(
            narrow=8,
            medium=12,
            wide=16,
            x_wide=20,
            xx_wide=60,
            header_format=workbook.add_format(
                {
                    "bold": True,
                    "text_wrap": True,
                    "valign": "top",
                    "align": "center",
                    "font_color": "black",
                }
            ),
            float_4d=workbook.add_format({"num_format": "0.0000"}),
            float_sci=workbook.add_format({"num_format": "0.00E+00"}),
            int_0d=workbook.add_format({"num_format": "#,##0"}),
            align_left=workbook.add_format({"align": "left"}),
        )

    for export in (summary, queries):
        workbook, agg_dict = export(scene, report, test_number, workbook, sheet_format, agg_dict)
    workbook, agg_dict = training(scene, log_frame, test_number, workbook, sheet_format, agg_dict)
    workbook, agg_dict = dimension(scene, test_number, workbook, sheet_format, agg_dict)

    if workbook is not None:
        workbook.close()

    return agg_dict

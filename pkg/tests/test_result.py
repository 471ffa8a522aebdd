import json

import pandas as pd
import pytest

from cada.result import SUMMARY_KEYS, result, write_eval_report, write_sweep
from cada.retrieval import evaluate


@pytest.fixture
def report(tiny_model, corpus):
    return evaluate(tiny_model, corpus.split("test"), corpus.vocab, corpus.lexicon, protocol="local", eta=2, max_len=16)


def test_eval_report_layout(report, tmp_path):
    path = write_eval_report(report, tmp_path)
    text = path.read_text()
    top, summary = text.split("\n\n")
    assert len(top.splitlines()) == 1 + 8
    assert top.splitlines()[0].startswith("query,identity,caption,top1,top1_id,top1_score")
    items = [line.split(",")[0] for line in summary.strip().splitlines()[1:]]
    assert items == [k for k in SUMMARY_KEYS if k in report.metrics]
    timing = json.loads((tmp_path / "eval_timing.json").read_text())
    assert timing["queries"] == 8
    assert "wall_time" not in text


def test_sweep_outputs(tmp_path):
    rows = [dict(eta=e, rank1=0.1 * i, map=0.05 * i) for i, e in enumerate((0, 4, 8))]
    csv_path, png_path = write_sweep(rows, "eta", "eta", tmp_path)
    assert pd.read_csv(csv_path)["eta"].tolist() == [0, 4, 8]
    assert png_path.stat().st_size > 0


def test_sweep_with_hue(tmp_path):
    rows = [
        {"data.alpha": a, "data.mask_mode": m, "rank1": a, "map": a / 2}
        for m in ("attribute", "token")
        for a in (0.2, 1.0)
    ]
    _, png_path = write_sweep(rows, "mask_rate", "data.alpha", tmp_path, hue="data.mask_mode")
    assert png_path.exists()


def test_result_workbook_and_tables(report, tmp_path):
    scene = dict(
        save_db=True,
        save_excel=True,
        full_export=True,
        save_path=str(tmp_path),
        save_name="results",
        seed=0,
        db_cols=["seed", "loss.tau"],
        **{"loss.tau": 0.02, "eval.protocol": "local"},
    )
    log_frame = pd.DataFrame([dict(step=1, ndf=1.0, atp=0.7, ara=5.0, total=5.8, lr=3e-4)])
    agg = result(scene, report, "abcdef123456", log_frame)
    assert sorted(agg) == ["dimension", "queries", "summary", "training"]
    assert list(agg["dimension"].columns) == ["test_number", "seed", "loss_tau"]
    assert agg["summary"]["rank1"].iloc[0] == report.metrics["rank1"]
    assert (tmp_path / "results-abcdef12.xlsx").stat().st_size > 0


def test_result_without_exports(report):
    scene = dict(save_db=False, save_excel=False, full_export=False)
    assert result(scene, report, "x") == {}

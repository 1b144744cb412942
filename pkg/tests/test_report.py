import itertools

import pytest

from morarena import report
from morarena.judge import THRESHOLD_KINDS

SCHEMES = ("adi", "ewe", "lib", "dawn", "lukas", "di")


def _th(scheme, ind=0.1, ext=0.9):
    return {"scheme": scheme, "independent": ind, "extracted": ext, "mixed": (ind + ext) / 2}


def _forge(scheme, kind, seed, mor):
    th = _th(scheme)
    return {"kind": "forge", "scheme": scheme, "threshold": kind, "preset": "different", "seed": seed,
            "thresholds": th, "mor_acc": mor, "verdict": {"accepted": mor > th[kind]}}


@pytest.fixture
def records():
    out = []
    for scheme, kind in itertools.product(SCHEMES, THRESHOLD_KINDS):
        for seed, mor in enumerate((0.2, 0.6, 0.95)):
            out.append(_forge(scheme, kind, seed, mor))
    out.append({"kind": "sweep", "scheme": "adi", "seed": 0, "values": {"0.1": 0.4, "0.2": 0.8}})
    return out


def test_empty_records_rejected():
    with pytest.raises(report.ReportError):
        report.table_rows([])


def test_mixed_scheme_cell_rejected():
    rec = _forge("adi", "mixed", 0, 0.5)
    rec["thresholds"] = _th("lukas")
    with pytest.raises(report.ReportError, match="mixes schemes"):
        report.table_rows([rec])


def test_per_seed_and_mean_rows(records):
    rows = report.table_rows(records)
    eff = [r for r in rows if r["table"] == "effectiveness" and r["scheme"] == "adi" and r["threshold"] == "mixed"]
    assert [r["seed"] for r in eff] == [0, 1, 2, "mean"]
    mean = eff[-1]
    assert mean["mor_acc"] == pytest.approx((0.2 + 0.6 + 0.95) / 3)
    assert mean["exceeds_mixed"] and not mean["exceeds_extracted"]
    assert mean["accepted"]  # two of three seeds


def test_matrix_covers_every_scheme_and_threshold(records):
    rows = report.table_rows(records)
    cells = {(r["scheme"], r["threshold"]) for r in rows if r["table"] == "effectiveness" and r["seed"] == "mean"}
    assert cells == set(itertools.product(SCHEMES, THRESHOLD_KINDS))
    th = [r for r in rows if r["table"] == "thresholds" and r["seed"] == "mean"]
    assert {r["scheme"] for r in th} == set(SCHEMES)
    assert all(r["mixed"] == (r["independent"] + r["extracted"]) / 2 for r in th)


def test_sweep_rows(records):
    rows = [r for r in report.table_rows(records) if r["table"] == "sweep" and r["seed"] == "mean"]
    assert [(r["epsilon"], r["mor_acc"]) for r in rows] == [(0.1, 0.4), (0.2, 0.8)]


def test_csv_round_trip(records, tmp_path):
    rows = report.table_rows(records)
    path = tmp_path / "r.csv"
    path.write_text(report.to_csv(rows))
    assert report.load_csv_rows(path) == rows
    assert path.read_text().splitlines()[0].split(",") == list(report.CSV_FIELDS)


def test_text_report_counts(records):
    text = report.render_text(report.table_rows(records))
    assert "2/3" in text and "1/3" in text
    assert "95.0" not in text and "58.3" in text


def test_figures(records, tmp_path):
    paths = report.render_figures(report.table_rows(records), tmp_path)
    assert paths and all(p.exists() and p.stat().st_size > 0 for p in paths)


def test_report_tables(records):
    text, table = report.report_tables(records)
    assert text.startswith("Decision thresholds") and table.count("\n") > 18

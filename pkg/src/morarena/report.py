"""Aggregate run records into a thresholds table and a false-claim effectiveness table.

Both tables average over seeds. The CSV keeps the per-seed values next to the
means so regressions can be diffed row by row.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

import numpy as np

from .judge import THRESHOLD_KINDS

CSV_FIELDS = ("table", "scheme", "threshold", "preset", "seed", "epsilon", "independent", "mixed",
              "extracted", "mor_acc", "accepted", "exceeds_mixed", "exceeds_extracted")
_FLOATS = ("epsilon", "independent", "mixed", "extracted", "mor_acc")
_BOOLS = ("accepted", "exceeds_mixed", "exceeds_extracted")


class ReportError(ValueError):
    pass


def _check_cell(rec):
    th = rec.get("thresholds")
    if th is not None and th.get("scheme") != rec.get("scheme"):
        raise ReportError(f"record mixes schemes: {rec.get('scheme')!r} scored against "
                          f"{th.get('scheme')!r} thresholds")


def collect(records):
    """Split records into per-seed threshold rows and forge rows."""
    records = list(records)
    if not records:
        raise ReportError("no records to report")
    thresholds, forged, sweeps = {}, [], []
    for rec in records:
        _check_cell(rec)
        th = rec.get("thresholds")
        if th is not None:
            thresholds[(rec["scheme"], rec["seed"])] = th
        if rec.get("kind") == "forge":
            forged.append(rec)
        elif rec.get("kind") == "sweep":
            sweeps.append(rec)
    return thresholds, forged, sweeps


def table_rows(records) -> list:
    """Per-seed rows followed by one mean row per cell (seed == "mean")."""
    thresholds, forged, sweeps = collect(records)
    rows = []
    by_scheme = defaultdict(list)
    for (scheme, seed), th in sorted(thresholds.items()):
        row = {"table": "thresholds", "scheme": scheme, "seed": seed}
        row.update({k: float(th[k]) for k in THRESHOLD_KINDS})
        rows.append(row)
        by_scheme[scheme].append(row)
    for scheme, group in by_scheme.items():
        mean = {"table": "thresholds", "scheme": scheme, "seed": "mean"}
        mean.update({k: float(np.mean([r[k] for r in group])) for k in THRESHOLD_KINDS})
        rows.append(mean)

    cells = defaultdict(list)
    for rec in forged:
        th = rec["thresholds"]
        row = {"table": "effectiveness", "scheme": rec["scheme"], "threshold": rec["threshold"],
               "preset": rec.get("preset", ""), "seed": rec["seed"],
               "mor_acc": float(rec["mor_acc"]), "accepted": bool(rec["verdict"]["accepted"]),
               "exceeds_mixed": bool(rec["mor_acc"] > th["mixed"]),
               "exceeds_extracted": bool(rec["mor_acc"] > th["extracted"])}
        row.update({k: float(th[k]) for k in THRESHOLD_KINDS})
        rows.append(row)
        cells[(row["scheme"], row["threshold"], row["preset"])].append(row)
    for (scheme, kind, preset), group in sorted(cells.items()):
        mean = {"table": "effectiveness", "scheme": scheme, "threshold": kind, "preset": preset,
                "seed": "mean"}
        for k in (*THRESHOLD_KINDS, "mor_acc"):
            mean[k] = float(np.mean([r[k] for r in group]))
        # the boolean columns of a mean row compare the seed-averaged values
        mean["accepted"] = sum(r["accepted"] for r in group) * 2 > len(group)
        mean["exceeds_mixed"] = mean["mor_acc"] > mean["mixed"]
        mean["exceeds_extracted"] = mean["mor_acc"] > mean["extracted"]
        rows.append(mean)

    curve = defaultdict(list)
    for rec in sweeps:
        for eps, value in rec["values"].items():
            row = {"table": "sweep", "scheme": rec["scheme"], "seed": rec["seed"],
                   "epsilon": float(eps), "mor_acc": float(value)}
            rows.append(row)
            curve[(row["scheme"], row["epsilon"])].append(row["mor_acc"])
    for (scheme, eps), values in sorted(curve.items()):
        rows.append({"table": "sweep", "scheme": scheme, "seed": "mean", "epsilon": eps,
                     "mor_acc": float(np.mean(values))})
    return rows


def _fmt(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{100 * v:.1f}"
    return str(v)


def _aligned(header, body):
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, body)])


def render_text(rows) -> str:
    means = [r for r in rows if r["seed"] == "mean"]
    th = [r for r in means if r["table"] == "thresholds"]
    eff = [r for r in means if r["table"] == "effectiveness"]
    sweep = [r for r in means if r["table"] == "sweep"]
    counts = defaultdict(lambda: [0, 0])
    for r in rows:
        if r["table"] == "effectiveness" and r["seed"] != "mean":
            c = counts[(r["scheme"], r["threshold"], r["preset"])]
            c[0] += r["accepted"]
            c[1] += 1
    parts = []
    if th:
        parts.append("Decision thresholds (MORacc %, mean over seeds)")
        parts.append(_aligned(["scheme", "independent", "mixed", "extracted"],
                              [[r["scheme"], *(_fmt(r[k]) for k in THRESHOLD_KINDS)] for r in th]))
    if eff:
        parts.append("False claim effectiveness (suspect MORacc %, mean over seeds)")
        body = []
        for r in eff:
            ok, n = counts[(r["scheme"], r["threshold"], r["preset"])]
            body.append([r["scheme"], r["threshold"], r["preset"], _fmt(r["mor_acc"]),
                         _fmt(r["exceeds_mixed"]), _fmt(r["exceeds_extracted"]), f"{ok}/{n}"])
        parts.append(_aligned(["scheme", "threshold", "preset", "mor_acc", "exceeds_mixed",
                               "exceeds_extracted", "accepted"], body))
    if sweep:
        parts.append("Suspect MORacc % by attack epsilon (mean over seeds)")
        parts.append(_aligned(["scheme", "epsilon", "mor_acc"],
                              [[r["scheme"], f"{r['epsilon']:g}", _fmt(r["mor_acc"])] for r in sweep]))
    if not parts:
        raise ReportError("records contain neither thresholds nor forge or sweep results")
    return "\n\n".join(parts) + "\n"


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(r[k]) if isinstance(r.get(k), float) else r.get(k, ""))
                    for k in CSV_FIELDS})
    return buf.getvalue()


def _parse_cell(key, raw):
    if raw == "":
        return None
    if key in _FLOATS:
        return float(raw)
    if key in _BOOLS:
        return raw == "True"
    if key == "seed" and raw != "mean":
        return int(raw)
    return raw


def load_csv_rows(path) -> list:
    """Inverse of ``to_csv``: missing cells are dropped, types restored."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        out = []
        for raw in csv.DictReader(fh):
            row = {k: _parse_cell(k, v) for k, v in raw.items()}
            out.append({k: v for k, v in row.items() if v is not None})
    return out


def report_tables(records):
    """Return (text, csv) for a list of run records."""
    rows = table_rows(records)
    return render_text(rows), to_csv(rows)


def render_figures(rows, out_dir) -> list:
    """Bar chart of mean suspect MORacc per scheme against its thresholds."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eff = [r for r in rows if r["table"] == "effectiveness" and r["seed"] == "mean"]
    if not eff:
        return []
    out_dir = Path(out_dir)
    written = []
    for kind in sorted({r["threshold"] for r in eff}):
        sel = [r for r in eff if r["threshold"] == kind]
        labels = [f"{r['scheme']}\n{r['preset']}" for r in sel]
        x = np.arange(len(sel))
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(sel)), 3.2))
        ax.bar(x, [r["mor_acc"] for r in sel], width=0.6, color="0.6", label="forged claim")
        for key, style in (("independent", ":"), ("mixed", "-"), ("extracted", "--")):
            ax.hlines([r[key] for r in sel], x - 0.35, x + 0.35, colors="k", linestyles=style,
                      label=key)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("suspect MORacc")
        ax.legend(fontsize=7, frameon=False, ncol=4, loc="upper center", bbox_to_anchor=(0.5, 1.18))
        fig.tight_layout()
        path = out_dir / f"effectiveness-{kind}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written

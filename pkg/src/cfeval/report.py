"""summary.csv and comparison.svg writers."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional
from xml.sax.saxutils import escape

SUMMARY_COLUMNS = ["method", "seed", "rec_cv", "rec_avg", "rec_dev_mad", "rec_dev_std"]
METHOD_ORDER = ["DM-proposed", "DM-baseline", "IPS"]
COLORS = {"DM-proposed": "#1b9e77", "DM-baseline": "#7570b3", "IPS": "#d95f02"}


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _method_key(m: str):
    return (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m)


def summary_rows(seed_reports: dict) -> list[dict]:
    """``seed_reports`` maps seed -> {method: RecoveryReport}."""
    rows = []
    for seed in sorted(seed_reports):
        for method in sorted(seed_reports[seed], key=_method_key):
            r = seed_reports[seed][method]
            rows.append(
                {
                    "method": method,
                    "seed": seed,
                    "rec_cv": r.rec_cv,
                    "rec_avg": r.rec_avg,
                    "rec_dev_mad": r.rec_dev,
                    "rec_dev_std": r.rec_dev_std,
                }
            )
    return rows


def write_summary_csv(rows: Iterable[dict], path, config_hash: Optional[str] = None) -> None:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, delimiter=",", lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([r["method"], r["seed"]] + [_fmt(r[c]) for c in SUMMARY_COLUMNS[2:]])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_summary_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for r in csv.DictReader(lines):
        row = {"method": r["method"], "seed": int(r["seed"])}
        for c in SUMMARY_COLUMNS[2:]:
            row[c] = float(r[c]) if r[c] != "" else None
        out.append(row)
    return out


def method_stats(rows: list[dict]) -> dict:
    """Mean rec_cv per method plus the fraction of seeds the proposed method wins outright."""
    by_method = defaultdict(list)
    by_seed = defaultdict(dict)
    for r in rows:
        if r["rec_cv"] is not None:
            by_method[r["method"]].append(r["rec_cv"])
            by_seed[r["seed"]][r["method"]] = r["rec_cv"]
    means = {m: sum(v) / len(v) for m, v in by_method.items()}
    wins, contested = 0, 0
    for seed, vals in by_seed.items():
        if "DM-proposed" not in vals or len(vals) < 2:
            continue
        contested += 1
        if all(vals["DM-proposed"] < v for m, v in vals.items() if m != "DM-proposed"):
            wins += 1
    return {
        "mean_rec_cv": {m: means[m] for m in sorted(means, key=_method_key)},
        "n_seeds": {m: len(by_method[m]) for m in sorted(by_method, key=_method_key)},
        "proposed_wins": wins,
        "proposed_win_fraction": wins / contested if contested else None,
    }


def render_svg(rows: list[dict], title: str = "Rec_cv by method", config_hash: Optional[str] = None) -> str:
    """Bar per method at its mean rec_cv, one dot per seed."""
    by_method = defaultdict(list)
    for r in rows:
        if r["rec_cv"] is not None:
            by_method[r["method"]].append((r["seed"], r["rec_cv"]))
    methods = sorted(by_method, key=_method_key)
    W, H = 480, 320
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = W - left - right, H - top - bottom
    ymax = max([v for m in methods for _, v in by_method[m]] + [1e-12]) * 1.1
    slot = pw / max(1, len(methods))
    bw = slot * 0.5

    def y(v):
        return top + ph - ph * v / ymax

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">']
    if config_hash:
        out.append(f"<!-- config_hash={config_hash} -->")
    out.append(f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>')
    out.append(
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>'
    )
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    for t in range(5):
        v = ymax * t / 4
        out.append(
            f'<text x="{left - 6}" y="{y(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3g}</text>'
        )
        out.append(f'<line x1="{left - 3}" y1="{y(v):.1f}" x2="{left}" y2="{y(v):.1f}" stroke="black"/>')
    for i, m in enumerate(methods):
        vals = [v for _, v in sorted(by_method[m])]
        mean = sum(vals) / len(vals)
        cx = left + slot * (i + 0.5)
        color = COLORS.get(m, "#666666")
        out.append(
            f'<rect class="bar" x="{cx - bw / 2:.1f}" y="{y(mean):.1f}" width="{bw:.1f}" height="{top + ph - y(mean):.1f}" '
            f'fill="{color}" fill-opacity="0.6"><title>{escape(m)} mean {mean:.4g}</title></rect>'
        )
        for j, v in enumerate(vals):
            dx = (j - (len(vals) - 1) / 2) * min(6.0, bw / max(1, len(vals)))
            out.append(f'<circle class="seed" cx="{cx + dx:.1f}" cy="{y(v):.1f}" r="2.5" fill="black"/>')
        out.append(
            f'<text x="{cx:.1f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{escape(m)}</text>'
        )
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" transform="rotate(-90 14 {top + ph / 2:.1f})" text-anchor="middle" '
        'font-family="sans-serif" font-size="11">Rec_cv</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"

"""CSV emission for metrics, sweeps, curves, and histograms.

Every file starts with '#' comment lines carrying the config hash, seed, and
code version, followed by a fixed-order CSV header. Readers skip comments.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import MetricsRecord


def _write_csv(path, header_meta: dict, columns: list[str], rows: list[list]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for key, value in header_meta.items():
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    tmp.replace(path)


def read_csv(path) -> tuple[dict, list[dict]]:
    """Read back a report: (header metadata, row dicts with string values)."""
    meta: dict = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    return meta, list(reader)


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate zero values")
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def format_percent(mean: float, sd: float) -> str:
    return f"{100.0 * mean:.2f} ± {100.0 * sd:.2f}"


def write_metrics(records: list[MetricsRecord], path, *, config_hash: str = "", seed=None) -> None:
    """One row per record, fixed column order, header comment with provenance."""
    far_keys = sorted({f for r in records for f in r.tar_at_far})
    fpir_keys = sorted({f for r in records for f in r.fnir_at_fpir})
    columns = (
        ["tag", "seed", "rank1", "dprime"]
        + [f"tar_at_far_{f:g}" for f in far_keys]
        + [f"fnir_at_fpir_{f:g}" for f in fpir_keys]
    )
    rows = []
    for r in records:
        row = [r.tag, r.seed, _fmt(r.rank1), _fmt(r.dprime)]
        row += [_fmt(r.tar_at_far.get(f)) for f in far_keys]
        row += [_fmt(r.fnir_at_fpir.get(f)) for f in fpir_keys]
        rows.append(row)
    meta = {"config_hash": config_hash, "version": __version__}
    if seed is not None:
        meta["seed"] = seed
    _write_csv(path, meta, columns, rows)


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_sweep(rows: list[dict], path, *, config_hash: str = "") -> None:
    """Fine-tuning sweep table: one row per (fraction, seed) plus a
    'mean +/- sd' aggregate row per fraction, percent-formatted."""
    if not rows:
        raise ValueError("sweep has no rows")
    tags = sorted({k for r in rows for k in r if k not in ("fraction", "seed")})
    columns = ["fraction", "seed"] + tags
    out_rows = []
    fractions = sorted({r["fraction"] for r in rows})
    for frac in fractions:
        frac_rows = [r for r in rows if r["fraction"] == frac]
        for r in sorted(frac_rows, key=lambda r: r["seed"]):
            out_rows.append([frac, r["seed"]] + [_fmt(r.get(t)) for t in tags])
        agg = []
        for t in tags:
            mean, sd = aggregate([r[t] for r in frac_rows if r.get(t) is not None])
            agg.append(format_percent(mean, sd))
        out_rows.append([frac, "mean±sd"] + agg)
    _write_csv(path, {"config_hash": config_hash, "version": __version__}, columns, out_rows)


def write_curve(curve_points: np.ndarray, path, *, columns: list[str], config_hash: str = "") -> None:
    rows = [[repr(float(v)) for v in row] for row in np.asarray(curve_points)]
    _write_csv(path, {"config_hash": config_hash, "version": __version__}, columns, rows)


def write_histograms(scores_by_tag: dict[str, np.ndarray], path, *, bins: int = 40,
                     lo: float = -1.0, hi: float = 1.0, config_hash: str = "") -> None:
    """Shared-bin histograms of score collections, one count column per tag."""
    edges = np.linspace(lo, hi, bins + 1)
    columns = ["bin_left", "bin_right"] + list(scores_by_tag)
    counts = {t: np.histogram(v, bins=edges)[0] for t, v in scores_by_tag.items()}
    rows = []
    for b in range(bins):
        rows.append(
            [repr(float(edges[b])), repr(float(edges[b + 1]))]
            + [int(counts[t][b]) for t in scores_by_tag]
        )
    _write_csv(path, {"config_hash": config_hash, "version": __version__}, columns, rows)


def write_loss_trace(trace_rows: list[dict], path, *, config_hash: str = "") -> None:
    columns = ["phase", "epoch", "loss", "lr"]
    rows = [[r["phase"], r["epoch"], repr(float(r["loss"])), repr(float(r["lr"]))] for r in trace_rows]
    _write_csv(path, {"config_hash": config_hash, "version": __version__}, columns, rows)

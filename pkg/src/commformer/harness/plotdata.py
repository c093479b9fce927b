"""Export a metrics stream as per-metric CSV files and adjacency heatmap SVGs.

Heatmaps follow the usual convention of a white cell for an edge (1) and a
black cell for no edge (0).
"""

from __future__ import annotations

import csv
from pathlib import Path

from commformer.harness.metrics import read_jsonl, resolve_snapshot

CELL = 24
SKIP = ("iteration", "alpha_snapshot_ref")


def flatten(record: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in record.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def heatmap_svg(matrix, cell: int = CELL, title: str = "") -> str:
    n_rows = len(matrix)
    n_cols = len(matrix[0]) if n_rows else 0
    width, height = n_cols * cell, n_rows * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">']
    if title:
        parts.append(f"<title>{title}</title>")
    for i, row in enumerate(matrix):
        for j, value in enumerate(row):
            fill = "#ffffff" if value else "#000000"
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{fill}" stroke="#808080" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export(metrics_path: str | Path, out_dir: str | Path) -> dict:
    """Write ``<metric>.csv`` for each scalar metric and ``frames/*.svg`` per snapshot."""
    metrics_path = Path(metrics_path)
    out_dir = Path(out_dir)
    records = read_jsonl(metrics_path)
    flat = [flatten(r) for r in records]
    names = sorted({k for r in flat for k in r if k not in SKIP})
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in names:
        with open(out_dir / f"{name}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", name])
            for r in flat:
                if name in r:
                    value = r[name]
                    writer.writerow([r["iteration"], "" if value is None else value])
    frames = out_dir / "frames"
    frames.mkdir(exist_ok=True)
    n_frames = 0
    for r in records:
        ref = r.get("alpha_snapshot_ref")
        if not ref:
            continue
        snap = resolve_snapshot(metrics_path, ref)
        (frames / f"adjacency_{r['iteration']:06d}.svg").write_text(
            heatmap_svg(snap["matrix"], title=f"iteration {r['iteration']}"), encoding="utf-8")
        n_frames += 1
    return {"metrics": names, "frames": n_frames}

"""2-D PCA of embeddings and a self-contained HTML scatter report."""

from __future__ import annotations

import csv
import html
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .contour_io import SongRecord, TORI_LABELS

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


class ProjectionError(ValueError):
    pass


@dataclass
class Projection2D:
    song_ids: list
    coords: np.ndarray  # [n, 2]
    components: np.ndarray  # [2, d]
    explained_variance: tuple
    method: str = "pca"

    @property
    def points(self):
        return [(s, float(x), float(y)) for s, (x, y) in zip(self.song_ids, self.coords)]


def _orient(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so its largest-magnitude coordinate is positive."""
    return v if v[int(np.argmax(np.abs(v)))] >= 0 else -v


def top_eigenvectors(cov: np.ndarray, k: int = 2, tol: float = 1e-10, max_iter: int = 10_000):
    """Leading eigenpairs of a symmetric PSD matrix by power iteration with deflation."""
    d = cov.shape[0]
    start_rng = np.random.default_rng(0)
    work = cov.copy()
    vecs, vals = [], []
    for _ in range(k):
        v = start_rng.standard_normal(d)
        for u in vecs:
            v -= (v @ u) * u
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            for u in vecs:
                w -= (w @ u) * u
            norm = np.linalg.norm(w)
            if norm <= 1e-300:
                # no variance left; keep the orthogonalized start direction
                break
            w /= norm
            lam = float(w @ work @ w)
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        vals.append(max(lam, 0.0))
        vecs.append(v)
        work = work - lam * np.outer(v, v)
    return np.array(vecs), np.array(vals)


def pca_2d(song_ids: Sequence[str], features: np.ndarray) -> Projection2D:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) < 3 or X.shape[1] < 2:
        raise ProjectionError("PCA needs at least 3 points of dimension >= 2")
    centered = X - X.mean(axis=0)
    if not np.any(np.abs(centered) > 0):
        raise ProjectionError("all points are identical; nothing to project")
    cov = centered.T @ centered / len(X)
    vecs, vals = top_eigenvectors(cov, 2)
    if vals[1] > vals[0]:
        vecs, vals = vecs[::-1], vals[::-1]
    vecs = np.array([_orient(v) for v in vecs])
    coords = centered @ vecs.T
    return Projection2D(list(song_ids), coords, vecs, (float(vals[0]), float(vals[1])))


def write_projection_csv(path, projection: Projection2D, labels: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["song_id", "x", "y", "label"])
        for sid, x, y in projection.points:
            w.writerow([sid, repr(x), repr(y), labels.get(sid) or ""])


def read_projection_csv(path) -> tuple[Projection2D, dict]:
    ids, coords, labels = [], [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["song_id"])
            coords.append((float(row["x"]), float(row["y"])))
            labels[row["song_id"]] = row["label"] or None
    proj = Projection2D(ids, np.array(coords), np.zeros((2, 0)), (float("nan"), float("nan")))
    return proj, labels


def _color_key(rec: Optional[SongRecord]) -> str:
    if rec is None:
        return "unlabelled"
    return rec.tori_label or rec.region


def export_report(projection: Projection2D, records: Sequence[SongRecord], out_path,
                  title: str = "Folk-song embedding map") -> Path:
    """Write a single HTML file: inline JSON point data plus a static SVG scatter.

    Points are coloured by tori label, falling back to region; points with an
    ``audio_url`` are wrapped in a hyperlink.
    """
    by_id = {r.song_id: r for r in records}
    missing = [s for s in projection.song_ids if s not in by_id]
    if missing:
        raise ProjectionError(f"{len(missing)} projected song(s) not in manifest, e.g. {missing[0]!r}")
    keys = sorted({_color_key(by_id[s]) for s in projection.song_ids},
                  key=lambda k: (TORI_LABELS.index(k) if k in TORI_LABELS else len(TORI_LABELS), k))
    colors = {k: PALETTE[i % len(PALETTE)] for i, k in enumerate(keys)}

    points = []
    for sid, x, y in projection.points:
        rec = by_id[sid]
        entry = {"song_id": sid, "x": x, "y": y, "title": rec.title, "region": rec.region,
                 "label": _color_key(rec)}
        if rec.audio_url:
            entry["audio_url"] = rec.audio_url
        points.append(entry)

    width, height, pad = 800, 600, 40
    xy = projection.coords
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    marks = []
    for p in points:
        px = pad + (p["x"] - lo[0]) / span[0] * (width - 2 * pad)
        py = height - pad - (p["y"] - lo[1]) / span[1] * (height - 2 * pad)
        tip = html.escape(f"{p['title']} ({p['region']}, {p['label']})")
        circle = (f'<circle cx="{px:.2f}" cy="{py:.2f}" r="5" fill="{colors[p["label"]]}" '
                  f'fill-opacity="0.8"><title>{tip}</title></circle>')
        if "audio_url" in p:
            circle = f'<a href="{html.escape(p["audio_url"], quote=True)}">{circle}</a>'
        marks.append(circle)
    legend = "".join(
        f'<li><span style="background:{colors[k]}"></span>{html.escape(k)}</li>' for k in keys
    )
    data = json.dumps(points, sort_keys=True).replace("</", "<\\/")
    doc = f"""<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{html.escape(title)}</title>
<style>
body {{ font-family: sans-serif; margin: 1.5em; }}
ul.legend {{ list-style: none; padding: 0; }}
ul.legend li {{ display: inline-block; margin-right: 1.2em; }}
ul.legend span {{ display: inline-block; width: 0.8em; height: 0.8em; margin-right: 0.3em; }}
svg {{ border: 1px solid #ccc; }}
</style>
</head>
<body>
<h1>{html.escape(title)}</h1>
<p>{len(points)} songs, {html.escape(projection.method)} projection.</p>
<ul class="legend">{legend}</ul>
<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">
{chr(10).join(marks)}
</svg>
<script type="application/json" id="points">{data}</script>
</body>
</html>
"""
    out_path = Path(out_path)
    try:
        out_path.write_text(doc, encoding="utf-8")
    except OSError as exc:
        raise ProjectionError(f"cannot write report to {out_path}: {exc}") from None
    return out_path


def read_report_points(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    start = text.index('<script type="application/json" id="points">') + len(
        '<script type="application/json" id="points">')
    end = text.index("</script>", start)
    return json.loads(text[start:end].replace("<\\/", "</"))

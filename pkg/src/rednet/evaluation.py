"""Boundary benchmark: NMS thinning, tolerance matching, ODS/OIS/AP.

Predictions are thinned by orientation-aware non-maximum suppression, swept
over 99 uniform thresholds, and matched one-to-one against ground truth
within a tolerance radius of maxDist times the image diagonal. Dataset
scores aggregate raw match counts, never per-image F values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from . import data as data_mod
from .checkpoint import load_model
from .model import ModelParameters, crop_to, pad_to_grid, rednet_forward
from .tensor import Tensor

__all__ = [
    "nms",
    "correspond",
    "MatchResult",
    "PRPoint",
    "pr_sweep",
    "default_thresholds",
    "ods",
    "ois",
    "average_precision",
    "aggregate_curve",
    "BenchmarkScores",
    "score_dataset",
    "infer_edge_maps",
    "evaluate",
    "evaluate_edge_maps",
    "write_scores_csv",
    "write_pr_curve_csv",
    "write_per_image_csv",
]

# Conservative multiplier: a pixel survives unless a neighbor along the edge
# normal is clearly larger, so exact plateau ties do not wipe out ridges.
_NMS_MULTIPLIER = 1.01


# ---------------------------------------------------------------------------
# non-maximum suppression
# ---------------------------------------------------------------------------

def _smooth_tri(e: np.ndarray) -> np.ndarray:
    """Separable radius-1 triangle filter ([1, 2, 1]/4 per axis), reflected borders."""
    if e.shape[0] < 2 or e.shape[1] < 2:
        return e.copy()
    p = np.pad(e, 1, mode="reflect")
    s = (p[:-2, :] + 2.0 * p[1:-1, :] + p[2:, :]) / 4.0
    return (s[:, :-2] + 2.0 * s[:, 1:-1] + s[:, 2:]) / 4.0


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros_like(ys, dtype=int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros_like(xs, dtype=int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    dy = ys - y0
    dx = xs - x0
    return (
        img[y0, x0] * (1 - dx) * (1 - dy)
        + img[y0, x1] * dx * (1 - dy)
        + img[y1, x0] * (1 - dx) * dy
        + img[y1, x1] * dx * dy
    )


def nms(edge: np.ndarray) -> np.ndarray:
    """Thin an edge-confidence map along the local edge normal.

    The orientation comes from second derivatives of a triangle-smoothed copy;
    a pixel survives if the smoothed map at +-1 px along the normal (bilinear
    interpolation) does not exceed its own smoothed value. Survivors keep
    their original confidence.
    """
    edge = np.asarray(edge, dtype=np.float64)
    if edge.ndim != 2:
        raise ValueError(f"edge maps are 2-d, got shape {edge.shape}")
    if not edge.any():
        return np.zeros_like(edge)
    smooth = _smooth_tri(edge)
    dy, dx = np.gradient(smooth)
    dyy, dxy = np.gradient(dy)
    _, dxx = np.gradient(dx)
    theta = np.arctan2(dyy * np.sign(-dxy) + 1e-5, dxx)
    theta[theta < 0] += math.pi
    cos = np.cos(theta)
    sin = np.sin(theta)
    h, w = edge.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    keep = np.ones(edge.shape, dtype=bool)
    for d in (-1.0, 1.0):
        sampled = _bilinear(smooth, rr + d * sin, cc + d * cos)
        keep &= smooth * _NMS_MULTIPLIER >= sampled
    return np.where(keep & (edge > 0), edge, 0.0)


# ---------------------------------------------------------------------------
# tolerance-radius correspondence
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    """One-to-one assignment between predicted and ground-truth edge pixels."""

    pairs: Dict[Tuple[int, int], Tuple[int, int]]
    n_pred: int
    n_gt: int

    @property
    def matched_pred(self) -> int:
        return len(self.pairs)

    @property
    def matched_gt(self) -> int:
        return len(self.pairs)

    @property
    def precision(self) -> float:
        return _prf(self.matched_pred, self.n_pred, self.matched_gt, self.n_gt)[0]

    @property
    def recall(self) -> float:
        return _prf(self.matched_pred, self.n_pred, self.matched_gt, self.n_gt)[1]


def _prf(matched_pred: int, n_pred: int, matched_gt: int, n_gt: int) -> Tuple[float, float, float]:
    """Precision/recall/F with the empty-map conventions.

    Both empty: P = R = 1. Empty prediction against real edges: P = 1, R = 0.
    Predictions against an empty ground truth: P = R = 0.
    """
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    if n_pred == 0:
        p, r = 1.0, 0.0
    elif n_gt == 0:
        p, r = 0.0, 0.0
    else:
        p = matched_pred / n_pred
        r = matched_gt / n_gt
    f = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _max_bipartite_matching(adj: List[List[int]], n_right: int) -> List[int]:
    """Maximum-cardinality matching by BFS augmenting paths.

    ``adj[u]`` lists the right nodes reachable from left node u. Returns
    ``match_left`` with the matched right index per left node (-1 if none).
    """
    from collections import deque

    match_left = [-1] * len(adj)
    match_right = [-1] * n_right
    for u0 in range(len(adj)):
        if not adj[u0]:
            continue
        parent: Dict[int, int] = {}
        queue = deque([u0])
        free = -1
        while queue and free < 0:
            u = queue.popleft()
            for v in adj[u]:
                if v in parent:
                    continue
                parent[v] = u
                if match_right[v] == -1:
                    free = v
                    break
                queue.append(match_right[v])
        if free < 0:
            continue
        v = free
        while True:  # flip the alternating path back to u0
            u = parent[v]
            prev = match_left[u]
            match_left[u] = v
            match_right[v] = u
            if u == u0:
                break
            v = prev
    return match_left


def correspond(pred_bin: np.ndarray, gt_bin: np.ndarray, max_dist: float) -> MatchResult:
    """Match predicted edge pixels to ground-truth pixels one-to-one.

    The tolerance radius is ``max_dist * sqrt(H^2 + W^2)``; the assignment is
    a maximum-cardinality matching over all pixel pairs within that radius.
    """
    pred_bin = np.asarray(pred_bin)
    gt_bin = np.asarray(gt_bin)
    if pred_bin.shape != gt_bin.shape:
        raise ValueError(f"map sizes differ: {pred_bin.shape} vs {gt_bin.shape}")
    if max_dist <= 0:
        raise ValueError(f"max_dist must be positive, got {max_dist}")
    h, w = pred_bin.shape
    radius = max_dist * math.hypot(h, w)
    pred_pts = np.argwhere(pred_bin > 0)
    gt_pts = np.argwhere(gt_bin > 0)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return MatchResult(pairs={}, n_pred=len(pred_pts), n_gt=len(gt_pts))
    adj_raw = cKDTree(gt_pts).query_ball_point(pred_pts, radius)
    adj = [sorted(a) for a in adj_raw]
    match_left = _max_bipartite_matching(adj, len(gt_pts))
    pairs = {
        tuple(pred_pts[u]): tuple(gt_pts[v]) for u, v in enumerate(match_left) if v >= 0
    }
    return MatchResult(pairs=pairs, n_pred=len(pred_pts), n_gt=len(gt_pts))


# ---------------------------------------------------------------------------
# threshold sweeps and dataset scores
# ---------------------------------------------------------------------------

@dataclass
class PRPoint:
    threshold: float
    matched_pred: int
    n_pred: int
    matched_gt: int
    n_gt: int

    @property
    def precision(self) -> float:
        return _prf(self.matched_pred, self.n_pred, self.matched_gt, self.n_gt)[0]

    @property
    def recall(self) -> float:
        return _prf(self.matched_pred, self.n_pred, self.matched_gt, self.n_gt)[1]

    @property
    def f(self) -> float:
        return _prf(self.matched_pred, self.n_pred, self.matched_gt, self.n_gt)[2]


def default_thresholds() -> List[float]:
    """99 uniform thresholds strictly inside (0, 1)."""
    return [i / 100.0 for i in range(1, 100)]


def pr_sweep(
    pred: np.ndarray,
    gt: np.ndarray,
    max_dist: float,
    thresholds: Optional[Sequence[float]] = None,
) -> List[PRPoint]:
    """Binarize an NMS-thinned prediction at each threshold and match it."""
    if thresholds is None:
        thresholds = default_thresholds()
    gt_bin = np.asarray(gt) > 0
    out = []
    for t in thresholds:
        m = correspond(np.asarray(pred) >= t, gt_bin, max_dist)
        out.append(
            PRPoint(
                threshold=float(t),
                matched_pred=m.matched_pred,
                n_pred=m.n_pred,
                matched_gt=m.matched_gt,
                n_gt=m.n_gt,
            )
        )
    return out


def _check_same_grid(sweeps: Sequence[Sequence[PRPoint]]) -> None:
    if not sweeps:
        raise ValueError("need at least one image sweep")
    grid = [p.threshold for p in sweeps[0]]
    for s in sweeps[1:]:
        if [p.threshold for p in s] != grid:
            raise ValueError("all images must share the same threshold grid")


def aggregate_curve(sweeps: Sequence[Sequence[PRPoint]]) -> List[PRPoint]:
    """Sum match counts across images at each threshold."""
    _check_same_grid(sweeps)
    out = []
    for i, t in enumerate(p.threshold for p in sweeps[0]):
        out.append(
            PRPoint(
                threshold=t,
                matched_pred=sum(s[i].matched_pred for s in sweeps),
                n_pred=sum(s[i].n_pred for s in sweeps),
                matched_gt=sum(s[i].matched_gt for s in sweeps),
                n_gt=sum(s[i].n_gt for s in sweeps),
            )
        )
    return out


def ods(sweeps: Sequence[Sequence[PRPoint]]) -> Tuple[float, float]:
    """Best fixed threshold over the whole dataset: (threshold, F).

    Counts are aggregated before computing F; ties resolve to the lowest
    threshold.
    """
    curve = aggregate_curve(sweeps)
    fs = [p.f for p in curve]
    best = int(np.argmax(fs))
    return curve[best].threshold, fs[best]


def ois(sweeps: Sequence[Sequence[PRPoint]]) -> float:
    """Per-image best threshold, aggregated: each image contributes the counts
    of its own best-F threshold (ties to the lower threshold)."""
    _check_same_grid(sweeps)
    mp = np_ = mg = ng = 0
    for s in sweeps:
        best = int(np.argmax([p.f for p in s]))
        mp += s[best].matched_pred
        np_ += s[best].n_pred
        mg += s[best].matched_gt
        ng += s[best].n_gt
    return _prf(mp, np_, mg, ng)[2]


def average_precision(sweeps: Sequence[Sequence[PRPoint]]) -> float:
    """Area under the aggregate PR curve by interpolated precision.

    Sampled at recall 0.01..1.00 in steps of 0.01; the interpolated precision
    at recall r is the best precision among sweep points with recall >= r
    (0 when no point reaches r).
    """
    curve = aggregate_curve(sweeps)
    recs = np.array([p.recall for p in curve])
    precs = np.array([p.precision for p in curve])
    total = 0.0
    for i in range(1, 101):
        r = i / 100.0
        reached = recs >= r - 1e-12
        total += float(precs[reached].max()) if reached.any() else 0.0
    return total / 100.0


@dataclass
class BenchmarkScores:
    """The (ODS, OIS, AP) triple plus the aggregate PR curve behind it."""

    ods: float
    ois: float
    ap: float
    ods_threshold: float
    curve: List[PRPoint] = field(default_factory=list)


def score_dataset(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    max_dist: float,
    thresholds: Optional[Sequence[float]] = None,
) -> Tuple[BenchmarkScores, List[List[PRPoint]]]:
    """Sweep every image and aggregate; returns the scores plus per-image sweeps."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    sweeps = [pr_sweep(p, g, max_dist, thresholds) for p, g in zip(preds, gts)]
    t, f = ods(sweeps)
    scores = BenchmarkScores(
        ods=f,
        ois=ois(sweeps),
        ap=average_precision(sweeps),
        ods_threshold=t,
        curve=aggregate_curve(sweeps),
    )
    return scores, sweeps


# ---------------------------------------------------------------------------
# end-to-end evaluation
# ---------------------------------------------------------------------------

def infer_edge_maps(image_hwc: np.ndarray, params: ModelParameters, recursion: int) -> List[np.ndarray]:
    """Run inference on one image of any size; returns all iteration maps, cropped."""
    x = np.ascontiguousarray(np.asarray(image_hwc, dtype=np.float64).transpose(2, 0, 1)[None])
    padded, record = pad_to_grid(x)
    result = rednet_forward(Tensor(padded), params, recursion, "infer")
    return [crop_to(m.data[0, 0], record).astype(np.float64) for m in result.edge_maps]


def _predict_all(dataset, params, recursion, threads):
    def run(pair):
        img, _ = pair
        return infer_edge_maps(img, params, recursion)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, dataset))  # ordered, so scores ignore worker count
    return [run(pair) for pair in dataset]


def evaluate(
    manifest: data_mod.DatasetManifest,
    params_or_checkpoint: Union[ModelParameters, str, Path],
    recursion: int,
    max_dist: Optional[float] = None,
    out_dir: Optional[Union[str, Path]] = None,
    threads: int = 1,
    thresholds: Optional[Sequence[float]] = None,
) -> BenchmarkScores:
    """Full protocol: pad, run the model, take the last map, NMS, sweep, score."""
    if isinstance(params_or_checkpoint, (str, Path)):
        params, _, _ = load_model(params_or_checkpoint)
    else:
        params = params_or_checkpoint
    if max_dist is None:
        max_dist = manifest.max_dist
    dataset = data_mod.load_dataset(manifest)
    maps = _predict_all(dataset, params, recursion, threads)
    preds = [nms(m[-1]) for m in maps]
    gts = [gt for _, gt in dataset]
    scores, sweeps = score_dataset(preds, gts, max_dist, thresholds)
    if out_dir is not None:
        _write_reports(Path(out_dir), manifest, scores, sweeps)
    return scores


def evaluate_edge_maps(
    manifest: data_mod.DatasetManifest,
    edge_dir: Union[str, Path],
    max_dist: Optional[float] = None,
    out_dir: Optional[Union[str, Path]] = None,
    thresholds: Optional[Sequence[float]] = None,
    apply_nms: bool = True,
) -> BenchmarkScores:
    """Score precomputed edge maps (for cross-method comparisons).

    Maps are matched to manifest entries by image file stem and may be 8-bit
    grayscale rasters (confidence = value/255) or raw float maps.
    """
    edge_dir = Path(edge_dir)
    if max_dist is None:
        max_dist = manifest.max_dist
    preds = []
    gts = []
    for img_path, gt_path in manifest.resolved():
        stem = Path(img_path).stem
        png = edge_dir / f"{stem}.png"
        raw = edge_dir / f"{stem}.f32"
        if png.exists():
            pred = data_mod.load_gray(png)
        elif raw.exists():
            pred = data_mod.load_float_map(raw)
        else:
            raise FileNotFoundError(f"no edge map for {stem!r} under {edge_dir} (.png or .f32)")
        preds.append(nms(pred) if apply_nms else pred)
        gts.append(data_mod.load_binary(gt_path))
    scores, sweeps = score_dataset(preds, gts, max_dist, thresholds)
    if out_dir is not None:
        _write_reports(Path(out_dir), manifest, scores, sweeps)
    return scores


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

def write_scores_csv(path, scores: BenchmarkScores) -> Path:
    path = Path(path)
    path.write_text(
        "ods,ois,ap,ods_threshold\n"
        f"{scores.ods:.9f},{scores.ois:.9f},{scores.ap:.9f},{scores.ods_threshold:.3f}\n"
    )
    return path


def write_pr_curve_csv(path, curve: Sequence[PRPoint]) -> Path:
    path = Path(path)
    lines = ["threshold,precision,recall,f"]
    for p in curve:
        lines.append(f"{p.threshold:.3f},{p.precision:.9f},{p.recall:.9f},{p.f:.9f}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_per_image_csv(path, manifest: data_mod.DatasetManifest, sweeps: Sequence[Sequence[PRPoint]]) -> Path:
    path = Path(path)
    lines = ["image,best_threshold,precision,recall,f"]
    for (img_path, _), sweep in zip(manifest.entries, sweeps):
        best = int(np.argmax([p.f for p in sweep]))
        p = sweep[best]
        lines.append(
            f"{img_path},{p.threshold:.3f},{p.precision:.9f},{p.recall:.9f},{p.f:.9f}"
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_reports(out_dir: Path, manifest, scores: BenchmarkScores, sweeps) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out_dir / "scores.csv", scores)
    write_pr_curve_csv(out_dir / "pr_curve.csv", scores.curve)
    write_per_image_csv(out_dir / "per_image.csv", manifest, sweeps)

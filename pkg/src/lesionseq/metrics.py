"""Voxel-overlap and surface-distance metrics for 3D binary masks, plus the
paired signed-rank test used to compare models case by case.

Conventions (fixed here because the literature is not uniform):
  * dice(empty, empty) = 1.0; precision/recall of an empty counterpart are
    1.0 when the other side is empty too, else 0.0.
  * hd95 needs two non-empty masks; otherwise it records NaN as a sentinel
    and aggregation excludes it with an explicit count note.
  * A voxel is surface iff it is foreground with at least one six-connected
    background neighbor, where everything outside the volume is background.
  * hd95 pools both directed surface-distance sets before the percentile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.stats import rankdata

HD95_SENTINEL = float("nan")
EXACT_WILCOXON_MAX_N = 12


@dataclass
class MetricsRecord:
    case_id: str
    dice: float
    hd95: float
    precision: float
    recall: float


def _as_mask(x, name: str) -> np.ndarray:
    m = np.asarray(x)
    if m.dtype != bool:
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"{name} must be binary, found values {vals[:5]}")
        m = m.astype(bool)
    return m


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = _as_mask(pred, "pred")
    g = _as_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: pred {p.shape} vs gt {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    p, g = _check_pair(pred, gt)
    tp = np.count_nonzero(p & g)
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def precision_recall(pred, gt) -> tuple[float, float]:
    p, g = _check_pair(pred, gt)
    tp = np.count_nonzero(p & g)
    np_pred = int(np.count_nonzero(p))
    np_gt = int(np.count_nonzero(g))
    if np_pred == 0:
        precision = 1.0 if np_gt == 0 else 0.0
    else:
        precision = tp / np_pred
    if np_gt == 0:
        recall = 1.0 if np_pred == 0 else 0.0
    else:
        recall = tp / np_gt
    return precision, recall


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a six-connected background neighbor (or on the border)."""
    m = _as_mask(mask, "mask")
    if m.ndim != 3:
        raise ValueError(f"mask must be 3-D, got shape {m.shape}")
    padded = np.pad(m, 1)
    interior = np.ones_like(m)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def _directed_surface_distances(src_surf: np.ndarray, dst_surf: np.ndarray,
                                spacing: tuple[float, ...]) -> np.ndarray:
    # EDT of the complement gives, per voxel, the distance to the nearest
    # destination surface voxel in physical units.
    dt = distance_transform_edt(~dst_surf, sampling=spacing)
    return dt[src_surf]


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled symmetric surface distances, in spacing units.

    Returns NaN if either mask is empty (recorded, excluded from aggregates).
    """
    p, g = _check_pair(pred, gt)
    if spacing is None:
        spacing = (1.0,) * p.ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != p.ndim:
        raise ValueError(f"spacing needs {p.ndim} entries, got {len(spacing)}")
    if not np.any(p) or not np.any(g):
        return HD95_SENTINEL
    ps = surface_voxels(p)
    gs = surface_voxels(g)
    d_pg = _directed_surface_distances(ps, gs, spacing)
    d_gp = _directed_surface_distances(gs, ps, spacing)
    return percentile(np.concatenate([d_pg, d_gp]), 95.0)


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile.

    Rule: with sorted values v[0..n-1] and position p = q/100 * (n-1),
    the result is v[floor(p)] + (p - floor(p)) * (v[floor(p)+1] - v[floor(p)]).
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of empty input")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"q must be in [0, 100], got {q}")
    pos = q / 100.0 * (v.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] + frac * (v[hi] - v[lo]))


def wilcoxon_signed_rank(paired_diffs) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped; needs >= 5 remaining. Returns (W+, p) with
    the exact sign-flip null for n <= 12 and a tie-corrected normal
    approximation beyond that.
    """
    d = np.asarray(paired_diffs, dtype=np.float64).ravel()
    if d.size == 0 or np.all(d == 0):
        raise ValueError("all paired differences are zero: the test is degenerate")
    d = d[d != 0]
    n = d.size
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        p = _exact_two_sided(ranks, w_plus, n)
    else:
        p = _normal_two_sided(np.abs(d), ranks, w_plus, n)
    return w_plus, p


def _exact_two_sided(ranks: np.ndarray, w_plus: float, n: int) -> float:
    # Work on doubled ranks so midranks (k + 0.5) become integers, then count
    # the null distribution of 2*W+ with a subset-sum table.
    r2 = np.rint(ranks * 2).astype(np.int64)
    total = int(r2.sum())
    dist = np.zeros(total + 1, dtype=np.int64)
    dist[0] = 1
    for r in r2:
        dist[r:] = dist[r:] + dist[:-r]
    w2 = int(round(2 * w_plus))
    c_le = int(dist[:w2 + 1].sum())
    c_ge = int(dist[w2:].sum())
    return min(1.0, 2.0 * min(c_le, c_ge) / 2 ** n)


def _normal_two_sided(abs_d: np.ndarray, ranks: np.ndarray, w_plus: float, n: int) -> float:
    mu = n * (n + 1) / 4.0
    _, counts = np.unique(abs_d, return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if sigma2 <= 0:
        raise ValueError("degenerate variance in the normal approximation (all values tied)")
    z = (w_plus - mu) / math.sqrt(sigma2)
    return math.erfc(abs(z) / math.sqrt(2.0))


def aggregate(records: list[MetricsRecord]) -> dict[str, dict[str, float]]:
    """Mean and median rows; hd95 aggregates over non-NaN cases only."""
    if not records:
        raise ValueError("no metric records to aggregate")
    out: dict[str, dict[str, float]] = {}
    cols = {
        "dice": np.array([r.dice for r in records], dtype=np.float64),
        "hd95": np.array([r.hd95 for r in records], dtype=np.float64),
        "precision": np.array([r.precision for r in records], dtype=np.float64),
        "recall": np.array([r.recall for r in records], dtype=np.float64),
    }
    hd_valid = cols["hd95"][~np.isnan(cols["hd95"])]
    for stat, fn in (("mean", np.mean), ("median", np.median)):
        row = {k: float(fn(v)) for k, v in cols.items() if k != "hd95"}
        row["hd95"] = float(fn(hd_valid)) if hd_valid.size else HD95_SENTINEL
        out[stat] = row
    out["hd95_valid_cases"] = {"count": float(hd_valid.size), "total": float(len(records))}
    return out


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    """Deterministic per-case CSV (sorted by case id) with mean/median rows."""
    recs = sorted(records, key=lambda r: r.case_id)
    agg = aggregate(recs)

    def fmt(v: float) -> str:
        return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"

    lines = ["case,dice,hd95,precision,recall"]
    for r in recs:
        lines.append(f"{r.case_id},{fmt(r.dice)},{fmt(r.hd95)},{fmt(r.precision)},{fmt(r.recall)}")
    for stat in ("mean", "median"):
        row = agg[stat]
        lines.append(f"{stat},{fmt(row['dice'])},{fmt(row['hd95'])},"
                     f"{fmt(row['precision'])},{fmt(row['recall'])}")
    note = agg["hd95_valid_cases"]
    lines.append(f"# hd95 aggregated over {int(note['count'])}/{int(note['total'])} cases "
                 "with both masks non-empty")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")

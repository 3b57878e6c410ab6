"""Image-quality and detection metrics, plus the cross-rig experiment grid.

Detection scoring follows the center-distance protocol common to driving
benchmarks: predictions are matched greedily by descending score to the
nearest unmatched ground-truth box of the same class within a 2-D
ground-plane distance threshold, average precision integrates the monotone
precision envelope over recall in [0.1, 1], and the translation error (mATE)
averages the 2-D offset of true positives matched at 2 m.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .dataset import DatasetTables
from .geometry import quat_to_yaw

AP_TRUNCATION = 0.1
DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
ATE_THRESHOLD = 2.0

# experiment grid: rows are training splits A-D, columns validation a-d
SPLIT_NAMES = ("sim-SUV", "sim-SUB", "nerf-SUV", "nerf-SUB")
ROW_LABELS = ("A", "B", "C", "D")
COL_LABELS = ("a", "b", "c", "d")
EVALUATED_CELLS = ("Aa", "Ab", "Ba", "Bb", "Ca", "Cc", "Db", "Dd")

_LUMA = np.array([0.299, 0.587, 0.114])
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------

def psnr(img_a, img_b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images give math.inf.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA):
    offs = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offs ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img @ _LUMA
    return img


def ssim(img_a, img_b) -> float:
    """Structural similarity over an 11x11 Gaussian window, sigma 1.5.

    RGB inputs are converted to luminance first; the score is the mean over
    windows fully inside the image.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = _luminance(a)
    b = _luminance(b)
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(
            f"image too small for an {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    k = _gaussian_kernel()
    mu_a = convolve2d(a, k, mode="valid")
    mu_b = convolve2d(b, k, mode="valid")
    var_a = convolve2d(a * a, k, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, k, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, k, mode="valid") - mu_a * mu_b
    score = ((2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)) \
        / ((mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2))
    return float(score.mean())


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    """One detected (or ground-truth) box in world coordinates."""

    sample_token: str
    category: str
    translation: tuple  # (x, y, z) meters
    size: tuple         # meters, positive
    yaw: float
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")
        if any(s <= 0 for s in self.size):
            raise ValueError("size components must be positive")

    def to_json(self) -> dict:
        return {"sample_token": self.sample_token, "category": self.category,
                "translation": list(self.translation), "size": list(self.size),
                "yaw": self.yaw, "score": self.score}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(sample_token=obj["sample_token"], category=obj["category"],
                   translation=tuple(obj["translation"]),
                   size=tuple(obj["size"]), yaw=float(obj["yaw"]),
                   score=float(obj["score"]))


def save_detections(path, detections) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [d.to_json() for d in detections]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_detections(path) -> tuple:
    payload = json.loads(Path(path).read_text())
    return tuple(Detection.from_json(obj) for obj in payload)


def gt_from_tables(tables: DatasetTables) -> tuple:
    """Ground-truth annotations as Detection records with score 1."""
    return tuple(
        Detection(sample_token=ann.sample_token, category=ann.category_name,
                  translation=tuple(ann.translation), size=tuple(ann.size),
                  yaw=quat_to_yaw(np.asarray(ann.rotation)), score=1.0)
        for ann in tables.sample_annotation)


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching outcome; indices refer to the original input lists."""

    matches: tuple          # (pred_index, gt_index, distance)
    unmatched_preds: tuple  # pred indices of the requested category
    unmatched_gts: tuple    # gt indices of the requested category


def _ground_distance(a: Detection, b: Detection) -> float:
    return math.hypot(a.translation[0] - b.translation[0],
                      a.translation[1] - b.translation[1])


def match_detections(preds, gts, category: str, d_threshold: float) -> MatchResult:
    """Match predictions of one category to ground truth within a sample.

    Predictions are visited by descending score (ties keep input order).
    Each claims the nearest unmatched ground-truth box sharing its
    sample_token within d_threshold meters of 2-D center distance; equal
    distances resolve to the lower ground-truth index.
    """
    pred_idx = [i for i, p in enumerate(preds) if p.category == category]
    gt_idx = [i for i, g in enumerate(gts) if g.category == category]
    order = sorted(pred_idx, key=lambda i: (-preds[i].score, i))
    taken = set()
    matches = []
    for pi in order:
        best = None
        best_d = d_threshold
        for gi in gt_idx:
            if gi in taken or gts[gi].sample_token != preds[pi].sample_token:
                continue
            d = _ground_distance(preds[pi], gts[gi])
            if d <= best_d and (best is None or d < best_d):
                best, best_d = gi, d
        if best is not None:
            taken.add(best)
            matches.append((pi, best, best_d))
    matched_preds = {m[0] for m in matches}
    return MatchResult(
        matches=tuple(matches),
        unmatched_preds=tuple(i for i in pred_idx if i not in matched_preds),
        unmatched_gts=tuple(i for i in gt_idx if i not in taken))


def average_precision(tp_flags, n_gt: int,
                      truncation: float = AP_TRUNCATION):
    """AP from true-positive flags ordered by descending score.

    Operating points with recall or precision below the truncation are
    zeroed, the precision envelope is made monotone from the right, and the
    step function is integrated exactly over recall in [truncation, 1],
    normalized by (1 - truncation). Returns None when there is nothing to
    grade (no ground truth and no predictions).
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    flags = np.asarray(list(tp_flags), dtype=bool)
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    cum_tp = np.cumsum(flags)
    cum_fp = np.cumsum(~flags)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    precision = np.where((recall < truncation) | (precision < truncation),
                         0.0, precision)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    prev = truncation
    for i in range(len(recall)):
        r = min(float(recall[i]), 1.0)
        if r <= prev:
            continue
        total += (r - prev) * float(envelope[i])
        prev = r
        if prev >= 1.0:
            break
    return total / (1.0 - truncation)


@dataclass(frozen=True)
class EvalSummary:
    """Detection scores: per-class AP per threshold, their mean, and the
    translation error of true positives at the 2 m threshold."""

    ap: dict      # class -> {threshold: AP or None}
    m_ap: float
    m_ate: float
    counts: dict  # class -> {"tp", "fp", "fn"} at the 2 m threshold

    def __post_init__(self):
        if not 0.0 <= self.m_ap <= 1.0:
            raise ValueError("m_ap must be in [0, 1]")
        if self.m_ate < 0.0:
            raise ValueError("m_ate must be non-negative")

    def to_json(self) -> dict:
        return {"ap": {c: {str(t): v for t, v in per.items()}
                       for c, per in self.ap.items()},
                "m_ap": self.m_ap, "m_ate": self.m_ate, "counts": self.counts}


def evaluate(preds, tables: DatasetTables, classes=None,
             thresholds=DIST_THRESHOLDS) -> EvalSummary:
    """Score predictions against a split's annotation tables.

    mAP averages AP over every class/threshold pair that has something to
    grade; classes without ground truth or predictions are excluded. mATE
    averages the 2-D offset of true positives at 2 m over classes that have
    at least one, and is 0 when no class does (counts expose that case).
    """
    known = {s.token for s in tables.sample}
    for p in preds:
        if p.sample_token not in known:
            raise ValueError(f"unknown sample_token {p.sample_token!r}")
    gts = gt_from_tables(tables)
    if classes is None:
        classes = sorted({g.category for g in gts}
                         | {p.category for p in preds})

    ap: dict = {}
    counts: dict = {}
    ap_values = []
    ate_per_class = []
    for cls in classes:
        cls_pred = [i for i, p in enumerate(preds) if p.category == cls]
        n_gt = sum(1 for g in gts if g.category == cls)
        order = sorted(cls_pred, key=lambda i: (-preds[i].score, i))
        ap[cls] = {}
        for thr in thresholds:
            res = match_detections(preds, gts, cls, thr)
            matched = {m[0] for m in res.matches}
            value = average_precision([i in matched for i in order], n_gt)
            ap[cls][thr] = value
            if value is not None:
                ap_values.append(value)
        res2 = match_detections(preds, gts, cls, ATE_THRESHOLD)
        counts[cls] = {"tp": len(res2.matches),
                       "fp": len(res2.unmatched_preds),
                       "fn": len(res2.unmatched_gts)}
        if res2.matches:
            ate_per_class.append(
                sum(m[2] for m in res2.matches) / len(res2.matches))
    m_ap = sum(ap_values) / len(ap_values) if ap_values else 0.0
    m_ate = sum(ate_per_class) / len(ate_per_class) if ate_per_class else 0.0
    return EvalSummary(ap=ap, m_ap=m_ap, m_ate=m_ate, counts=counts)


# ---------------------------------------------------------------------------
# Experiment matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentMatrix:
    """4x4 train-versus-validation grid; cells outside the evaluated mask
    stay n/a by design."""

    cells: dict  # "Aa".. -> EvalSummary

    def cell(self, row: str, col: str):
        return self.cells.get(row + col)

    def to_csv(self) -> str:
        lines = ["split," + ",".join(COL_LABELS)]
        for row in ROW_LABELS:
            values = []
            for col in COL_LABELS:
                summary = self.cells.get(row + col)
                values.append("n/a" if summary is None else f"{summary.m_ap:.6f}")
            lines.append(row + "," + ",".join(values))
        return "\n".join(lines) + "\n"

    def to_svg(self, size: int = 360) -> str:
        """Hand-rolled radar chart: one polygon of mAP over the evaluated
        cells, axes at equal angles."""
        half = size / 2.0
        radius = half - 40.0
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
                 f'height="{size}" viewBox="0 0 {size} {size}">']
        for frac in (0.25, 0.5, 0.75, 1.0):
            parts.append(
                f'<circle cx="{half}" cy="{half}" r="{radius * frac:.1f}" '
                'fill="none" stroke="#ccc" stroke-width="1"/>')
        points = []
        for i, cell in enumerate(EVALUATED_CELLS):
            angle = 2 * math.pi * i / len(EVALUATED_CELLS) - math.pi / 2
            ex = half + radius * math.cos(angle)
            ey = half + radius * math.sin(angle)
            parts.append(f'<line x1="{half}" y1="{half}" x2="{ex:.1f}" '
                         f'y2="{ey:.1f}" stroke="#999" stroke-width="1"/>')
            lx = half + (radius + 16) * math.cos(angle)
            ly = half + (radius + 16) * math.sin(angle)
            parts.append(f'<text x="{lx:.1f}" y="{ly:.1f}" font-size="12" '
                         f'text-anchor="middle">{cell}</text>')
            value = self.cells[cell].m_ap
            points.append((half + radius * value * math.cos(angle),
                           half + radius * value * math.sin(angle)))
        poly = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
        parts.append(f'<polygon points="{poly}" fill="#4477aa55" '
                     'stroke="#4477aa" stroke-width="2"/>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def _val_split_of(cell: str) -> str:
    return SPLIT_NAMES[COL_LABELS.index(cell[1])]


def experiment_matrix(manifest: dict, read_tables_fn=None) -> ExperimentMatrix:
    """Evaluate every required grid cell from a manifest.

    manifest["splits"] maps split names to dataset roots; manifest["cells"]
    maps cell labels (e.g. "Ab") to prediction JSON files. Exactly the eight
    evaluated cells must be present; anything in the n/a mask is rejected.
    """
    if read_tables_fn is None:
        from .dataset import read_tables as read_tables_fn
    cells_in = dict(manifest.get("cells", {}))
    splits = dict(manifest.get("splits", {}))
    missing = [c for c in EVALUATED_CELLS if c not in cells_in]
    if missing:
        raise ValueError(f"missing required cells {missing}; "
                         f"the evaluated set is {list(EVALUATED_CELLS)}")
    extra = [c for c in cells_in if c not in EVALUATED_CELLS]
    if extra:
        raise ValueError(f"cells {extra} are n/a by design and cannot be "
                         "evaluated")
    tables_cache: dict = {}
    results = {}
    for cell in EVALUATED_CELLS:
        split = _val_split_of(cell)
        if split not in splits:
            raise ValueError(f"manifest lacks a dataset root for split "
                             f"{split!r} (needed by cell {cell})")
        root = splits[split]
        if root not in tables_cache:
            tables_cache[root] = read_tables_fn(root)
        preds = load_detections(cells_in[cell])
        results[cell] = evaluate(preds, tables_cache[root])
    return ExperimentMatrix(cells=results)

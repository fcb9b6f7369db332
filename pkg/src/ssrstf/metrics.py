"""Pose evaluation: MPJPE (root aligned), Procrustes-aligned P-MPJPE, PCK,
AUC and the per-pose error histogram.

All functions take numpy arrays in millimetres whose last two axes are
(J, 3) and compute in float64.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(0.0, 151.0, 5.0)


class DegeneratePoseError(ValueError):
    pass


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    if pred.ndim < 2 or pred.shape[-1] != 3:
        raise ValueError(f"poses must end in (J, 3), got {pred.shape}")
    return pred, gt


def root_align(pose: np.ndarray, root: int = 0) -> np.ndarray:
    return pose - pose[..., root:root + 1, :]


def joint_errors(pred, gt, root: int = 0) -> np.ndarray:
    """Per-joint Euclidean error after subtracting each pose's root joint."""
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(root_align(pred, root) - root_align(gt, root), axis=-1)


def mpjpe(pred, gt, root: int = 0) -> float:
    """Protocol 1: mean per-joint position error after root alignment."""
    return float(joint_errors(pred, gt, root).mean())


@dataclass
class ProcrustesResult:
    aligned: np.ndarray
    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    fallback: bool = False


def procrustes_align(pred_frame, gt_frame, with_scale: bool = True, root: int = 0) -> ProcrustesResult:
    """Similarity (or, with ``with_scale=False``, rigid) transform of one
    (J, 3) pose onto another in the least-squares sense.

    The rotation comes from the SVD of the cross-covariance with a
    determinant correction so that det(R) = +1.  A rank-deficient
    cross-covariance (e.g. a collapsed prediction) falls back to root
    alignment and sets ``fallback``.
    """
    pred, gt = _pair(pred_frame, gt_frame)
    if pred.ndim != 2:
        raise ValueError(f"procrustes_align works on one (J, 3) frame, got {pred.shape}")
    if pred.shape[0] < 3:
        raise DegeneratePoseError(f"need at least 3 joints, got {pred.shape[0]}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    scale_g = np.sqrt((g0 ** 2).sum())
    sv_g = np.linalg.svd(g0, compute_uv=False)
    if scale_g == 0 or sv_g[1] <= 1e-9 * max(scale_g, 1.0):
        raise DegeneratePoseError("ground-truth joints are collinear or coincident")

    cov = g0.T @ p0
    u, s, vt = np.linalg.svd(cov)
    var_p = (p0 ** 2).sum()
    if var_p == 0 or s[1] <= 1e-12 * s[0]:
        offset = gt[root] - pred[root]
        return ProcrustesResult(pred + offset, np.eye(3), 1.0, offset, fallback=True)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u) * np.linalg.det(vt)) or 1.0
    rot = (u * d) @ vt
    scale = float((s * d).sum() / var_p) if with_scale else 1.0
    trans = mu_g - scale * rot @ mu_p
    aligned = scale * p0 @ rot.T + mu_g
    return ProcrustesResult(aligned, rot, scale, trans)


def p_mpjpe_frames(pred, gt, with_scale: bool = True) -> np.ndarray:
    """Per-pose error after Procrustes alignment; shape = leading axes."""
    pred, gt = _pair(pred, gt)
    lead = pred.shape[:-2]
    flat_p = pred.reshape(-1, *pred.shape[-2:])
    flat_g = gt.reshape(-1, *gt.shape[-2:])
    out = np.empty(len(flat_p))
    for i, (p, g) in enumerate(zip(flat_p, flat_g)):
        aligned = procrustes_align(p, g, with_scale).aligned
        out[i] = np.linalg.norm(aligned - g, axis=-1).mean()
    return out.reshape(lead)


def p_mpjpe(pred, gt, with_scale: bool = True) -> float:
    """Protocol 2: MPJPE after optimal Procrustes alignment of every pose."""
    return float(p_mpjpe_frames(pred, gt, with_scale).mean())


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM, root: int = 0) -> float:
    if threshold_mm <= 0:
        raise ValueError("threshold must be positive")
    hits = joint_errors(pred, gt, root) <= threshold_mm
    return 100.0 * int(np.count_nonzero(hits)) / hits.size


def auc(pred, gt, root: int = 0) -> float:
    """Mean PCK over thresholds 0, 5, ..., 150 mm."""
    return _auc(joint_errors(pred, gt, root).reshape(-1))


def _pck(err: np.ndarray, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    return 100.0 * int(np.count_nonzero(err <= threshold_mm)) / err.size


def _auc(err: np.ndarray) -> float:
    # one rounding of the exact ratio: 100 * hits / (joints * thresholds)
    hits = int(np.count_nonzero(err[None, :] <= AUC_THRESHOLDS_MM[:, None]))
    return 100.0 * hits / (err.size * len(AUC_THRESHOLDS_MM))


@dataclass
class Histogram:
    edges_mm: list[float]
    proportions: list[float]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_start_mm", "bin_end_mm", "proportion"])
            for lo, hi, p in zip(self.edges_mm[:-1], self.edges_mm[1:], self.proportions):
                w.writerow([lo, hi, p])


def error_histogram(pred, gt, bin_width_mm: float = 10.0, root: int = 0) -> Histogram:
    """Share of poses (frames) whose MPJPE falls in each [k*w, (k+1)*w) bin."""
    if bin_width_mm <= 0:
        raise ValueError("bin width must be positive")
    per_pose = joint_errors(pred, gt, root).mean(axis=-1).reshape(-1)
    return histogram_from_errors(per_pose, bin_width_mm)


def histogram_from_errors(per_pose: np.ndarray, bin_width_mm: float) -> Histogram:
    per_pose = np.asarray(per_pose, dtype=np.float64).reshape(-1)
    bins = np.floor(per_pose / bin_width_mm).astype(int)
    n_bins = int(bins.max()) + 1 if bins.size else 1
    counts = np.bincount(bins, minlength=n_bins)
    edges = [float(k * bin_width_mm) for k in range(n_bins + 1)]
    return Histogram(edges, (counts / max(per_pose.size, 1)).tolist())


@dataclass
class EvalReport:
    mpjpe_mm: float
    p_mpjpe_mm: float
    pck_percent: float
    auc_percent: float
    pck_threshold_mm: float = PCK_THRESHOLD_MM
    strict_rigid: bool = False
    per_action: dict[str, dict[str, float]] = field(default_factory=dict)
    histogram: Histogram | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(
    clips: list[tuple[str, np.ndarray, np.ndarray]],
    strict_rigid: bool = False,
    bin_width_mm: float = 10.0,
    root: int = 0,
) -> EvalReport:
    """Aggregate report over ``(label, pred, gt)`` clips of (T, J, 3) poses.

    Aggregates are means over all poses; ``per_action`` groups clips by label.
    """
    if not clips:
        raise ValueError("nothing to evaluate")
    joint_err, pose_p2, groups = [], [], {}
    for label, pred, gt in clips:
        je = joint_errors(pred, gt, root)
        p2 = p_mpjpe_frames(pred, gt, with_scale=not strict_rigid)
        joint_err.append(je.reshape(-1, je.shape[-1]))
        pose_p2.append(p2.reshape(-1))
        groups.setdefault(label, []).append((je, p2))
    je_all = np.concatenate(joint_err)
    p2_all = np.concatenate(pose_p2)

    def summary(je, p2):
        flat = je.reshape(-1)
        return {
            "mpjpe_mm": float(je.mean()),
            "p_mpjpe_mm": float(p2.mean()),
            "pck_percent": _pck(flat),
            "auc_percent": _auc(flat),
        }

    per_action = {
        label: summary(np.concatenate([je.reshape(-1) for je, _ in items]), np.concatenate([p2.reshape(-1) for _, p2 in items]))
        for label, items in groups.items()
    }
    total = summary(je_all, p2_all)
    return EvalReport(
        total["mpjpe_mm"],
        total["p_mpjpe_mm"],
        total["pck_percent"],
        total["auc_percent"],
        strict_rigid=strict_rigid,
        per_action=per_action,
        histogram=histogram_from_errors(je_all.mean(axis=-1), bin_width_mm),
    )

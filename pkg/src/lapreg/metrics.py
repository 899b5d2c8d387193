"""Alignment metrics (RMSE, soft Dice, TRE, folding) and uncertainty calibration."""

import csv
import json
from dataclasses import dataclass

import numpy as np
import torch

from .field_ops import crop_interior, jacobian_determinant, sample_at, warp

DICE_EPS = 1e-6


@dataclass
class Calibration:
    """Signed correlation; ``degenerate`` marks a constant input (value forced to 0)."""
    value: float
    degenerate: bool = False

    def __float__(self):
        return float(self.value)


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def rmse(a, b):
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def one_hot(labels, label_set):
    labels = _np(labels)
    return np.stack([(labels == k).astype(np.float64) for k in label_set])


def warp_labels_soft(labels, phi, label_set):
    """Linearly warp each label indicator; returns ``(n_labels, *S)`` fractions."""
    onehot = torch.as_tensor(one_hot(labels, label_set))[None]
    field = torch.as_tensor(_np(phi), dtype=torch.float64)[None]
    channels = [warp(onehot[:, i:i + 1], field)[0, 0] for i in range(onehot.shape[1])]
    return torch.stack(channels).numpy()


def soft_dsc(warped, target):
    """Mean soft Dice over channels of two ``(n_labels, *S)`` fraction maps."""
    p, q = _np(warped).astype(np.float64), _np(target).astype(np.float64)
    if p.shape != q.shape:
        raise ValueError("label sets / shapes differ")
    axes = tuple(range(1, p.ndim))
    inter = (p * q).sum(axis=axes)
    denom = p.sum(axis=axes) + q.sum(axis=axes) + DICE_EPS
    return float(np.mean(2 * inter / denom))


def map_points(points, phi):
    """``x + u(x)`` with ``u`` linearly interpolated at voxel ``points`` (N, D)."""
    pts = np.asarray(points, dtype=np.float64)
    field = torch.as_tensor(_np(phi), dtype=torch.float64)[None]
    u = sample_at(field, torch.as_tensor(pts)[None])[0].numpy().T
    return pts + u


def _paired(landmarks_fixed, landmarks_moving):
    fixed, moving = landmarks_fixed.as_dict(), landmarks_moving.as_dict()
    if set(fixed) != set(moving):
        raise ValueError("landmark ids do not match between fixed and moving sets")
    ids = sorted(fixed)
    return ids, np.array([fixed[i] for i in ids]), np.array([moving[i] for i in ids])


def tre(landmarks_fixed, landmarks_moving, phi, spacing):
    """Mean physical distance between mapped fixed landmarks and their moving partners."""
    _, x, y = _paired(landmarks_fixed, landmarks_moving)
    mapped = map_points(x, phi)
    diff = (mapped - y) * np.asarray(spacing, dtype=np.float64)
    return float(np.mean(np.sqrt((diff ** 2).sum(axis=1))))


def percent_nonpositive_jacobian(phi, margin=1):
    field = torch.as_tensor(_np(phi), dtype=torch.float64)[None]
    det = crop_interior(jacobian_determinant(field), field.dim() - 2, margin)
    return float(100.0 * (det <= 0).sum().item() / det.numel())


def pearson(a, b):
    """Signed global correlation of two arrays; 0 (flagged) if either is constant."""
    a = _np(a).astype(np.float64).ravel()
    b = _np(b).astype(np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    # relative threshold: rounding noise on a constant map is not a signal
    if na <= 1e-12 * np.linalg.norm(a) or nb <= 1e-12 * np.linalg.norm(b) or na == 0 or nb == 0:
        return Calibration(0.0, True)
    return Calibration(float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0)), False)


def calibration_ncc_vx(sample_images, fixed):
    """Correlation between per-voxel sample variance and per-voxel mean squared error."""
    imgs = np.stack([_np(s) for s in sample_images]).astype(np.float64)
    if imgs.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    f = _np(fixed).astype(np.float64)
    var = imgs.var(axis=0, ddof=1)
    err = ((imgs - f[None]) ** 2).mean(axis=0)
    return pearson(var, err)


def calibration_ncc_lm(sample_fields, landmarks_fixed, landmarks_moving, spacing):
    """Correlation across landmarks between positional variance and squared error of the mean."""
    if len(sample_fields) < 2:
        raise ValueError("need at least 2 samples")
    ids, x, y = _paired(landmarks_fixed, landmarks_moving)
    if len(ids) < 3:
        raise ValueError("calibration over landmarks needs at least 3 landmarks")
    sp = np.asarray(spacing, dtype=np.float64)
    mapped = np.stack([map_points(x, phi) * sp for phi in sample_fields])  # (N, P, D)
    variance = mapped.var(axis=0, ddof=1).sum(axis=1)
    sq_err = ((mapped.mean(axis=0) - y * sp) ** 2).sum(axis=1)
    return pearson(variance, sq_err)


# --------------------------------------------------------------------------
# per-pair evaluation and reports

REPORT_COLUMNS = ["pair_id", "rmse", "dsc", "tre_mm", "pct_nonpos_jac", "ncc_vx", "ncc_lm",
                  "n_samples", "seed"]


def evaluate_pair(moving, fixed, result, samples=None, seed=None):
    """Metric row for one registered pair; absent annotations give ``nan``."""
    spacing = fixed.image.spacing
    row = {"pair_id": f"{moving.id}->{fixed.id}",
           "rmse": rmse(result.f_hat0, fixed.image.data),
           "dsc": float("nan"), "tre_mm": float("nan"),
           "pct_nonpos_jac": percent_nonpositive_jacobian(result.phi0),
           "ncc_vx": float("nan"), "ncc_lm": float("nan"),
           "n_samples": len(samples) if samples else 0, "seed": seed}
    if moving.segmentation is not None and fixed.segmentation is not None:
        labels = sorted(set(moving.segmentation.label_set) | set(fixed.segmentation.label_set))
        if labels:
            warped = warp_labels_soft(moving.segmentation.labels, result.phi0, labels)
            row["dsc"] = soft_dsc(warped, one_hot(fixed.segmentation.labels, labels))
    if moving.landmarks is not None and fixed.landmarks is not None:
        row["tre_mm"] = tre(fixed.landmarks, moving.landmarks, result.phi0, spacing)
    if samples:
        row["ncc_vx"] = calibration_ncc_vx([s.f_hat0 for s in samples], fixed.image.data).value
        if moving.landmarks is not None and fixed.landmarks is not None and len(fixed.landmarks) >= 3:
            row["ncc_lm"] = calibration_ncc_lm([s.phi0 for s in samples], fixed.landmarks,
                                               moving.landmarks, spacing).value
    return row


def summarize(rows):
    """Mean and standard deviation per metric column, ignoring absent values."""
    out = {}
    for col in REPORT_COLUMNS[1:7]:
        vals = np.array([r[col] for r in rows], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[col] = {"mean": None, "std": None, "n": 0, "formatted": "-"}
        else:
            mean, std = float(vals.mean()), float(vals.std())
            out[col] = {"mean": mean, "std": std, "n": int(vals.size),
                        "formatted": f"{mean:.3f} ± {std:.3f}"}
    return out


def write_report(rows, csv_path, json_path):
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow(["" if (isinstance(r[c], float) and not np.isfinite(r[c])) or r[c] is None
                             else r[c] for c in REPORT_COLUMNS])
    summary = summarize(rows)
    with open(json_path, "w") as fh:
        json.dump({"n_pairs": len(rows), "metrics": summary}, fh, indent=2, sort_keys=True)
    return summary

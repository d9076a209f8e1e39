"""Evaluation metrics: joint position errors, rotation distance, FID and R-precision."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    features: np.ndarray  # (N, D)
    label: str = "real"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.ndim != 2:
            raise ValueError(f"features must be (N, D), got {self.features.shape}")


def _same_shape(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[-1] != 3:
        raise ValueError(f"positions must end in 3 coordinates, got {pred.shape}")
    return pred, gt


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance over frames and joints, inputs (T, J, 3)."""
    pred, gt = _same_shape(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def mpjpe_no_translation(pred, gt) -> float:
    """MPJPE after subtracting each sequence's per-frame root (joint 0) position."""
    pred, gt = _same_shape(pred, gt)
    return mpjpe(pred - pred[..., :1, :], gt - gt[..., :1, :])


def _check_rotation(R: np.ndarray, tol: float = 1e-5) -> None:
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    if err > tol or np.any(np.abs(np.linalg.det(R) - 1) > tol):
        raise ValueError(f"not a rotation matrix (orthonormality error {err:.3g})")


def geodesic_distance(pred_rot, gt_rot) -> np.ndarray | float:
    """Angle in radians in [0, pi] between rotations; broadcasts over leading axes."""
    a = np.asarray(pred_rot, dtype=np.float64)
    b = np.asarray(gt_rot, dtype=np.float64)
    _check_rotation(a)
    _check_rotation(b)
    tr = np.einsum("...ij,...ij->...", a, b)  # trace(a @ b.T)
    ang = np.arccos(np.clip((tr - 1) / 2, -1.0, 1.0))
    return float(ang) if np.ndim(ang) == 0 else ang


def mean_geodesic_degrees(pred_rot, gt_rot) -> float:
    return float(np.degrees(np.mean(geodesic_distance(pred_rot, gt_rot))))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Fréchet distance between Gaussian fits (unbiased N-1 covariances).

    The cross term uses ``sqrt(S_r^1/2 S_g S_r^1/2)``, which is symmetric, has
    the same trace as ``(S_r S_g)^1/2`` and keeps ``fid(a, b) == fid(b, a)``.
    """
    x, y = real.features, gen.features
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("FID needs at least 2 samples per set")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite features")
    mu_r, mu_g = x.mean(0), y.mean(0)
    s_r = np.atleast_2d(np.cov(x, rowvar=False))
    s_g = np.atleast_2d(np.cov(y, rowvar=False))
    root_r = _psd_sqrt(s_r)
    inner = root_r @ s_g @ root_r
    asym = np.abs(inner - inner.T).max()
    if asym > 1e-8 * max(1.0, np.abs(inner).max()):
        log.debug("FID inner product asymmetry %.3g", asym)
    cross = np.trace(_psd_sqrt(inner))
    val = float(np.sum((mu_r - mu_g) ** 2) + np.trace(s_r) + np.trace(s_g) - 2 * cross)
    return max(val, 0.0)


def r_precision(similarity, R: int) -> float:
    """Fraction of rows whose diagonal entry ranks within the top R (ties: lower column first)."""
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity must be square, got {s.shape}")
    N = s.shape[0]
    if not 1 <= R <= N:
        raise ValueError(f"R must be in [1, {N}], got {R}")
    diag = np.diag(s)[:, None]
    cols = np.arange(N)
    ahead = (s > diag) | ((s == diag) & (cols[None, :] < cols[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < R))


def motion_features(theta: np.ndarray) -> np.ndarray:
    """Per-sequence statistics of a (T, J, 9) array pooled over joints.

    A built-in stand-in for a learned feature extractor; values are not
    comparable with numbers computed on learned embeddings.
    """
    th = np.asarray(theta, dtype=np.float64)
    vel = np.diff(th, axis=0) if th.shape[0] > 1 else np.zeros_like(th)
    parts = [
        th.mean(axis=(0, 1)),
        th.std(axis=(0, 1)),
        np.linalg.norm(vel, axis=-1).mean(axis=(0, 1), keepdims=True).ravel(),
        np.abs(th[:, 0, :3]).mean(axis=0),
    ]
    return np.concatenate(parts)

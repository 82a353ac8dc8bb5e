"""Reconstruction quality metrics and rigid cloud alignment.

Precision, recall, and F-score compare a reconstructed cloud against
ground truth after both are resampled on a 0.05 m grid; a match is a
neighbor within 0.1 m. Resampling happens in each cloud's own principal
frame, so applying one rigid transform to both clouds leaves every metric
unchanged. Alignment, when frames do not already coincide, is plain
point-to-point ICP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentFailed, EmptyInput
from .geometry import PointCloud
from .prediction import chamfer_distance  # noqa: F401  (re-export for scoring)

RESAMPLE_VOXEL_M = 0.05
MATCH_THRESHOLD_M = 0.1


@dataclass(frozen=True)
class QualityReport:
    """Percent precision/recall/F-score at the stated scales."""

    precision: float
    recall: float
    f_score: float
    resample_voxel: float = RESAMPLE_VOXEL_M
    match_threshold: float = MATCH_THRESHOLD_M

    def to_text(self) -> str:
        return "\n".join(
            [
                f"precision: {self.precision:.4f}",
                f"recall: {self.recall:.4f}",
                f"f_score: {self.f_score:.4f}",
                f"voxel: {self.resample_voxel:.3f}",
                f"threshold: {self.match_threshold:.3f}",
            ]
        )


@dataclass(frozen=True)
class RigidTransform:
    """Rotation-then-translation map p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def _canonical_frame(points: np.ndarray):
    """Centroid and right-handed principal axes with covariant signs.

    Signs come from the third moment along each axis, so the frame turns
    with the cloud under any rigid motion; that makes grid resampling
    commute with common transforms.
    """
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / max(len(points), 1)
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1].T.copy()  # rows, descending variance
    for i in range(3):
        m3 = float(np.sum((centered @ axes[i]) ** 3))
        if abs(m3) > 1e-12:
            if m3 < 0.0:
                axes[i] = -axes[i]
        elif axes[i][np.argmax(np.abs(axes[i]))] < 0.0:
            axes[i] = -axes[i]
    # right-handedness: rebuild the last axis from the first two
    axes[2] = np.cross(axes[0], axes[1])
    return centroid, axes


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One centroid per occupied cell of a grid in the principal frame."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) == 0:
        return points.reshape(0, 3)
    centroid, axes = _canonical_frame(points)
    local = (points - centroid) @ axes.T
    keys = np.floor(local / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, local)
    reps = sums / counts[:, None]
    return reps @ axes + centroid


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    return np.atleast_2d(pts)


def evaluate_model(
    reconstructed,
    ground_truth,
    resample_voxel: float = RESAMPLE_VOXEL_M,
    match_threshold: float = MATCH_THRESHOLD_M,
) -> QualityReport:
    """Precision/recall/F-score of a reconstruction against ground truth.

    Precision asks how much of the reconstruction is near true surface;
    recall asks how much true surface was reconstructed; the F-score is
    their harmonic mean, zero when both sides miss entirely.
    """
    rec = _as_points(reconstructed)
    gt = _as_points(ground_truth)
    if len(rec) == 0 or len(gt) == 0:
        raise EmptyInput("both clouds must be non-empty")
    rec_s = voxel_downsample(rec, resample_voxel)
    gt_s = voxel_downsample(gt, resample_voxel)
    d_rec, _ = cKDTree(gt_s).query(rec_s)
    d_gt, _ = cKDTree(rec_s).query(gt_s)
    precision = 100.0 * float(np.count_nonzero(d_rec < match_threshold)) / len(rec_s)
    recall = 100.0 * float(np.count_nonzero(d_gt < match_threshold)) / len(gt_s)
    if precision + recall == 0.0:
        f_score = 0.0
    else:
        f_score = 2.0 * precision * recall / (precision + recall)
    return QualityReport(precision, recall, f_score, resample_voxel, match_threshold)


def _best_rigid(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation and translation taking src onto dst."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = dc - r @ sc
    return r, t


def align_clouds(a, b, max_iterations: int = 50) -> RigidTransform:
    """Point-to-point ICP estimating the rigid map from a onto b.

    Iterates nearest-neighbor matching and the closed-form rigid update
    until the RMS residual settles below 1e-6 change or the iteration cap.
    Five consecutive genuine RMS increases abort the attempt, since that
    means matching and fitting are fighting each other.
    """
    src = _as_points(a)
    dst = _as_points(b)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyInput("both clouds must be non-empty")
    tree = cKDTree(dst)
    rot = np.eye(3)
    tra = np.zeros(3)
    moved = src
    prev_rms = np.inf
    rising = 0
    for _ in range(max_iterations):
        dist, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(dist**2)))
        if rms > prev_rms + 1e-12:
            rising += 1
            if rising >= 5:
                raise AlignmentFailed(f"RMS residual rising for {rising} iterations")
        else:
            rising = 0
        if abs(prev_rms - rms) < 1e-6:
            break
        prev_rms = rms
        r, t = _best_rigid(src, dst[idx])
        rot, tra = r, t
        moved = src @ rot.T + tra
    return RigidTransform(rot, tra)

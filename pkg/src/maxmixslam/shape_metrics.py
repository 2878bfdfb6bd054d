"""Point-set pose metrics: ADD, ADD-S, winner-takes-all scoring, AUC.

All distances are in meters.  The accuracy-vs-threshold area (AUC) is
reported on [0, 1]; multiply by 100 for the percent convention common in
the pose-estimation literature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pose_algebra import Pose3

# ADD-S falls back to uniform subsampling above this many model points so
# the O(n^2) nearest-neighbor search stays desk-scale.
DEFAULT_ADDS_POINT_CAP = 512


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Named 3D point set (meters).

    At least one finite point is required.  Metrics are only
    discriminative across all 6 pose degrees of freedom when the set has
    >= 4 non-coplanar points; degenerate (e.g. planar) sets are allowed
    and simply carry the corresponding symmetry.
    """

    id: int
    name: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3).copy()
        if pts.shape[0] < 1:
            raise ValueError("object model needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("object model has non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class HypothesisSet:
    """N candidate poses of one object in one camera frame.

    Weights default to uniform 1/N; arbitrary nonnegative weights are
    normalized to sum to one.
    """

    object_id: int
    hypotheses: tuple
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        hyps = tuple(self.hypotheses)
        if len(hyps) < 1:
            raise ValueError("hypothesis set needs at least one member")
        if not all(isinstance(h, Pose3) for h in hyps):
            raise TypeError("hypotheses must be Pose3")
        if self.weights is None:
            w = np.full(len(hyps), 1.0 / len(hyps))
        else:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1).copy()
            if w.shape[0] != len(hyps):
                raise ValueError("weight count does not match hypothesis count")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            total = w.sum()
            if total <= 0:
                raise ValueError("weights must not all be zero")
            w = w / total
        w.flags.writeable = False
        object.__setattr__(self, "hypotheses", hyps)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.hypotheses)


def load_xyz_points(path) -> np.ndarray:
    """Read a plain-text XYZ file: one `x y z` triple per line, meters.

    Blank lines and `#` comments are allowed.
    """
    pts = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            pts.append([float(p) for p in parts])
    if not pts:
        raise ValueError(f"{path}: no points found")
    return np.array(pts, dtype=np.float64)


def _subsample(points: np.ndarray, cap) -> np.ndarray:
    if cap is None or points.shape[0] <= cap:
        return points
    idx = np.linspace(0, points.shape[0] - 1, cap).round().astype(int)
    return points[idx]


def add_error(est: Pose3, gt: Pose3, model: ObjectModel) -> float:
    """Mean per-point distance between the two transformed point sets."""
    if len(model) < 1:
        raise ValueError("empty object model")
    d = est.transform_points(model.points) - gt.transform_points(model.points)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def adds_error(
    est: Pose3, gt: Pose3, model: ObjectModel, max_points: int = DEFAULT_ADDS_POINT_CAP
) -> float:
    """Symmetric variant: each estimated point matches its nearest
    groundtruth-transformed point (brute-force O(n^2))."""
    if len(model) < 1:
        raise ValueError("empty object model")
    pts = _subsample(model.points, max_points)
    p_est = est.transform_points(pts)
    p_gt = gt.transform_points(pts)
    diff = p_est[:, None, :] - p_gt[None, :, :]
    dists = np.linalg.norm(diff, axis=2)
    return float(np.mean(dists.min(axis=1)))


def best_hypothesis(
    hyps: HypothesisSet, gt: Pose3, model: ObjectModel, metric: str = "add"
):
    """Winner-takes-all scoring: (argmin index, its metric value).

    metric is "add" or "adds"; ties break toward the lowest index.
    """
    if metric == "add":
        fn = add_error
    elif metric == "adds":
        fn = adds_error
    else:
        raise ValueError(f"unknown metric {metric!r}, expected 'add' or 'adds'")
    errors = np.array([fn(h, gt, model) for h in hyps.hypotheses])
    idx = int(np.argmin(errors))
    return idx, float(errors[idx])


def auc(errors, threshold: float = 0.10) -> float:
    """Normalized area under the accuracy-vs-threshold curve on [0, threshold].

    Closed form: mean over samples of (1 - min(e, threshold)/threshold),
    exact for the empirical step curve.
    """
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("empty error list")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and nonnegative")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return float(np.mean(1.0 - np.minimum(e, threshold) / threshold))

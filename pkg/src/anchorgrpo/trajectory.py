"""Trajectory geometry: noise models, K-means anchors and the diversity metric.

Trajectories are handled as ``(N_f, 2)`` float arrays of ego-frame waypoints
(x forward, y left, meters). :class:`Trajectory` wraps one with its ``dt`` for
I/O and invariant checks; the numeric functions accept either.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

N_F = 8
DT = 0.5


@dataclass(eq=False)
class Trajectory:
    wp: np.ndarray
    dt: float = DT

    def __post_init__(self):
        self.wp = np.asarray(self.wp, dtype=np.float64).reshape(-1, 2)
        if self.wp.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 waypoints")
        if not np.all(np.isfinite(self.wp)):
            raise ValueError("trajectory has non-finite coordinates")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return self.wp.shape[0]

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.dt == other.dt
                and np.array_equal(self.wp, other.wp))

    def to_json(self):
        return json.dumps({"wp": [float(v) for v in self.wp.ravel()], "dt": float(self.dt)})

    def to_dict(self):
        return {"wp": [float(v) for v in self.wp.ravel()], "dt": float(self.dt)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["wp"], dtype=np.float64).reshape(-1, 2), float(d["dt"]))

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _points(traj):
    return traj.wp if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)


def _like(traj, pts):
    return Trajectory(pts, traj.dt) if isinstance(traj, Trajectory) else pts


def apply_multiplicative_noise(traj, eps_long, eps_lat):
    """Scale x by ``1 + eps_long`` and y by ``1 + eps_lat``.

    Broadcasts: ``traj`` may be ``(..., N, 2)`` with ``eps_*`` of shape ``(...)``.
    """
    eps_long = np.asarray(eps_long, dtype=np.float64)
    eps_lat = np.asarray(eps_lat, dtype=np.float64)
    if np.any(~np.isfinite(eps_long)) or np.any(~np.isfinite(eps_lat)):
        raise ValueError("multiplicative noise must be finite")
    if np.any(eps_long <= -1) or np.any(eps_lat <= -1):
        raise ValueError("multiplicative noise must stay above -1")
    pts = _points(traj)
    scale = np.stack([1.0 + eps_long, 1.0 + eps_lat], axis=-1)[..., None, :]
    return _like(traj, pts * scale)


def apply_additive_noise(traj, per_point_noise):
    pts = _points(traj)
    noise = np.asarray(per_point_noise, dtype=np.float64)
    n = pts.shape[-2]
    if noise.shape[-1] != 2 * n and noise.shape[-2:] != (n, 2):
        raise ValueError(f"additive noise must hold {2 * n} values per trajectory, got {noise.shape}")
    return _like(traj, pts + noise.reshape(pts.shape))


def matched_additive_std(traj, mul_std):
    """Per-coordinate additive std with the same expected energy as the
    two-scalar multiplicative noise of std ``mul_std``."""
    pts = _points(traj)
    n_coord = pts.shape[-2] * 2
    return mul_std * np.sqrt((pts ** 2).sum(axis=(-2, -1)) / n_coord)


def second_difference_max(traj):
    pts = _points(traj)
    d2 = pts[..., 2:, :] - 2 * pts[..., 1:-1, :] + pts[..., :-2, :]
    return np.linalg.norm(d2, axis=-1).max(axis=-1)


@dataclass(eq=False)
class AnchorSet:
    anchors: np.ndarray  # (K, N_f, 2)
    counts: np.ndarray   # (K,)

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.counts = np.asarray(self.counts)
        if self.anchors.ndim != 3 or self.anchors.shape[0] < 1:
            raise ValueError("anchor set must be a non-empty (K, N_f, 2) array")
        flat = self.anchors.reshape(len(self.anchors), -1)
        if len(np.unique(flat, axis=0)) != len(flat):
            raise ValueError("anchors must be pairwise distinct")

    def __len__(self):
        return self.anchors.shape[0]


def _inertia(x, w, centers, labels):
    return float((w * ((x - centers[labels]) ** 2).sum(axis=1)).sum())


def kmeans_anchors(expert_trajs, n_anchor, seed=0, max_iter=100, return_history=False):
    """Weighted Lloyd's K-means with k-means++ seeding on flattened trajectories.

    Identical trajectories are merged into one weighted point first, so
    duplicating the dataset leaves the result unchanged.
    """
    pts = np.stack([_points(t) for t in expert_trajs])
    n_f = pts.shape[1]
    x, w = np.unique(pts.reshape(len(pts), -1), axis=0, return_counts=True)
    w = w.astype(np.float64)
    if len(x) < n_anchor:
        raise ValueError(f"only {len(x)} distinct trajectories for {n_anchor} anchors")
    rng = np.random.default_rng(seed)

    centers = np.empty((n_anchor, x.shape[1]))
    centers[0] = x[rng.choice(len(x), p=w / w.sum())]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, n_anchor):
        p = w * d2
        idx = rng.choice(len(x), p=p / p.sum())
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))

    history = []
    labels = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)
        history.append(_inertia(x, w, centers, new_labels))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(n_anchor):
            mask = labels == c
            if not mask.any():
                far = int(np.argmax(((x - centers[labels]) ** 2).sum(axis=1)))
                labels[far] = c
                mask = labels == c
            centers[c] = (w[mask, None] * x[mask]).sum(axis=0) / w[mask].sum()
        history.append(_inertia(x, w, centers, labels))
    counts = np.bincount(labels, weights=w, minlength=n_anchor).astype(int)
    result = AnchorSet(centers.reshape(n_anchor, n_f, 2), counts)
    return (result, history) if return_history else result


def diversity(trajs, eps=1e-6, per_waypoint=False):
    pts = np.stack([_points(t) for t in trajs]) if isinstance(trajs, (list, tuple)) else np.asarray(trajs)
    m = pts.shape[0]
    if m < 2:
        raise ValueError("diversity needs at least two trajectories")
    iu, ju = np.triu_indices(m, k=1)
    pair = np.linalg.norm(pts[iu] - pts[ju], axis=-1).sum(axis=0)  # (N,)
    raw = 2.0 * pair / (m * (m - 1))
    scale = np.linalg.norm(pts, axis=-1).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(raw == 0, 0.0, raw / (eps + scale))
    div_n = np.minimum(1.0, ratio)
    return div_n if per_waypoint else float(div_n.mean())

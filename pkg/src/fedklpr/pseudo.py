"""DBSCAN pseudo-labels and per-camera proxy (sub-cluster) assignment."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class EmptyEpoch(Exception):
    """Every sample was an outlier; the caller should skip this epoch."""


def pairwise_sq_dist(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Label each point with a cluster id (discovery order) or -1 for noise.

    Neighbourhoods are closed Euclidean balls and include the point itself.
    Points are scanned in index order, so a border point reachable from two
    clusters goes to whichever cluster reaches it first.
    """
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("points must be a non-empty 2-d array")
    n = len(x)
    adj = pairwise_sq_dist(x) <= eps * eps
    neighbours = [np.flatnonzero(row) for row in adj]
    core = np.array([len(nb) >= min_pts for nb in neighbours])

    labels = np.full(n, -1, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque(neighbours[i])
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            if core[j]:
                queue.extend(neighbours[j])
        cluster += 1
    return labels


@dataclass
class PseudoLabeling:
    pid: np.ndarray            # per sample, -1 = outlier
    proxy: np.ndarray          # per sample, -1 for outliers
    camera: np.ndarray         # per sample
    proxy_camera: np.ndarray   # per proxy
    proxy_pid: np.ndarray      # per proxy
    cams: np.ndarray           # sorted distinct cameras that own proxies
    Z_c: np.ndarray            # proxy count, aligned with ``cams``

    @property
    def Z(self) -> int:
        return len(self.proxy_camera)

    def offset(self, cam: int) -> int:
        """Index of the first proxy belonging to ``cam``."""
        k = int(np.searchsorted(self.cams, cam))
        return int(self.Z_c[:k].sum())

    def subset(self, idx) -> PseudoLabeling:
        """Restrict per-sample arrays to ``idx``; proxy tables are shared."""
        idx = np.asarray(idx)
        return PseudoLabeling(
            self.pid[idx], self.proxy[idx], self.camera[idx],
            self.proxy_camera, self.proxy_pid, self.cams, self.Z_c,
        )

    def camera_slice(self, cam: int) -> slice:
        k = int(np.searchsorted(self.cams, cam))
        a = int(self.Z_c[:k].sum())
        return slice(a, a + int(self.Z_c[k]))


def assign_proxies(pids, cameras) -> PseudoLabeling:
    pids = np.asarray(pids, dtype=np.int64)
    cameras = np.asarray(cameras, dtype=np.int64)
    if pids.shape != cameras.shape:
        raise ValueError("pids and cameras must have the same length")
    keep = pids >= 0
    if not keep.any():
        raise EmptyEpoch("all samples are outliers")
    pairs = sorted(set(zip(cameras[keep].tolist(), pids[keep].tolist())))
    index = {pair: z for z, pair in enumerate(pairs)}
    proxy = np.full(len(pids), -1, dtype=np.int64)
    for i in np.flatnonzero(keep):
        proxy[i] = index[(int(cameras[i]), int(pids[i]))]
    proxy_camera = np.array([c for c, _ in pairs], dtype=np.int64)
    proxy_pid = np.array([p for _, p in pairs], dtype=np.int64)
    cams, z_c = np.unique(proxy_camera, return_counts=True)
    return PseudoLabeling(pids.copy(), proxy, cameras.copy(), proxy_camera, proxy_pid, cams, z_c)

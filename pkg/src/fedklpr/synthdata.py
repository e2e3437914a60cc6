"""Synthetic non-IID re-ID style clients and retrieval metrics.

Each client owns disjoint identities. An image is a camera-specific affine
transform of its identity's latent vector plus Gaussian noise; cameras,
identity counts and identity means differ per client (feature, quantity and
label skew).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2


@dataclass
class SkewSpec:
    input_dim: int = 32
    train_ids: list[int] = field(default_factory=lambda: [40, 36, 14, 26, 20, 16, 18, 12])
    cameras: list[int] = field(default_factory=lambda: [8, 6, 2, 2, 2, 2, 2, 2])
    imgs_per_cam: tuple[int, int] = (2, 4)
    test_ids: int = 40
    val_fraction: float = 0.1
    min_val_ids: int = 8
    cam_shift: float = 0.3
    client_shift: float = 0.5
    noise: float = 0.3
    seed: int = 0
    single_camera: bool = False

    def __post_init__(self):
        self.imgs_per_cam = tuple(self.imgs_per_cam)
        if not self.train_ids or min(self.train_ids) < 1:
            raise ValueError("every client needs at least one identity")
        if not self.cameras or min(self.cameras) < 1:
            raise ValueError("camera counts must be positive")
        if min(self.cameras) < 2 and not self.single_camera:
            raise ValueError("camera count must be >= 2 unless single_camera is set")
        lo, hi = self.imgs_per_cam
        if lo < 1 or hi < lo:
            raise ValueError("imgs_per_cam must satisfy 1 <= lo <= hi")
        if self.test_ids < 1 or self.input_dim < 1 or self.min_val_ids < 1:
            raise ValueError("test_ids, input_dim and min_val_ids must be positive")
        if min(self.cam_shift, self.client_shift, self.noise) < 0:
            raise ValueError("skew magnitudes must be >= 0")


@dataclass
class ClientDataset:
    client_id: int
    x: np.ndarray
    identity: np.ndarray
    camera: np.ndarray
    split: np.ndarray        # TRAIN / VAL / TEST
    is_query: np.ndarray     # meaningful for VAL and TEST rows

    def indices(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.split == part)

    @property
    def n_train(self) -> int:
        return int(np.count_nonzero(self.split == TRAIN))


def _client(spec: SkewSpec, k: int, id_start: int) -> ClientDataset:
    rng = np.random.default_rng([spec.seed, k])
    D = spec.input_dim
    n_cams = spec.cameras[k % len(spec.cameras)]
    n_train = spec.train_ids[k % len(spec.train_ids)]
    n_val = max(spec.min_val_ids, int(round(spec.val_fraction * (n_train + spec.test_ids))))
    n_ids = n_train + n_val + spec.test_ids

    centre = spec.client_shift * rng.standard_normal(D)
    A = np.eye(D) + spec.cam_shift * rng.standard_normal((n_cams, D, D)) / np.sqrt(D)
    b = spec.cam_shift * rng.standard_normal((n_cams, D))
    latents = centre + rng.standard_normal((n_ids, D))

    lo, hi = spec.imgs_per_cam
    rows, ids, cams, split, query = [], [], [], [], []
    for j in range(n_ids):
        part = TRAIN if j < n_train else VAL if j < n_train + n_val else TEST
        lo_j = max(lo, 2) if part != TRAIN else lo
        k_cams = int(rng.integers(min(2, n_cams), n_cams + 1))
        chosen = np.sort(rng.choice(n_cams, size=k_cams, replace=False))
        for c in chosen:
            m = int(rng.integers(lo_j, max(hi, lo_j) + 1))
            noise = spec.noise * rng.standard_normal((m, D))
            rows.append(latents[j] @ A[c].T + b[c] + noise)
            ids.extend([id_start + j] * m)
            cams.extend([int(c)] * m)
            split.extend([part] * m)
            query.extend([part != TRAIN] + [False] * (m - 1))
    return ClientDataset(
        k,
        np.concatenate(rows),
        np.array(ids, dtype=np.int64),
        np.array(cams, dtype=np.int64),
        np.array(split, dtype=np.int64),
        np.array(query, dtype=bool),
    )


def generate_clients(spec: SkewSpec, K: int) -> list[ClientDataset]:
    if K < 1:
        raise ValueError("K must be >= 1")
    out, start = [], 0
    for k in range(K):
        ds = _client(spec, k, start)
        start = int(ds.identity.max()) + 1
        out.append(ds)
    return out


class UndefinedMetric(ValueError):
    """No query has a valid cross-camera match."""


def evaluate_retrieval(embeddings, identities, cameras, is_query, is_gallery=None):
    """Rank-1, mAP and CMC for cosine-similarity retrieval.

    Rows flagged ``is_query`` are queries; the gallery is ``is_gallery`` or, by
    default, every non-query row. For each query, gallery entries with the
    same identity and camera are dropped (which also drops the query itself
    when the two sets overlap); queries left without a true match are ignored.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    e = e / np.where(norms < 1e-12, 1.0, norms)
    identities = np.asarray(identities)
    cameras = np.asarray(cameras)
    is_query = np.asarray(is_query, dtype=bool)
    is_gallery = ~is_query if is_gallery is None else np.asarray(is_gallery, dtype=bool)
    q_idx, g_idx = np.flatnonzero(is_query), np.flatnonzero(is_gallery)
    sims = e[q_idx] @ e[g_idx].T
    g_id, g_cam = identities[g_idx], cameras[g_idx]

    cmc = np.zeros(max(len(g_idx), 1))
    aps, valid = [], 0
    for row, q in enumerate(q_idx):
        keep = ~((g_id == identities[q]) & (g_cam == cameras[q]))
        order = np.argsort(-sims[row][keep], kind="stable")
        hits = (g_id[keep] == identities[q])[order]
        if not hits.any():
            continue
        valid += 1
        ranks = np.flatnonzero(hits) + 1
        cmc[ranks[0] - 1:] += 1
        aps.append(np.mean(np.arange(1, len(ranks) + 1) / ranks))
    if valid == 0:
        raise UndefinedMetric("no query has a valid match")
    cmc /= valid
    return float(cmc[0]), float(np.mean(aps)), cmc


def save_dataset(ds: ClientDataset, path, spec: SkewSpec | None = None) -> None:
    """Write the feature matrix as ``.npy`` plus a JSON manifest sidecar."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), ds.x.astype("<f8"))
    manifest = {
        "client_id": ds.client_id,
        "rows": int(ds.x.shape[0]),
        "cols": int(ds.x.shape[1]),
        "dtype": "<f8",
        "identity": ds.identity.tolist(),
        "camera": ds.camera.tolist(),
        "split": ds.split.tolist(),
        "is_query": ds.is_query.astype(int).tolist(),
        "spec": asdict(spec) if spec is not None else None,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> ClientDataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    x = np.load(path.with_suffix(".npy"))
    return ClientDataset(
        meta["client_id"], x,
        np.array(meta["identity"], dtype=np.int64),
        np.array(meta["camera"], dtype=np.int64),
        np.array(meta["split"], dtype=np.int64),
        np.array(meta["is_query"], dtype=bool),
    )

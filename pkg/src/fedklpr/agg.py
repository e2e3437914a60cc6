"""Server-side client weighting and sparse-aware aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import embedding_distribution, kl_divergence
from .nnet import forward
from .params import ParamVector, check_structure

UNIFORM_EPS = 1e-12
STRATEGIES = ("fedavg", "cosine", "klpwa")


@dataclass
class ClientReport:
    client_id: int
    round: int
    params: ParamVector     # float32, zero where the mask is cleared
    mask: PruneMask
    pruning_ratio: float
    klaw_raw: float
    dataset_size: int | None = None


@dataclass
class AggConfig:
    gamma_agg: float = 0.5
    delta_agg: float = 0.5
    strategy: str = "klpwa"
    sas_enabled: bool = True
    empty_rule: str = "retain"   # or "zero"

    def __post_init__(self):
        if self.gamma_agg < 0 or self.delta_agg < 0:
            raise ValueError("gamma_agg and delta_agg must be >= 0")
        if abs(self.gamma_agg + self.delta_agg - 1.0) > 1e-9:
            raise ValueError(
                f"gamma_agg + delta_agg must equal 1 (got {self.gamma_agg} + {self.delta_agg})"
            )
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.empty_rule not in ("retain", "zero"):
            raise ValueError(f"unknown empty_rule {self.empty_rule!r}")


def feature_distribution(params: ParamVector, cfg, batch) -> np.ndarray:
    if len(batch) == 0:
        raise ValueError("empty validation batch")
    return embedding_distribution(forward(params, cfg, batch))


def klaw_raw(prev_model: ParamVector, new_model: ParamVector, cfg, batch) -> float:
    check_structure(prev_model, new_model)
    return kl_divergence(feature_distribution(new_model, cfg, batch),
                         feature_distribution(prev_model, cfg, batch))


def _normalize(raw, name) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError(f"{name}: empty input")
    if (raw < 0).any() or not np.isfinite(raw).all():
        raise ValueError(f"{name}: inputs must be finite and non-negative")
    total = raw.sum()
    if total < UNIFORM_EPS:
        return np.full(raw.size, 1.0 / raw.size)
    return raw / total


def klaw_weights(raw) -> np.ndarray:
    return _normalize(raw, "klaw_weights")


def praw_weights(ratios) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    if ((r < 0) | (r > 1)).any():
        raise ValueError("pruning ratios must lie in [0, 1]")
    return _normalize(r * r, "praw_weights")


def klpwa_client_weights(klaw, praw, cfg: AggConfig) -> np.ndarray:
    klaw, praw = np.asarray(klaw, float), np.asarray(praw, float)
    if klaw.shape != praw.shape:
        raise ValueError("weight vectors differ in length")
    return cfg.gamma_agg * klaw + cfg.delta_agg * praw


def cosine_weights(prev_feats, new_feats) -> np.ndarray:
    """Weights proportional to each client's cosine distance between rounds."""
    a = np.asarray(prev_feats, dtype=np.float64)
    b = np.asarray(new_feats, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("need matching (K, d) feature matrices")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = np.sum(a * b, axis=1) / np.maximum(na * nb, 1e-300)
    dist = np.clip(1.0 - cos, 0.0, 2.0)
    return _normalize(dist, "cosine_weights")


def _stack(reports):
    if not reports:
        raise ValueError("no reports to aggregate")
    ref = reports[0].params
    for r in reports:
        check_structure(ref, r.params)
        check_structure(ref, r.mask)
    vals = np.stack([r.params.flat().astype(np.float64) for r in reports])
    masks = np.stack([r.mask.flat() for r in reports])
    return ref, vals, masks


def sas_aggregate(reports, weights, prev_global: ParamVector, empty_rule: str = "retain") -> ParamVector:
    """Per-coordinate weighted mean over the clients that kept the coordinate."""
    ref, vals, masks = _stack(reports)
    check_structure(ref, prev_global)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(reports),):
        raise ValueError("one weight per report required")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"weights sum to {w.sum()}, expected 1")
    active = masks * w[:, None]
    den = active.sum(axis=0)
    num = (active * vals).sum(axis=0)
    has = den > 0
    fallback = prev_global.flat().astype(np.float64) if empty_rule == "retain" else np.zeros(ref.size())
    out = np.where(has, num / np.where(has, den, 1.0), fallback)
    return ref.astype(np.float64).with_flat(out)


def dense_aggregate(reports, weights) -> ParamVector:
    ref, vals, _ = _stack(reports)
    w = np.asarray(weights, dtype=np.float64)
    return ref.astype(np.float64).with_flat(w @ vals)


def fedavg_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if (sizes <= 0).any():
        raise ValueError("dataset sizes must be positive")
    return sizes / sizes.sum()


def fedavg_aggregate(reports) -> ParamVector:
    if any(r.dataset_size is None for r in reports):
        raise ValueError("FedAvg needs every client's dataset size")
    return dense_aggregate(reports, fedavg_weights([r.dataset_size for r in reports]))

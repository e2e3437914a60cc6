"""Proxy memory bank and the local training objective.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the batch
embeddings. The memory bank is treated as a constant during differentiation.
Positive/negative proxy sets are selected from the current similarities and
then held fixed, so gradients are exact almost everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pseudo import PseudoLabeling

PROB_FLOOR = 1e-8


@dataclass
class MemoryBank:
    features: np.ndarray   # (Z, d); row z is the proxy vector M[z]
    mu: float = 0.2
    tau: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")

    @property
    def Z(self) -> int:
        return self.features.shape[0]

    def update_batch(self, proxies, feats) -> None:
        """In-place momentum update, one sample at a time in batch order."""
        for z, f in zip(proxies, feats):
            self.features[z] = _momentum_column(self.features[z], f, self.mu)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma_ca: float = 0.5
    delta_kl: float = 0.13
    K_hard: int = 50

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_ca", "delta_kl"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.K_hard < 1:
            raise ValueError("K_hard must be >= 1")


def _momentum_column(col, feature, mu):
    new = mu * col + (1.0 - mu) * np.asarray(feature, dtype=np.float64)
    n = np.linalg.norm(new)
    if n < 1e-12:
        return np.asarray(feature, dtype=np.float64).copy()
    return new / n


def memory_update(bank: MemoryBank, proxy: int, feature) -> MemoryBank:
    if not 0 <= proxy < bank.Z:
        raise IndexError(f"proxy {proxy} out of range for Z={bank.Z}")
    features = bank.features.copy()
    features[proxy] = _momentum_column(features[proxy], feature, bank.mu)
    return MemoryBank(features, bank.mu, bank.tau)


def build_bank(embeddings: np.ndarray, labeling: PseudoLabeling, mu=0.2, tau=0.05) -> MemoryBank:
    """Initialise each proxy with the unit-normalised mean of its members."""
    d = embeddings.shape[1]
    feats = np.zeros((labeling.Z, d))
    np.add.at(feats, labeling.proxy[labeling.proxy >= 0], embeddings[labeling.proxy >= 0])
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = np.where(norms > 1e-12, feats / np.maximum(norms, 1e-12), 0.0)
    feats[norms[:, 0] <= 1e-12, 0] = 1.0
    return MemoryBank(feats, mu, tau)


def _logsumexp(x):
    m = x.max()
    return m + np.log(np.exp(x - m).sum())


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check(bank, emb, lab):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != bank.features.shape[1]:
        raise ValueError("embedding dimension does not match the memory bank")
    if len(emb) != len(lab.proxy):
        raise ValueError("labeling does not match the batch size")
    if bank.Z != lab.Z:
        raise ValueError("memory bank size does not match the labeling")
    if (lab.proxy < 0).any():
        raise ValueError("batch contains outliers without a proxy")
    return emb


def _pos_neg_term(logits, pos, neg):
    """-mean_p log softmax_{pos+neg}(logits)[p] and its gradient wrt logits."""
    idx = np.concatenate([pos, neg])
    sub = logits[idx]
    lse = _logsumexp(sub)
    value = lse - logits[pos].mean()
    g = np.zeros_like(logits)
    g[idx] = np.exp(sub - lse)
    g[pos] -= 1.0 / len(pos)
    return value, g


def _hardest(logits, candidates, k):
    if len(candidates) == 0 or k <= 0:
        return candidates[:0]
    order = np.argsort(-logits[candidates], kind="stable")
    return candidates[order[:k]]


def intra_loss(bank: MemoryBank, embeddings, labeling: PseudoLabeling):
    """Softmax over own-camera proxies; per-camera means summed over cameras."""
    emb = _check(bank, embeddings, labeling)
    logits = emb @ bank.features.T / bank.tau
    glog = np.zeros_like(logits)
    value = 0.0
    for cam in np.unique(labeling.camera):
        if cam not in labeling.cams:
            raise ValueError(f"camera {cam} has no proxies")
        rows = np.flatnonzero(labeling.camera == cam)
        s = labeling.camera_slice(int(cam))
        local = logits[np.ix_(rows, np.arange(s.start, s.stop))]
        target = labeling.proxy[rows] - s.start
        if (target < 0).any() or (target >= s.stop - s.start).any():
            raise ValueError("sample proxy does not belong to its camera")
        p = _softmax(local)
        lp = np.log(p[np.arange(len(rows)), target])
        value += -lp.mean()
        p[np.arange(len(rows)), target] -= 1.0
        glog[np.ix_(rows, np.arange(s.start, s.stop))] = p / len(rows)
    return float(value), glog @ bank.features / bank.tau


def inter_loss(bank: MemoryBank, embeddings, labeling: PseudoLabeling, K_hard: int = 50):
    """Positives: every proxy of the sample's pid. Negatives: K hardest other-pid proxies."""
    emb = _check(bank, embeddings, labeling)
    B = len(emb)
    logits = emb @ bank.features.T / bank.tau
    glog = np.zeros_like(logits)
    value = 0.0
    all_z = np.arange(bank.Z)
    for i in range(B):
        same = labeling.proxy_pid == labeling.pid[i]
        pos = all_z[same]
        neg = _hardest(logits[i], all_z[~same], K_hard)
        v, g = _pos_neg_term(logits[i], pos, neg)
        value += v / B
        glog[i] = g / B
    return float(value), glog @ bank.features / bank.tau


def camera_aware_loss(bank: MemoryBank, embeddings, labeling: PseudoLabeling, K_hard: int = 50):
    """Positives: own proxy plus the most similar proxy of every other camera."""
    emb = _check(bank, embeddings, labeling)
    B = len(emb)
    logits = emb @ bank.features.T / bank.tau
    glog = np.zeros_like(logits)
    value = 0.0
    for i in range(B):
        own = int(labeling.proxy[i])
        pos = [own]
        for cam in labeling.cams:
            if cam == labeling.camera[i]:
                continue
            s = labeling.camera_slice(int(cam))
            pos.append(s.start + int(np.argmax(logits[i, s])))
        pos = np.array(pos, dtype=np.int64)
        rest = np.setdiff1d(np.arange(bank.Z), pos)
        neg = _hardest(logits[i], rest, K_hard)
        v, g = _pos_neg_term(logits[i], pos, neg)
        value += v / B
        glog[i] = g / B
    return float(value), glog @ bank.features / bank.tau


def _clamp_normalize(p):
    c = np.maximum(p, PROB_FLOOR)
    return c / c.sum()


def kl_divergence(P, Q) -> float:
    """KL(P || Q) in nats after flooring both inputs at 1e-8 and renormalising."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("distributions differ in length")
    p, q = _clamp_normalize(P), _clamp_normalize(Q)
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def embedding_distribution(embeddings) -> np.ndarray:
    """Batch mean of per-row softmax over embedding coordinates, floored and renormalised."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) == 0:
        raise ValueError("need a non-empty batch of embeddings")
    return _clamp_normalize(_softmax(e).mean(axis=0))


def kll_from_embeddings(local_emb, ref_emb):
    """KL(dist(local) || dist(ref)) and its gradient wrt ``local_emb``."""
    e = np.asarray(local_emb, dtype=np.float64)
    B = len(e)
    s = _softmax(e)
    raw = s.mean(axis=0)
    c = np.maximum(raw, PROB_FLOOR)
    S = c.sum()
    p = c / S
    q = embedding_distribution(ref_emb)
    if p.shape != q.shape:
        raise ValueError("embedding dimensions differ")
    value = float(np.sum(p * np.log(p / q)))
    dL_dp = np.log(p / q) + 1.0
    # p = c / S
    dL_dc = dL_dp / S - np.dot(dL_dp, c) / (S * S)
    dL_draw = np.where(raw > PROB_FLOOR, dL_dc, 0.0)
    # raw = mean_i softmax(e_i)
    grad = s * (dL_draw[None, :] - (s @ dL_draw)[:, None]) / B
    return value, grad


def kll_term(local_params, reference_params, cfg, batch):
    from .nnet import forward

    local = forward(local_params, cfg, batch)
    ref = forward(reference_params, cfg, batch)
    return kll_from_embeddings(local, ref)


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum of ``{"intra", "inter", "ca", "kl"}`` -> (value, grad) terms."""
    coef = {"intra": weights.alpha, "inter": weights.beta, "ca": weights.gamma_ca, "kl": weights.delta_kl}
    unknown = set(terms) - set(coef)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    value, grad = 0.0, None
    for name, (v, g) in terms.items():
        w = coef[name]
        value += w * v
        grad = w * g if grad is None else grad + w * g
    return value, grad

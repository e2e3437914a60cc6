"""Small MLP embedding network with hand-written backprop and Adam.

Layers are stored as ``fc{i}.weight`` with shape ``(fan_in, fan_out)`` (prunable)
and ``fc{i}.bias`` (never pruned). The output is L2-normalised per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import Layer, ParamVector, PruneMask, StructuralMismatch, apply_mask, check_structure

ZERO_NORM = 1e-12


@dataclass
class NetConfig:
    input_dim: int = 32
    hidden_dims: list[int] = field(default_factory=lambda: [128])
    embed_dim: int = 32
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if not self.hidden_dims:
            raise ValueError("at least one hidden layer is required")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("dimensions must be positive")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.embed_dim]


def init_params(cfg: NetConfig, rng: np.random.Generator | None = None) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    layers = []
    dims = cfg.dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        layers.append(Layer(f"fc{i}.weight", (fan_in, fan_out), w.reshape(-1), True))
        layers.append(Layer(f"fc{i}.bias", (fan_out,), np.zeros(fan_out), False))
    return ParamVector(layers)


def _weights(params: ParamVector, cfg: NetConfig):
    dims = cfg.dims
    if len(params.layers) != 2 * (len(dims) - 1):
        raise StructuralMismatch("parameter vector does not match NetConfig")
    out = []
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        w, b = params.layers[2 * i], params.layers[2 * i + 1]
        if w.shape != (fi, fo) or b.shape != (fo,):
            raise StructuralMismatch(f"layer {i} shape mismatch")
        out.append((w.values.astype(np.float64).reshape(fi, fo), b.values.astype(np.float64)))
    return out


def _act(cfg: NetConfig, a: np.ndarray) -> np.ndarray:
    return np.tanh(a) if cfg.activation == "tanh" else np.maximum(a, 0.0)


def _act_grad(cfg: NetConfig, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    return 1.0 - h * h if cfg.activation == "tanh" else (a > 0).astype(np.float64)


def _forward_cache(params: ParamVector, cfg: NetConfig, batch: np.ndarray):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"batch must have shape (n, {cfg.input_dim}), got {x.shape}")
    ws = _weights(params, cfg)
    hs, pre = [x], []
    h = x
    for i, (w, b) in enumerate(ws):
        a = h @ w + b
        pre.append(a)
        h = _act(cfg, a) if i < len(ws) - 1 else a
        hs.append(h)
    out = hs[-1]
    norms = np.linalg.norm(out, axis=1)
    degenerate = norms < ZERO_NORM
    emb = out / np.where(degenerate, 1.0, norms)[:, None]
    emb[degenerate] = 0.0
    emb[degenerate, 0] = 1.0
    return emb, (ws, hs, pre, norms, degenerate)


def forward(params: ParamVector, cfg: NetConfig, batch: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings, one row per input row."""
    return _forward_cache(params, cfg, batch)[0]


def backward(params: ParamVector, cfg: NetConfig, batch: np.ndarray, upstream: np.ndarray) -> ParamVector:
    """Gradient of ``sum(upstream * forward(params, batch))`` wrt every parameter."""
    emb, (ws, hs, pre, norms, degenerate) = _forward_cache(params, cfg, batch)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != emb.shape:
        raise ValueError(f"upstream shape {g.shape} != embeddings {emb.shape}")
    # d(o/|o|)/do = (I - e e^T) / |o|; the e_1 substitute is constant
    safe = np.where(degenerate, 1.0, norms)
    g = (g - np.sum(g * emb, axis=1, keepdims=True) * emb) / safe[:, None]
    g[degenerate] = 0.0
    grads = []
    for i in range(len(ws) - 1, -1, -1):
        w, _ = ws[i]
        if i < len(ws) - 1:
            g = g * _act_grad(cfg, pre[i], hs[i + 1])
        grads.append((hs[i].T @ g, g.sum(axis=0)))
        g = g @ w.T
    grads.reverse()
    flat = np.concatenate([np.concatenate([gw.reshape(-1), gb]) for gw, gb in grads])
    return params.astype(np.float64).with_flat(flat)


@dataclass
class AdamState:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def for_model(cls, model: ParamVector, **kw) -> AdamState:
        n = model.size()
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(state: AdamState, model: ParamVector, grad: ParamVector, mask: PruneMask):
    """One bias-corrected Adam update followed by re-masking.

    Returns ``(new_model, new_state)``; inputs are left untouched.
    """
    check_structure(model, grad)
    check_structure(model, mask)
    n = model.size()
    m = np.zeros(n) if state.m is None else state.m
    v = np.zeros(n) if state.v is None else state.v
    if m.size != n or v.size != n:
        raise StructuralMismatch("Adam moments do not match the model")
    g = grad.flat().astype(np.float64)
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta = model.flat().astype(np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return apply_mask(model.astype(np.float64).with_flat(theta), mask), new_state

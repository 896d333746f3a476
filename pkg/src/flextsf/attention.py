"""Causal self-attention over [leader, patches, dummy] with continuous-time rotary Q/K."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore, linear
from .tensor import Tensor


@dataclass(frozen=True)
class RotaryConfig:
    head_dim: int = 16
    base: float = 10000.0
    tau_scale: float = 1.0

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError("rotary modulation needs an even head dimension")

    @property
    def theta(self) -> np.ndarray:
        j = np.arange(self.head_dim // 2)
        return self.base ** (-2.0 * j / self.head_dim)

    def angles(self, tau: np.ndarray) -> np.ndarray:
        return (np.asarray(tau, float) * self.tau_scale)[..., None] * self.theta


def rotary_modulate(x, tau, cfg: RotaryConfig) -> Tensor:
    """Rotate each pair (x[2j], x[2j+1]) of the last axis by ``tau * theta_j``."""
    x = T.as_tensor(x)
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"expected head_dim {cfg.head_dim}, got {x.shape[-1]}")
    return T.rotary(x, cfg.angles(tau))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class AttentionLayer:
    """Pre-norm multi-head attention block followed by a tanh feed-forward block."""

    def __init__(self, store: ParamStore, prefix: str, d_model: int, heads: int,
                 ff_mult: int = 4):
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.heads, self.head_dim = heads, d_model // heads
        add = store.add
        self.ln1 = (add(f"{prefix}.ln1.g", (d_model,), init="ones"),
                    add(f"{prefix}.ln1.b", (d_model,), init="zeros"))
        self.wq = (add(f"{prefix}.q.w", (d_model, d_model)), add(f"{prefix}.q.b", (d_model,), init="zeros"))
        self.wk = (add(f"{prefix}.k.w", (d_model, d_model)), add(f"{prefix}.k.b", (d_model,), init="zeros"))
        self.wv = (add(f"{prefix}.v.w", (d_model, d_model)), add(f"{prefix}.v.b", (d_model,), init="zeros"))
        self.wo = (add(f"{prefix}.o.w", (d_model, d_model), scale=0.5),
                   add(f"{prefix}.o.b", (d_model,), init="zeros"))
        self.ln2 = (add(f"{prefix}.ln2.g", (d_model,), init="ones"),
                    add(f"{prefix}.ln2.b", (d_model,), init="zeros"))
        hidden = ff_mult * d_model
        self.ff1 = (add(f"{prefix}.ff1.w", (d_model, hidden)), add(f"{prefix}.ff1.b", (hidden,), init="zeros"))
        self.ff2 = (add(f"{prefix}.ff2.w", (hidden, d_model), scale=0.5),
                    add(f"{prefix}.ff2.b", (d_model,), init="zeros"))

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def logits(self, a: Tensor, tau: np.ndarray | None, rotary: RotaryConfig | None
               ) -> tuple[Tensor, Tensor]:
        h = T.layer_norm(a, *self.ln1)
        q = self._split(linear(h, *self.wq))
        k = self._split(linear(h, *self.wk))
        if rotary is not None:
            ang = rotary.angles(tau)[:, None, :, :]
            q, k = T.rotary(q, ang), T.rotary(k, ang)
        return (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim)), h

    def __call__(self, a: Tensor, tau: np.ndarray | None, mask: np.ndarray,
                 rotary: RotaryConfig | None) -> Tensor:
        b, n, d = a.shape
        scores, h = self.logits(a, tau, rotary)
        mask = np.broadcast_to(mask, (b, n, n))[:, None, :, :]
        att = T.softmax_lastdim(scores, mask)
        v = self._split(linear(h, *self.wv))
        if rotary is not None:
            ang = rotary.angles(tau)[:, None, :, :]
            mixed = T.rotary(att @ T.rotary(v, ang), -ang)
        else:
            mixed = att @ v
        ctx = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        a = a + linear(ctx, *self.wo)
        h2 = T.layer_norm(a, *self.ln2)
        return a + linear(T.tanh(linear(h2, *self.ff1)), *self.ff2)


class AttentionStack:
    def __init__(self, store: ParamStore, d_model: int, heads: int, layers: int,
                 rotary: RotaryConfig | None):
        if layers < 1:
            raise ValueError("need at least one attention layer")
        self.layers = [AttentionLayer(store, f"attn.layer{i}", d_model, heads)
                       for i in range(layers)]
        self.rotary = rotary

    def __call__(self, a0: Tensor, tau: np.ndarray | None, mask: np.ndarray) -> Tensor:
        """Outputs at every node; the same ``tau`` modulates Q/K in every layer."""
        a = a0
        for layer in self.layers:
            a = layer(a, tau, mask, self.rotary)
        return a

    def all_logits(self, a0: Tensor, tau: np.ndarray | None, mask: np.ndarray) -> list[np.ndarray]:
        """Pre-mask attention logits of each layer (diagnostics)."""
        out = []
        a = a0
        with T.no_grad():
            for layer in self.layers:
                scores, _ = layer.logits(a, tau, self.rotary)
                out.append(scores.data)
                a = layer(a, tau, mask, self.rotary)
        return out

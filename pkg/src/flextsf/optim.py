"""Adam/AdamW, learning-rate schedules and the seeded random stream."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, diagnostics

#: Philox4x64 is counter-based: a (seed, counter) pair fully determines every
#: draw, independent of platform.
RNG_ALGORITHM = "philox4x64-10"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = np.random.Philox()
    bitgen.state = state
    return np.random.Generator(bitgen)


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. A non-positive ``max_norm`` disables clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm and math.isfinite(total):
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.0,
    decoupled: bool = False,
    eps: float = 1e-8,
) -> bool:
    """Apply one Adam update in place to the parameters named in ``grads``.

    With ``decoupled`` the weight decay is applied directly to the weights
    (AdamW); otherwise it is folded into the gradient (L2). Returns False and
    leaves everything untouched when any gradient is non-finite.
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            diagnostics["skipped_nonfinite_step"] += 1
            return False
    moments.step += 1
    t = moments.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        m = moments.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            moments.v[name] = np.zeros_like(p.data)
        v = moments.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        moments.m[name], moments.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and decoupled:
            p.data = p.data - lr * weight_decay * p.data
        p.data = p.data - lr * update
    return True


def step_lr(base_lr: float, epoch: int, step_size: int = 20, gamma: float = 0.5) -> float:
    return base_lr * gamma ** (epoch // step_size)


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int = 1000,
              min_lr: float = 0.0) -> float:
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))

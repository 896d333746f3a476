"""Count-based patching and latent IVP encoders/decoders.

An input patch is encoded by lifting every observed value to a latent state,
evolving each state backward to the patch's first timestamp and pooling the
per-point Gaussians. A predicted latent is decoded by evolving it forward to
each requested timestamp and reading values off a linear map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .params import ParamStore, linear
from .tensor import Tensor

VAR_FLOOR = 1e-6
TIME_FREQS = 8


def time_frequencies(n: int, shortest: float = 2.0, longest: float = 128.0) -> np.ndarray:
    """Angular frequencies whose periods are spaced geometrically over ``[shortest, longest]``."""
    return 2 * np.pi / np.geomspace(shortest, longest, n)


@dataclass
class Patch:
    times: np.ndarray
    values: np.ndarray
    observed: np.ndarray

    @property
    def tau(self) -> float:
        return float(self.times[0])

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class PatchArrays:
    """Patches of a batch laid out as ``(B, K, p)`` arrays."""

    values: np.ndarray
    times: np.ndarray
    observed: np.ndarray   # observed and not padding
    present: np.ndarray    # real timestamp (observed or missing), not padding
    tau: np.ndarray        # (B, K)
    valid: np.ndarray      # (B, K): at least one observed point

    @property
    def counts(self) -> np.ndarray:
        return self.present.sum(axis=-1)


def segment(times, values, observed, p: int) -> list[Patch]:
    """Consecutive groups of ``p`` points; patches with nothing observed are dropped."""
    n = len(times)
    if n == 0:
        raise ValueError("cannot segment an empty sequence")
    patches = []
    for start in range(0, n, p):
        sl = slice(start, start + p)
        obs = np.asarray(observed[sl], dtype=bool)
        if obs.any():
            patches.append(Patch(np.asarray(times[sl], float), np.asarray(values[sl], float), obs))
    return patches


def patchify(values: np.ndarray, times: np.ndarray, observed: np.ndarray, present: np.ndarray,
             p: int, n_patches: int | None = None) -> PatchArrays:
    """Reshape padded ``(B, T)`` sequences into ``(B, K, p)`` patches.

    Sequences must be left-aligned (padding only at the right end).
    """
    b, t = values.shape
    k = max(1, math.ceil(t / p)) if n_patches is None else n_patches
    width = k * p

    def pad(a, fill):
        out = np.full((b, width), fill, dtype=a.dtype)
        n = min(t, width)
        out[:, :n] = a[:, :n]
        return out.reshape(b, k, p)

    pres = pad(np.asarray(present, bool), False)
    obs = pad(np.asarray(observed, bool), False) & pres
    tt = pad(np.asarray(times, float), 0.0)
    # padded slots inherit their patch's first time so every offset is zero
    tau = tt[:, :, 0].copy()
    tt = np.where(pres, tt, tau[:, :, None])
    vals = np.where(obs, pad(np.asarray(values, float), 0.0), 0.0)
    return PatchArrays(vals, tt, obs, pres, tau, obs.any(axis=-1))


# -- IVP solvers ------------------------------------------------------------

class FlowSolver:
    """Closed-form latent evolution built from two additive couplings.

    Each coupling updates one half of the state by
    ``tanh(rate * dt) * g(other_half, |dt|)`` with a learned positive rate per
    dimension, so the gate vanishes at zero, is odd in ``dt`` and stays bounded.
    Positive offsets apply the couplings in order and negative offsets in
    reverse order, so evolving by ``dt`` and then by ``-dt`` returns the input
    up to rounding, and ``dt = 0`` is the identity exactly.
    """

    kind = "flow"

    def __init__(self, store: ParamStore, prefix: str, dim: int, hidden: int,
                 n_freq: int = TIME_FREQS):
        if dim % 2:
            raise ValueError("flow solver needs an even latent dimension")
        self.dim, self.half = dim, dim // 2
        self.freq = store.add(f"{prefix}.freq", (n_freq,), init="zeros")
        self.freq.data[:] = time_frequencies(n_freq)
        self.layers = []
        for c in range(2):
            p = f"{prefix}.coupling{c}"
            self.layers.append((
                store.add(f"{p}.w1", (self.half, hidden)),
                store.add(f"{p}.wt", (2 * n_freq + 1, hidden)),
                store.add(f"{p}.b1", (hidden,), init="zeros"),
                store.add(f"{p}.w2", (hidden, self.half), scale=0.1),
                store.add(f"{p}.b2", (self.half,), init="zeros"),
                store.add(f"{p}.rate", (self.half,), init="zeros"),
            ))
            # softplus inverse of rates spread over [1/32, 1]
            self.layers[-1][-1].data[:] = np.log(np.expm1(np.geomspace(1 / 32, 1.0, self.half)))

    def _coupling(self, c: int, z: Tensor, dt: np.ndarray) -> Tensor:
        w1, wt, b1, w2, b2, rate = self.layers[c]
        lo, hi = z[..., :self.half], z[..., self.half:]
        src, dst = (lo, hi) if c == 0 else (hi, lo)
        h = T.tanh(linear(src, w1) + linear(self._time_features(dt), wt) + b1)
        gate = T.tanh(T.softplus(rate) * dt)
        new = dst + gate * linear(h, w2, b2)
        return T.concat([src, new], axis=-1) if c == 0 else T.concat([new, src], axis=-1)

    def _time_features(self, dt: np.ndarray) -> Tensor:
        a = np.abs(dt)
        phase = a * self.freq
        return T.concat([T.Tensor(a), T.sin(phase), T.cos(phase)], axis=-1)

    def _ordered(self, z, dt, order):
        for c in order:
            z = self._coupling(c, z, dt)
        return z

    def solve(self, z: Tensor, dt) -> Tensor:
        """Evolve ``z`` (``(..., d)``) by offsets ``dt`` broadcastable to ``(..., 1)``."""
        z = T.as_tensor(z)
        dt = np.asarray(dt, dtype=np.float64)
        if dt.ndim < z.ndim:
            dt = dt.reshape(dt.shape + (1,) * (z.ndim - dt.ndim))
        if not np.all(np.isfinite(z.data)):
            raise FloatingPointError("non-finite latent state")
        if np.all(dt >= 0):
            return self._ordered(z, dt, (0, 1))
        if np.all(dt <= 0):
            return self._ordered(z, dt, (1, 0))
        fwd = self._ordered(z, dt, (0, 1))
        bwd = self._ordered(z, dt, (1, 0))
        return T.where(np.broadcast_to(dt >= 0, fwd.shape), fwd, bwd)


def rk4_integrate(field: Callable[[Tensor], Tensor], z: Tensor, dt, steps_per_unit: float
                  ) -> Tensor:
    """Fixed-step RK4 on ``dz/dt = field(z)``.

    The step count is ``ceil(max|dt| * steps_per_unit)``; every element uses an
    equal split of its own offset so a batch shares one loop.
    """
    z = T.as_tensor(z)
    dt = np.asarray(dt, dtype=np.float64)
    if dt.ndim < z.ndim:
        dt = dt.reshape(dt.shape + (1,) * (z.ndim - dt.ndim))
    if not np.all(np.isfinite(z.data)):
        raise FloatingPointError("non-finite latent state")
    n = int(math.ceil(float(np.max(np.abs(dt))) * steps_per_unit)) if dt.size else 0
    if n == 0:
        return z
    h = dt / n
    for _ in range(n):
        k1 = field(z)
        k2 = field(z + (0.5 * h) * k1)
        k3 = field(z + (0.5 * h) * k2)
        k4 = field(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


class RK4Solver:
    """Numerical integration of a learned autonomous vector field."""

    kind = "rk4"

    def __init__(self, store: ParamStore, prefix: str, dim: int, hidden: int,
                 steps_per_unit: float = 4.0):
        self.w1 = store.add(f"{prefix}.field.w1", (dim, hidden))
        self.b1 = store.add(f"{prefix}.field.b1", (hidden,), init="zeros")
        self.w2 = store.add(f"{prefix}.field.w2", (hidden, dim), scale=0.1)
        self.b2 = store.add(f"{prefix}.field.b2", (dim,), init="zeros")
        self.steps_per_unit = steps_per_unit

    def field(self, z: Tensor) -> Tensor:
        return linear(T.tanh(linear(z, self.w1, self.b1)), self.w2, self.b2)

    def solve(self, z: Tensor, dt) -> Tensor:
        return rk4_integrate(self.field, z, dt, self.steps_per_unit)


def make_solver(kind: str, store: ParamStore, prefix: str, dim: int, hidden: int,
                steps_per_unit: float = 4.0):
    if kind == "flow":
        return FlowSolver(store, prefix, dim, hidden)
    if kind == "rk4":
        return RK4Solver(store, prefix, dim, hidden, steps_per_unit)
    raise ValueError(f"unknown solver kind {kind!r}")


# -- posterior ---------------------------------------------------------------

@dataclass
class PatchPosterior:
    """Per-point Gaussians and their moment-matched aggregate.

    Component arrays are ``(..., p, d)``; aggregates are ``(..., d)``.
    """

    component_mu: Tensor
    component_sigma: Tensor
    weights: np.ndarray
    mu: Tensor
    var: Tensor

    @property
    def sigma(self) -> Tensor:
        return T.sqrt(self.var)


def aggregate(mu_c: Tensor, sigma_c: Tensor, weights: np.ndarray) -> tuple[Tensor, Tensor]:
    """Moment-match a uniform mixture of diagonal Gaussians.

    ``weights`` (``(..., p, 1)``) sum to one over observed points and are zero
    elsewhere. Variance is the mean component variance plus the spread of the
    component means, floored at ``VAR_FLOOR``.
    """
    mu = T.tsum(mu_c * weights, axis=-2)
    spread = T.square(mu_c - T.reshape(mu, mu.shape[:-1] + (1, mu.shape[-1])))
    var = T.tsum((T.square(sigma_c) + spread) * weights, axis=-2)
    return mu, T.clamp_min(var, VAR_FLOOR)


def kl_to_prior(mu: Tensor, var: Tensor) -> Tensor:
    """KL(N(mu, var) || N(0, I)) summed over the last axis."""
    mu, var = T.as_tensor(mu), T.as_tensor(var)
    return 0.5 * T.tsum(T.square(mu) + var - 1.0 - T.log(var), axis=-1)


def _observation_weights(observed: np.ndarray) -> np.ndarray:
    counts = observed.sum(axis=-1, keepdims=True)
    return (observed / np.maximum(counts, 1))[..., None]


class IVPPatcher:
    """Encoder (backward-in-time) and decoder (forward-in-time) with separate solvers."""

    def __init__(self, store: ParamStore, latent_dim: int, hidden: int, kind: str = "flow",
                 steps_per_unit: float = 4.0):
        self.latent_dim = latent_dim
        self.w_in = store.add("io.input.w", (1, latent_dim), scale=1.0)
        self.b_in = store.add("io.input.b", (latent_dim,), scale=1.0)
        self.enc_solver = make_solver(kind, store, "patcher.enc_solver", latent_dim, hidden,
                                      steps_per_unit)
        self.w_mu = store.add("patcher.infer.mu.w", (latent_dim, latent_dim))
        self.b_mu = store.add("patcher.infer.mu.b", (latent_dim,), init="zeros")
        self.w_sig = store.add("patcher.infer.sigma.w", (latent_dim, latent_dim), scale=0.1)
        self.b_sig = store.add("patcher.infer.sigma.b", (latent_dim,), init="zeros")
        self.dec_solver = make_solver(kind, store, "patcher.dec_solver", latent_dim, hidden,
                                      steps_per_unit)
        self.w_out = store.add("io.output.w", (latent_dim, 1))
        self.b_out = store.add("io.output.b", (1,), init="zeros")

    def encode(self, values: np.ndarray, times: np.ndarray, observed: np.ndarray,
               tau: np.ndarray) -> PatchPosterior:
        """Posterior for patches given as ``(..., p)`` arrays with indicators ``tau`` (``(...)``)."""
        x = np.asarray(values, float)[..., None]
        z = x * self.w_in + self.b_in
        dt = np.where(observed, np.asarray(tau, float)[..., None] - times, 0.0)
        z0 = self.enc_solver.solve(z, dt[..., None])
        mu_c = linear(z0, self.w_mu, self.b_mu)
        sigma_c = T.softplus(linear(z0, self.w_sig, self.b_sig))
        weights = _observation_weights(np.asarray(observed, bool))
        mu, var = aggregate(mu_c, sigma_c, weights)
        return PatchPosterior(mu_c, sigma_c, weights, mu, var)

    def decode(self, r_hat: Tensor, target_times: np.ndarray, tau_start: np.ndarray) -> Tensor:
        """Values at ``target_times`` (``(..., p)``) from latents ``r_hat`` (``(..., d)``)."""
        r_hat = T.as_tensor(r_hat)
        target_times = np.asarray(target_times, float)
        dt = target_times - np.asarray(tau_start, float)[..., None]
        z = T.reshape(r_hat, r_hat.shape[:-1] + (1, r_hat.shape[-1]))
        z = z + np.zeros(target_times.shape + (1,))
        z = self.dec_solver.solve(z, dt[..., None])
        return T.reshape(linear(z, self.w_out, self.b_out), target_times.shape)


class FlatPatcher:
    """Ablation stand-in: linear maps over zero-padded value vectors, timestamps ignored."""

    def __init__(self, store: ParamStore, latent_dim: int, patch_len: int):
        self.latent_dim = latent_dim
        self.patch_len = patch_len
        self.w_mu = store.add("io.flat_input.mu.w", (patch_len, latent_dim))
        self.b_mu = store.add("io.flat_input.mu.b", (latent_dim,), init="zeros")
        self.w_sig = store.add("io.flat_input.sigma.w", (patch_len, latent_dim), scale=0.1)
        self.b_sig = store.add("io.flat_input.sigma.b", (latent_dim,), init="zeros")
        self.w_out = store.add("io.flat_output.w", (latent_dim, patch_len))
        self.b_out = store.add("io.flat_output.b", (patch_len,), init="zeros")

    def _pad(self, a: np.ndarray) -> np.ndarray:
        width = a.shape[-1]
        if width == self.patch_len:
            return a
        pad = [(0, 0)] * (a.ndim - 1) + [(0, self.patch_len - width)]
        return np.pad(a, pad)

    def encode(self, values, times, observed, tau) -> PatchPosterior:
        observed = np.asarray(observed, bool)
        flat = self._pad(np.where(observed, values, 0.0))
        mu = linear(T.Tensor(flat), self.w_mu, self.b_mu)
        var = T.clamp_min(T.square(T.softplus(linear(T.Tensor(flat), self.w_sig, self.b_sig))),
                          VAR_FLOOR)
        sigma = T.sqrt(var)
        one = np.ones(observed.shape[:-1] + (1, 1))
        mu_c = T.reshape(mu, mu.shape[:-1] + (1, mu.shape[-1]))
        return PatchPosterior(mu_c, T.reshape(sigma, mu_c.shape), one, mu, var)

    def decode(self, r_hat, target_times, tau_start) -> Tensor:
        width = np.asarray(target_times).shape[-1]
        out = linear(T.as_tensor(r_hat), self.w_out, self.b_out)
        return out[..., :width]

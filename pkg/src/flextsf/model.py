"""The full forecaster: normalization-aware patch encoding, LED attention, decoding.

Training uses teacher forcing at patch granularity: every horizon patch gets
its own dummy query that sees the leader, all context patches and the
ground-truth horizon patches before it. This is the same computation the
autoregressive generator performs with generated patches in their place.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionStack, RotaryConfig
from .data import IrregularSeries
from .optim import make_rng
from .params import ParamStore, linear
from .patcher import FlatPatcher, IVPPatcher, PatchArrays, kl_to_prior, patchify
from .tensor import Tensor
from .vtnorm import (FeatureStandardizer, NormalizedInstance, StaticFeatures,
                     denormalize, normalize_context_horizon, raw_instance)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
REFERENCE_CLASSIC_PARAMETERS = 440_066


@dataclass(frozen=True)
class AblationFlags:
    disable_vt_norm: bool = False
    disable_ivp_patcher: bool = False
    disable_led_extras: bool = False

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class ModelConfig:
    patch_len: int = 8
    latent_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    layers: int = 2
    solver: str = "flow"
    solver_hidden: int = 64
    rk4_steps_per_unit: float = 4.0
    rotary_base: float = 10000.0
    tau_scale: float = 1.0
    kl_weight: float = 1.0
    sampling: str = "sample"
    h_max: int = 4
    max_positions: int = 512
    disable_vt_norm: bool = False
    disable_ivp_patcher: bool = False
    disable_led_extras: bool = False

    def __post_init__(self):
        if self.solver not in ("flow", "rk4"):
            raise ValueError(f"solver must be 'flow' or 'rk4', got {self.solver!r}")
        if self.sampling not in ("sample", "mean"):
            raise ValueError(f"sampling must be 'sample' or 'mean', got {self.sampling!r}")
        if self.patch_len < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("patch_len, layers and heads must be positive")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim

    @property
    def ablation(self) -> AblationFlags:
        return AblationFlags(self.disable_vt_norm, self.disable_ivp_patcher,
                             self.disable_led_extras)

    @classmethod
    def classic(cls, **overrides) -> ModelConfig:
        return cls(**{**dict(head_dim=16, heads=4, layers=2, latent_dim=64), **overrides})

    @classmethod
    def large(cls, **overrides) -> ModelConfig:
        return cls(**{**dict(head_dim=64, heads=12, layers=6, latent_dim=768,
                             solver_hidden=768), **overrides})

    def to_items(self) -> list[tuple[str, str]]:
        return [(f.name, repr(getattr(self, f.name))) for f in fields(self)]

    @classmethod
    def from_mapping(cls, raw: dict) -> ModelConfig:
        names = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(names)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            default = getattr(cls(), key)
            if isinstance(default, bool):
                if isinstance(value, str):
                    value = value.strip().lower() in ("1", "true", "yes")
                kwargs[key] = bool(value)
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value).strip("'\"")
        return cls(**kwargs)


# -- examples and batches ---------------------------------------------------

@dataclass
class Example:
    """A normalized context and the continuation it should forecast."""

    context: NormalizedInstance
    target: NormalizedInstance

    @property
    def features(self) -> StaticFeatures:
        return self.context.features


def make_example(context: IrregularSeries, target: IrregularSeries, mu_g: float, sigma_g: float,
                 omega_g: float, raw: bool = False) -> Example:
    if raw:
        return Example(raw_instance(context, omega_g), raw_instance(target, omega_g))
    ctx, tgt = normalize_context_horizon(context, target, mu_g, sigma_g, omega_g)
    return Example(ctx, tgt)


def _pad(arrays, fill, dtype):
    width = max(len(a) for a in arrays)
    out = np.full((len(arrays), width), fill, dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
    return out


def patch_instances(instances: Sequence, p: int, all_observed: bool = False) -> PatchArrays:
    values = _pad([np.asarray(i.values) for i in instances], 0.0, float)
    times = _pad([np.asarray(i.times) for i in instances], 0.0, float)
    present = _pad([np.ones(len(i.values), bool) for i in instances], False, bool)
    if all_observed:
        observed = present
    else:
        observed = _pad([np.asarray(i.observed) for i in instances], False, bool)
    return patchify(values, times, observed, present, p)


@dataclass
class ForwardResult:
    predictions: Tensor       # (B, Q, p)
    target: PatchArrays       # patches the predictions are scored against
    kl: Tensor                # (B, K) per-patch KL
    patch_valid: np.ndarray   # (B, K)
    posterior_mu: Tensor
    posterior_var: Tensor

    def nll(self) -> Tensor:
        """Mean Gaussian negative log-likelihood (unit variance) over observed targets."""
        mask = self.target.observed
        n = max(int(mask.sum()), 1)
        err = T.where(mask, self.predictions - self.target.values, 0.0)
        return 0.5 * T.tsum(T.square(err)) * (1.0 / n) + HALF_LOG_2PI * (mask.sum() > 0)

    def kl_mean(self) -> Tensor:
        n = max(int(self.patch_valid.sum()), 1)
        return T.tsum(T.where(self.patch_valid, self.kl, 0.0)) * (1.0 / n)


def loss_elbo(result: ForwardResult, kl_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(loss, nll, kl)`` with ``loss = nll + kl_weight * kl``."""
    nll = result.nll()
    kl = result.kl_mean()
    return nll + kl_weight * kl, nll, kl


class FlexTSF:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0,
                 standardizer: FeatureStandardizer | None = None):
        self.config = config
        self.seed = seed
        self.standardizer = standardizer or FeatureStandardizer.identity()
        store = self.params = ParamStore(make_rng(seed))
        c = config
        dm, dz = c.d_model, c.latent_dim
        if c.disable_ivp_patcher:
            self.patcher = FlatPatcher(store, dz, c.patch_len)
        else:
            self.patcher = IVPPatcher(store, dz, c.solver_hidden, c.solver, c.rk4_steps_per_unit)
        self.embed = (store.add("core.embed.w", (dz, dm)), store.add("core.embed.b", (dm,), init="zeros"))
        if not c.disable_led_extras:
            self.leader = (store.add("io.leader.w", (6, dm)), store.add("io.leader.b", (dm,), scale=1.0))
            rotary = RotaryConfig(c.head_dim, c.rotary_base, c.tau_scale)
        else:
            self.index_embed = store.add("core.index_embed", (c.max_positions, dm), scale=0.1)
            rotary = None
        self.dummy = store.add("core.dummy", (dm,), scale=1.0)
        self.stack = AttentionStack(store, dm, c.heads, c.layers, rotary)
        self.out_ln = (store.add("core.out_ln.g", (dm,), init="ones"),
                       store.add("core.out_ln.b", (dm,), init="zeros"))
        self.out_proj = (store.add("core.out.w", (dm, dz)), store.add("core.out.b", (dz,), init="zeros"))

    # -- parameter groups ------------------------------------------------
    def io_group(self) -> list[str]:
        return [n for n in self.params if n.startswith("io.")]

    def core_group(self) -> list[str]:
        return [n for n in self.params if not n.startswith("io.")]

    def count_parameters(self) -> int:
        return self.params.count()

    def zero_grad(self) -> None:
        for t in self.params.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        names = set(self.params.tensors)
        if set(arrays) != names:
            missing, extra = names - set(arrays), set(arrays) - names
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, a in arrays.items():
            t = self.params[n]
            if t.shape != a.shape:
                raise ValueError(f"{n}: shape {a.shape} != {t.shape}")
            t.data = np.array(a, dtype=np.float64)

    # -- building blocks -------------------------------------------------
    def leader_inputs(self, features: Sequence[StaticFeatures]) -> np.ndarray:
        if self.config.disable_vt_norm:
            return np.zeros((len(features), 6))
        return self.standardizer(features)

    def encode(self, patches: PatchArrays, rng: np.random.Generator | None, sample: bool):
        post = self.patcher.encode(patches.values, patches.times, patches.observed, patches.tau)
        r = post.mu
        if sample:
            eps = rng.standard_normal(post.mu.shape)
            r = post.mu + T.sqrt(post.var) * eps
        return post, r

    def assemble_sequence(self, leader_in: np.ndarray, reps: Tensor, patch_tau: np.ndarray,
                          patch_valid: np.ndarray, dummy_tau: np.ndarray,
                          dummy_visible: np.ndarray):
        """Node embeddings, indicators and attention mask for [leader, patches, dummies].

        ``reps`` are latent patch representations ``(B, K, d_z)``. Dummy ``q``
        sees patch slots ``< dummy_visible[:, q]`` (valid ones only) and itself.
        Returns ``(A0, tau, mask, n_prefix)`` with ``n_prefix`` the index of the
        first dummy node.
        """
        c = self.config
        b, k = patch_valid.shape
        q = dummy_tau.shape[1]
        has_leader = not c.disable_led_extras
        lead = 1 if has_leader else 0
        parts = []
        if has_leader:
            parts.append(T.reshape(linear(T.Tensor(leader_in), *self.leader), (b, 1, c.d_model)))
        parts.append(linear(reps, *self.embed))
        parts.append(T.reshape(self.dummy, (1, 1, c.d_model)) + np.zeros((b, q, 1)))
        a0 = T.concat(parts, axis=1)
        n = lead + k + q
        tau = np.zeros((b, n))
        tau[:, lead:lead + k] = patch_tau
        tau[:, lead + k:] = dummy_tau

        mask = np.zeros((b, n, n), dtype=bool)
        slots = np.arange(k)
        if has_leader:
            mask[:, :, 0] = True
        patch_block = (slots[None, :, None] >= slots[None, None, :]) & patch_valid[:, None, :]
        mask[:, lead:lead + k, lead:lead + k] = patch_block
        mask[:, lead + np.arange(k), lead + np.arange(k)] = True
        dummy_block = (slots[None, None, :] < dummy_visible[:, :, None]) & patch_valid[:, None, :]
        mask[:, lead + k:, lead:lead + k] = dummy_block
        mask[:, lead + k + np.arange(q), lead + k + np.arange(q)] = True

        if not has_leader:
            rank = np.cumsum(patch_valid, axis=1) - 1
            idx = np.zeros((b, n), dtype=int)
            idx[:, :k] = np.maximum(rank, 0)
            visible = np.minimum(dummy_visible, k)
            counts = np.concatenate([np.zeros((b, 1), int), np.cumsum(patch_valid, axis=1)], axis=1)
            idx[:, k:] = np.take_along_axis(counts, visible, axis=1)
            idx = np.minimum(idx, c.max_positions - 1)
            a0 = a0 + T.getitem(self.index_embed, idx)
            return a0, None, mask, lead + k
        return a0, tau, mask, lead + k

    def readout(self, out: Tensor) -> Tensor:
        return linear(T.layer_norm(out, *self.out_ln), *self.out_proj)

    def run_stack(self, a0: Tensor, tau, mask) -> Tensor:
        return self.stack(a0, tau, mask)

    # -- training forward ---------------------------------------------------
    def forward(self, examples: Sequence[Example], rng: np.random.Generator | None = None,
                sample: bool | None = None) -> ForwardResult:
        """Teacher-forced pass predicting every target patch of every example."""
        c = self.config
        if sample is None:
            sample = c.sampling == "sample"
        if sample and rng is None:
            raise ValueError("sampling requires an rng")
        ctx = patch_instances([e.context for e in examples], c.patch_len)
        tgt = patch_instances([e.target for e in examples], c.patch_len)
        kc = ctx.values.shape[1]
        allp = PatchArrays(*(np.concatenate([getattr(ctx, f.name), getattr(tgt, f.name)], axis=1)
                             for f in dataclasses.fields(PatchArrays)))
        post, r = self.encode(allp, rng, sample)
        kl = kl_to_prior(post.mu, post.var)
        kh = tgt.values.shape[1]
        visible = kc + np.broadcast_to(np.arange(kh), (len(examples), kh))
        a0, tau, mask, start = self.assemble_sequence(
            self.leader_inputs([e.features for e in examples]), r, allp.tau, allp.valid,
            tgt.tau, visible)
        out = self.run_stack(a0, tau, mask)
        r_hat = self.readout(out[:, start:, :])
        preds = self.patcher.decode(r_hat, tgt.times, tgt.tau)
        return ForwardResult(preds, tgt, kl, allp.valid, post.mu, post.var)

    def forward_teacher_forced(self, instance: NormalizedInstance, rng=None, sample=False):
        """All-patch teacher forcing on one sequence: patch ``k`` (k >= 2) is
        predicted from patches ``< k``. Returns per-patch predictions (list of
        arrays with each patch's point count), the patch arrays and KL terms."""
        c = self.config
        pa = patch_instances([instance], c.patch_len)
        k = int(pa.valid.sum())
        if k < 2:
            raise ValueError("teacher forcing needs at least two patches")
        post, r = self.encode(pa, rng, sample)
        slots = np.nonzero(pa.valid[0])[0][1:]
        visible = slots[None, :]
        a0, tau, mask, start = self.assemble_sequence(
            self.leader_inputs([instance.features]), r, pa.tau, pa.valid, pa.tau[:, slots], visible)
        out = self.run_stack(a0, tau, mask)
        r_hat = self.readout(out[:, start:, :])
        preds = self.patcher.decode(r_hat, pa.times[:, slots], pa.tau[:, slots])
        counts = pa.counts[0, slots]
        per_patch = [preds.data[0, i, :n] for i, n in enumerate(counts)]
        return per_patch, preds, pa, kl_to_prior(post.mu, post.var)

    # -- generation --------------------------------------------------------------
    def generate(self, contexts: Sequence[NormalizedInstance],
                 horizon_times: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Masked-autoregressive forecasts on the normalized scale.

        Horizon timestamps are chunked into groups of ``patch_len``; each chunk
        is decoded from a dummy node placed at the chunk's first timestamp and
        re-encoded as an input patch for the next step.
        """
        c = self.config
        if any(len(h) == 0 for h in horizon_times):
            raise ValueError("empty forecast horizon")
        b = len(contexts)
        with T.no_grad():
            ctx = patch_instances(contexts, c.patch_len)
            _, ctx_r = self.encode(ctx, None, False)
            hor_values = [np.zeros(len(h)) for h in horizon_times]
            hor_inst = [_Horizon(np.asarray(h, float), v) for h, v in zip(horizon_times, hor_values)]
            hor = patch_instances(hor_inst, c.patch_len, all_observed=True)
            kc, kh = ctx.values.shape[1], hor.values.shape[1]
            leader_in = self.leader_inputs([ci.features for ci in contexts])
            reps = ctx_r.data
            tau = ctx.tau
            valid = ctx.valid
            preds = np.zeros(hor.values.shape)
            for j in range(kh):
                a0, ntau, mask, start = self.assemble_sequence(
                    leader_in, T.Tensor(reps), tau, valid, hor.tau[:, j:j + 1],
                    np.full((b, 1), kc + j))
                out = self.run_stack(a0, ntau, mask)
                r_hat = self.readout(out[:, start:, :])
                x_hat = self.patcher.decode(r_hat, hor.times[:, j:j + 1], hor.tau[:, j:j + 1]).data
                x_hat = np.where(hor.present[:, j:j + 1], x_hat, 0.0)
                preds[:, j] = x_hat[:, 0]
                if j + 1 < kh:
                    step = PatchArrays(x_hat, hor.times[:, j:j + 1], hor.present[:, j:j + 1],
                                       hor.present[:, j:j + 1], hor.tau[:, j:j + 1],
                                       hor.valid[:, j:j + 1])
                    _, r_new = self.encode(step, None, False)
                    reps = np.concatenate([reps, r_new.data], axis=1)
                    tau = np.concatenate([tau, hor.tau[:, j:j + 1]], axis=1)
                    valid = np.concatenate([valid, hor.valid[:, j:j + 1]], axis=1)
        flat = preds.reshape(b, -1)
        return [flat[i, :len(h)].copy() for i, h in enumerate(horizon_times)]

    def forecast(self, context: IrregularSeries, horizon_times: np.ndarray, mu_g: float,
                 sigma_g: float, omega_g: float) -> np.ndarray:
        """Raw-scale forecast for one raw context at raw horizon timestamps."""
        dummy_target = IrregularSeries(context.series_id, context.channel, horizon_times,
                                       np.zeros(len(horizon_times)), np.ones(len(horizon_times), bool))
        ex = make_example(context, dummy_target, mu_g, sigma_g, omega_g, self.config.disable_vt_norm)
        pred = self.generate([ex.context], [ex.target.times])[0]
        return denormalize(pred, ex.features)


@dataclass
class _Horizon:
    times: np.ndarray
    values: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        return np.ones(len(self.times), bool)


def apply_ablation(flags: AblationFlags, model: FlexTSF) -> FlexTSF:
    """Variant of ``model`` with the given components removed (fresh weights).

    No active flag returns ``model`` itself.
    """
    if not flags.active():
        return model
    cfg = dataclasses.replace(model.config, **{n: True for n in flags.active()})
    return FlexTSF(cfg, model.seed, model.standardizer)


def count_parameters(config: ModelConfig) -> int:
    return FlexTSF(config).count_parameters()

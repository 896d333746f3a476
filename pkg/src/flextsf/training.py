"""Training regimes, evaluation, naive baselines and the ablation harness."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import yaml

from . import tensor as T
from .data import Dataset, IrregularSeries, SplitSpec, split_context_horizon
from .model import AblationFlags, Example, FlexTSF, apply_ablation, loss_elbo, make_example
from .optim import AdamMoments, adam_step, clip_grad_norm, cosine_lr, make_rng, step_lr
from .vtnorm import FeatureStandardizer, denormalize, fit_global

log = logging.getLogger(__name__)

FEW_SHOT_GRID = (10, 50, 100, 500)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainRegime:
    kind: str = "classic"
    lr: float = 1e-4
    batch_size: int = 64
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    decoupled_weight_decay: bool = False
    lr_step: int = 20
    lr_decay: float = 0.5
    warmup_steps: int = 0
    epochs: int = 30
    patience: int = 10
    kl_warmup: float = 0.1
    random_cuts: bool = False
    grad_clip: float = 1.0
    seed: int = 0

    @classmethod
    def classic(cls, **overrides) -> TrainRegime:
        return cls(**{"kind": "classic", **overrides})

    @classmethod
    def finetune(cls, **overrides) -> TrainRegime:
        return cls(**{"kind": "finetune", **overrides})

    @classmethod
    def pretrain(cls, **overrides) -> TrainRegime:
        base = dict(kind="pretrain", lr=1e-3, weight_decay=0.1, beta1=0.9, beta2=0.95,
                    decoupled_weight_decay=True, warmup_steps=1000, lr_step=0, lr_decay=1.0)
        return cls(**{**base, **overrides})

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> TrainRegime:
        try:
            factory = {"classic": cls.classic, "finetune": cls.finetune,
                       "pretrain": cls.pretrain}[kind]
        except KeyError:
            raise ValueError(f"unknown regime {kind!r}") from None
        return factory(**overrides)


# -- data preparation ----------------------------------------------------------

@dataclass(frozen=True)
class GlobalStats:
    """Per-channel global statistics, tagged with the split they came from."""

    channels: dict
    omega_g: float
    provenance: str = "train"

    @classmethod
    def fit(cls, dataset: Dataset) -> GlobalStats:
        stats = dict(dataset.manifest.channel_stats) or fit_global(dataset.split("train"))
        return cls(stats, float(dataset.manifest.time_unit_seconds), "train")

    def for_channel(self, channel: str) -> tuple[float, float]:
        return self.channels[channel]


def build_examples(series: Sequence[IrregularSeries], stats: GlobalStats, raw: bool,
                   spec: SplitSpec = SplitSpec()) -> list[Example]:
    out = []
    for s in series:
        if len(s) < 5 or not s.observed[: int(0.8 * len(s))].any():
            continue
        ctx, hor = split_context_horizon(s, spec)
        mu, sd = stats.for_channel(s.channel)
        out.append(make_example(ctx, hor, mu, sd, stats.omega_g, raw))
    return out


def pretrain_subsequence(series: IrregularSeries, p: int, rng: np.random.Generator,
                         h_max: int = 4) -> tuple[IrregularSeries, IrregularSeries] | None:
    """Random contiguous (context, target) pair; ``None`` when the series is too short.

    The start is uniform on ``[0, M - 2p]``, the context length uniform on
    ``[p, M - p - start]`` and the target covers the next
    ``min(p * h_max, remaining)`` points.
    """
    m = len(series)
    if m < 2 * p:
        return None
    start = int(rng.integers(0, m - 2 * p + 1))
    n_ctx = int(rng.integers(p, m - p - start + 1))
    stop = start + n_ctx
    n_tgt = min(p * h_max, m - stop)
    return series.slice(start, stop), series.slice(stop, stop + n_tgt)


def fit_standardizer(examples: Sequence[Example]) -> FeatureStandardizer:
    return FeatureStandardizer.fit([e.features for e in examples])


# -- evaluation -----------------------------------------------------------------

def baseline_forecast(kind: str, context_times: np.ndarray, context_values: np.ndarray,
                      horizon_times: np.ndarray, observed: np.ndarray | None = None) -> np.ndarray:
    t = np.asarray(context_times, float)
    x = np.asarray(context_values, float)
    if observed is not None:
        t, x = t[np.asarray(observed, bool)], x[np.asarray(observed, bool)]
    if x.size == 0:
        raise ValueError("baseline needs at least one observed context value")
    h = np.asarray(horizon_times, float)
    if kind == "mean":
        return np.full(h.shape, x.mean())
    if kind == "last-value":
        return np.full(h.shape, x[-1])
    if kind == "linear-trend":
        if x.size < 2 or np.ptp(t) == 0:
            return np.full(h.shape, x.mean())
        slope, intercept = np.polyfit(t, x, 1)
        return slope * h + intercept
    raise ValueError(f"unknown baseline {kind!r}")


BASELINES = ("mean", "last-value", "linear-trend")


@dataclass
class EvalReport:
    dataset: str
    variant: str
    seed: int
    config_hash: str
    mse: float
    n_points: int
    baselines: dict[str, float] = field(default_factory=dict)
    raw_mse: float | None = None
    zero_shot: bool = False
    k: int | None = None
    predictions: list[np.ndarray] = field(default_factory=list, repr=False)
    targets: list[np.ndarray] = field(default_factory=list, repr=False)
    masks: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = {"dataset": self.dataset, "variant": self.variant, "seed": self.seed,
               "config_hash": self.config_hash, "mse": float(self.mse),
               "n_points": int(self.n_points), "zero_shot": self.zero_shot,
               "baselines": {k: float(v) for k, v in sorted(self.baselines.items())}}
        if self.raw_mse is not None:
            out["raw_mse"] = float(self.raw_mse)
        if self.k is not None:
            out["k"] = int(self.k)
        return out

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def config_hash(model: FlexTSF) -> str:
    text = "\n".join(f"{k}={v}" for k, v in model.config.to_items())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _variant_name(model: FlexTSF) -> str:
    active = model.config.ablation.active()
    return "+".join(active) if active else "base"


def evaluate_mse(model: FlexTSF, dataset: Dataset, split: str = "test",
                 stats: GlobalStats | None = None, raw_scale: bool = False,
                 batch_size: int = 128, seed: int = 0) -> EvalReport:
    """Autoregressive forecasts over the last 20% of every series in ``split``.

    The headline MSE is on the VT-normalized scale of the reference
    normalization (dataset train statistics, context instance statistics),
    whatever the model's own input pipeline is, over observed horizon points.
    """
    stats = stats or GlobalStats.fit(dataset)
    series = dataset.split(split)
    ref = build_examples(series, stats, raw=False)
    own = build_examples(series, stats, raw=model.config.disable_vt_norm)
    preds, targets, masks, raw_sq = [], [], [], []
    base_sq = {k: [] for k in BASELINES}
    for start in range(0, len(ref), batch_size):
        r_chunk, o_chunk = ref[start:start + batch_size], own[start:start + batch_size]
        out = model.generate([e.context for e in o_chunk], [e.target.times for e in o_chunk])
        for r, o, y in zip(r_chunk, o_chunk, out):
            raw_pred = denormalize(y, o.features)
            f = r.features
            pred = ((raw_pred - f.mu_g) / f.sigma_g - f.mu_i) / f.sigma_i
            mask = r.target.observed
            preds.append(pred)
            targets.append(r.target.values)
            masks.append(mask)
            raw_true = denormalize(r.target.values, f)
            raw_sq.append(((raw_pred - raw_true) ** 2)[mask])
            for kind in BASELINES:
                b = baseline_forecast(kind, r.context.times, r.context.values, r.target.times,
                                      r.context.observed)
                base_sq[kind].append(((b - r.target.values) ** 2)[mask])
    sq = np.concatenate([((p - t) ** 2)[m] for p, t, m in zip(preds, targets, masks)]) \
        if preds else np.zeros(0)
    mse = float(sq.mean()) if sq.size else float("nan")
    report = EvalReport(
        dataset=dataset.name, variant=_variant_name(model), seed=seed,
        config_hash=config_hash(model), mse=mse, n_points=int(sq.size),
        baselines={k: float(np.concatenate(v).mean()) for k, v in base_sq.items() if v},
        raw_mse=float(np.concatenate(raw_sq).mean()) if raw_scale and raw_sq else None,
        predictions=preds, targets=targets, masks=masks)
    return report


# -- training loops -------------------------------------------------------------

@dataclass
class TrainResult:
    model: FlexTSF
    history: list[dict]
    best_epoch: int
    best_val_mse: float
    stats: GlobalStats
    steps: int = 0


def _gather_train_examples(model: FlexTSF, datasets: Sequence[Dataset], stats: Sequence[GlobalStats],
                           regime: TrainRegime, rng: np.random.Generator,
                           limit: int | None = None) -> list[Example]:
    raw = model.config.disable_vt_norm
    examples = []
    for ds, st in zip(datasets, stats):
        series = ds.split("train")
        if limit is not None:
            series = series[:limit]
        if regime.kind == "pretrain" or regime.random_cuts:
            for s in series:
                pair = pretrain_subsequence(s, model.config.patch_len, rng, model.config.h_max)
                if pair is None or not pair[0].observed.any():
                    T.diagnostics["pretrain_skipped_short"] += 1
                    continue
                mu, sd = st.for_channel(s.channel)
                examples.append(make_example(pair[0], pair[1], mu, sd, st.omega_g, raw))
        else:
            examples.extend(build_examples(series, st, raw))
    return examples


def train(model: FlexTSF, data: Dataset | Sequence[Dataset], regime: TrainRegime,
          *, train_limit: int | None = None, fit_features: bool = True,
          max_seconds: float | None = None) -> TrainResult:
    """Optimize ``model`` under ``regime`` and restore the best-validation weights.

    ``data`` may be a list of datasets (pre-training corpora); validation MSE
    is averaged over them. ``finetune`` updates the io group only.
    ``train_limit`` keeps the first k training series (few-shot).
    """
    import time

    datasets = [data] if isinstance(data, Dataset) else list(data)
    stats = [GlobalStats.fit(ds) for ds in datasets]
    rng = make_rng(regime.seed)
    if fit_features and not model.config.disable_vt_norm:
        reference = []
        for ds, st in zip(datasets, stats):
            reference.extend(build_examples(ds.split("train"), st, raw=False))
        model.standardizer = fit_standardizer(reference)
    names = model.io_group() if regime.kind == "finetune" else list(model.params)
    params = model.params.tensors
    moments = AdamMoments()
    history: list[dict] = []
    best = (math.inf, -1, model.state_arrays())
    bad_epochs = 0
    nonfinite_streak = 0
    step = 0
    per_epoch = None
    started = time.perf_counter()
    for epoch in range(regime.epochs):
        examples = _gather_train_examples(model, datasets, stats, regime, rng, train_limit)
        if not examples:
            raise ValueError("no usable training examples")
        order = rng.permutation(len(examples))
        n_batches = math.ceil(len(examples) / regime.batch_size)
        per_epoch = per_epoch or n_batches
        total_steps = per_epoch * regime.epochs
        if regime.kind == "pretrain":
            lr = None
        else:
            lr = step_lr(regime.lr, epoch, regime.lr_step, regime.lr_decay) if regime.lr_step \
                else regime.lr
        losses = []
        for bi in range(n_batches):
            idx = order[bi * regime.batch_size:(bi + 1) * regime.batch_size]
            batch = [examples[i] for i in idx]
            if regime.kind == "pretrain":
                lr = cosine_lr(regime.lr, step, total_steps, regime.warmup_steps)
            warm = regime.kl_warmup * total_steps
            beta = model.config.kl_weight * (min(1.0, (step + 1) / warm) if warm >= 1 else 1.0)
            result = model.forward(batch, rng)
            loss, nll, kl = loss_elbo(result, beta)
            if not np.isfinite(loss.item()):
                nonfinite_streak += 1
                T.diagnostics["nonfinite_loss"] += 1
                if nonfinite_streak >= 3:
                    raise TrainingDiverged(f"non-finite loss for 3 consecutive steps at epoch {epoch}")
                continue
            nonfinite_streak = 0
            model.zero_grad()
            loss.backward()
            grads = {n: params[n].grad for n in names if params[n].grad is not None}
            clip_grad_norm(grads, regime.grad_clip)
            adam_step(params, grads, moments, lr, regime.beta1, regime.beta2,
                      regime.weight_decay, regime.decoupled_weight_decay)
            losses.append(loss.item())
            step += 1
        val = [evaluate_mse(model, ds, "val", st).mse for ds, st in zip(datasets, stats)]
        val_mse = float(np.mean(val))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                        "val_mse": val_mse, "lr": float(lr)})
        log.info("epoch %d loss %.4f val_mse %.4f lr %.2e", epoch, history[-1]["train_loss"],
                 val_mse, lr)
        if val_mse < best[0]:
            best = (val_mse, epoch, model.state_arrays())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= regime.patience:
                break
        if max_seconds is not None and time.perf_counter() - started > max_seconds:
            break
    model.load_arrays(best[2])
    return TrainResult(model, history, best[1], best[0], stats[0], step)


def adapt_to_dataset(model: FlexTSF, dataset: Dataset) -> FlexTSF:
    """Copy of ``model`` whose static-feature standardizer is refitted on the
    unseen dataset's train split. Parameters are shared values, not updated."""
    standardizer = model.standardizer
    if not model.config.disable_vt_norm:
        reference = build_examples(dataset.split("train"), GlobalStats.fit(dataset), raw=False)
        if reference:
            standardizer = fit_standardizer(reference)
    copy = FlexTSF(model.config, model.seed, standardizer)
    copy.load_arrays(model.state_arrays())
    return copy


def zero_shot_eval(model: FlexTSF, dataset: Dataset, seed: int = 0) -> EvalReport:
    """Evaluate without touching any parameter.

    Normalization statistics (global value stats and the static-feature
    standardizer) come from the unseen dataset's own train split.
    """
    report = evaluate_mse(adapt_to_dataset(model, dataset), dataset, "test",
                          GlobalStats.fit(dataset), seed=seed)
    report.zero_shot = True
    report.k = 0
    return report


def few_shot_finetune(model: FlexTSF, dataset: Dataset, ks: Sequence[int] = FEW_SHOT_GRID,
                      regime: TrainRegime | None = None,
                      keep: dict | None = None) -> list[EvalReport]:
    """Fine-tune copies of ``model`` on the first k training series for each k.

    When ``keep`` is given it receives each fine-tuned copy keyed by k.
    """
    regime = regime or TrainRegime.finetune()
    available = len(dataset.split("train"))
    reports = []
    adapted = adapt_to_dataset(model, dataset)
    for k in ks:
        if k > available:
            log.warning("k=%d exceeds %d training series; clamping", k, available)
        k_eff = min(k, available)
        candidate = FlexTSF(model.config, model.seed, adapted.standardizer)
        candidate.load_arrays(adapted.state_arrays())
        if k_eff == 0:
            report = evaluate_mse(candidate, dataset, "test", GlobalStats.fit(dataset),
                                  seed=regime.seed)
            report.zero_shot = True
        else:
            train(candidate, dataset, regime, train_limit=k_eff, fit_features=False)
            report = evaluate_mse(candidate, dataset, "test", seed=regime.seed)
        report.k = k
        reports.append(report)
        if keep is not None:
            keep[k] = candidate
    return reports


@dataclass
class AblationRow:
    variant: str
    mse: float
    delta_pct: float


def ablation_suite(dataset: Dataset, base_model: FlexTSF, regime: TrainRegime,
                   flags_grid: Sequence[AblationFlags] | None = None,
                   base_report: EvalReport | None = None) -> list[AblationRow]:
    """Train each single-flag variant with the base budget and report MSE change in percent."""
    if flags_grid is None:
        flags_grid = [AblationFlags(disable_vt_norm=True), AblationFlags(disable_ivp_patcher=True),
                      AblationFlags(disable_led_extras=True)]
    if base_report is None:
        train(base_model, dataset, regime)
        base_report = evaluate_mse(base_model, dataset, "test", seed=regime.seed)
    rows = [AblationRow("base", base_report.mse, 0.0)]
    for flags in flags_grid:
        fresh = FlexTSF(dataclasses.replace(base_model.config, disable_vt_norm=False,
                                            disable_ivp_patcher=False, disable_led_extras=False),
                        base_model.seed)
        variant = apply_ablation(flags, fresh)
        train(variant, dataset, regime)
        rep = evaluate_mse(variant, dataset, "test", seed=regime.seed)
        rows.append(AblationRow("+".join(flags.active()) or "base", rep.mse,
                                100.0 * (rep.mse - base_report.mse) / base_report.mse))
    return rows

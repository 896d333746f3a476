"""Value/time normalization and the static feature vector.

Values go through a per-channel global z-score followed by an instance
z-score; timestamps are rescaled by the smallest gap of the instance. The six
statistics removed along the way form the static feature vector
``[mu_g, sigma_g, mu_i, sigma_i, omega_g, omega_i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DataError, IrregularSeries

EPS_SIGMA = 1e-6
# Scaled gaps are snapped to this dyadic grid so cumulative sums stay exact.
_TIME_GRID = 2.0 ** 32
FEATURE_NAMES = ("mu_g", "sigma_g", "mu_i", "sigma_i", "omega_g", "omega_i")


@dataclass(frozen=True)
class StaticFeatures:
    mu_g: float
    sigma_g: float
    mu_i: float
    sigma_i: float
    omega_g: float
    omega_i: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_g, self.sigma_g, self.mu_i, self.sigma_i,
                         self.omega_g, self.omega_i])

    def __len__(self) -> int:
        return 6


@dataclass
class NormalizedInstance:
    values_prime: np.ndarray
    times_prime: np.ndarray
    observed: np.ndarray
    features: StaticFeatures
    series_id: str = ""
    channel: str = ""

    # aliases so instances can be batched like raw series
    @property
    def values(self) -> np.ndarray:
        return self.values_prime

    @property
    def times(self) -> np.ndarray:
        return self.times_prime

    def __len__(self) -> int:
        return len(self.values_prime)


def _population_stats(x: np.ndarray) -> tuple[float, float]:
    mu = float(np.mean(x))
    sigma = float(np.sqrt(np.mean((x - mu) ** 2)))
    return mu, max(sigma, EPS_SIGMA)


def fit_global(train: Sequence[IrregularSeries]) -> dict[str, tuple[float, float]]:
    """Per-channel mean and population std over observed training values."""
    if not train:
        raise DataError("fit_global needs a non-empty training split")
    pooled: dict[str, list[np.ndarray]] = {}
    for s in train:
        pooled.setdefault(s.channel, []).append(s.values[s.observed])
    stats = {}
    for channel, chunks in pooled.items():
        x = np.concatenate(chunks)
        if x.size == 0:
            raise DataError(f"channel {channel!r} has no observed training values")
        stats[channel] = _population_stats(x)
    return stats


def normalize_values(values: np.ndarray, observed: np.ndarray, mu_g: float, sigma_g: float,
                     instance: tuple[float, float] | None = None
                     ) -> tuple[np.ndarray, float, float]:
    """Global then instance z-score. Unobserved entries come back as 0.

    ``instance`` reuses previously computed (mu_i, sigma_i), e.g. the context's
    statistics when normalizing a forecast horizon.
    """
    if sigma_g < EPS_SIGMA:
        raise ValueError("sigma_g below the clamp floor")
    observed = np.asarray(observed, dtype=bool)
    g = (np.asarray(values, dtype=np.float64) - mu_g) / sigma_g
    if instance is None:
        if not observed.any():
            raise DataError("cannot normalize a series without observed values")
        mu_i, sigma_i = _population_stats(g[observed])
    else:
        mu_i, sigma_i = instance
    out = np.where(observed, (g - mu_i) / sigma_i, 0.0)
    return out, mu_i, sigma_i


def normalize_times(times: np.ndarray, omega_g: float, omega_i: float | None = None
                    ) -> tuple[np.ndarray, float]:
    """Rescale gaps by the smallest gap and re-anchor at zero.

    Returns ``(times', omega_i)``. A single timestamp falls back to
    ``omega_i = omega_g``.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise DataError("no timestamps")
    gaps = np.diff(times)
    if np.any(gaps <= 0):
        raise DataError("timestamps must be strictly increasing")
    if omega_i is None:
        omega_i = float(np.min(gaps)) if gaps.size else float(omega_g)
    scaled = np.round(gaps / omega_i * _TIME_GRID) / _TIME_GRID
    return np.concatenate(([0.0], np.cumsum(scaled))), float(omega_i)


def denormalize(values_prime, features: StaticFeatures) -> np.ndarray:
    v = np.asarray(values_prime, dtype=np.float64)
    return (v * features.sigma_i + features.mu_i) * features.sigma_g + features.mu_g


def extract_features(mu_g: float, sigma_g: float, mu_i: float, sigma_i: float,
                     omega_g: float, omega_i: float) -> StaticFeatures:
    return StaticFeatures(float(mu_g), float(sigma_g), float(mu_i), float(sigma_i),
                          float(omega_g), float(omega_i))


def normalize_series(series: IrregularSeries, mu_g: float, sigma_g: float, omega_g: float
                     ) -> NormalizedInstance:
    values, mu_i, sigma_i = normalize_values(series.values, series.observed, mu_g, sigma_g)
    times, omega_i = normalize_times(series.times, omega_g)
    return NormalizedInstance(values, times, series.observed.copy(),
                              extract_features(mu_g, sigma_g, mu_i, sigma_i, omega_g, omega_i),
                              series.series_id, series.channel)


def normalize_context_horizon(context: IrregularSeries, horizon: IrregularSeries,
                              mu_g: float, sigma_g: float, omega_g: float
                              ) -> tuple[NormalizedInstance, NormalizedInstance]:
    """Normalize a context and its continuation with statistics of the context only."""
    ctx = normalize_series(context, mu_g, sigma_g, omega_g)
    f = ctx.features
    h_values, _, _ = normalize_values(horizon.values, horizon.observed, mu_g, sigma_g,
                                      instance=(f.mu_i, f.sigma_i))
    all_times, _ = normalize_times(np.concatenate((context.times, horizon.times)), omega_g,
                                   omega_i=f.omega_i)
    hor = NormalizedInstance(h_values, all_times[len(context):], horizon.observed.copy(), f,
                             horizon.series_id, horizon.channel)
    return ctx, hor


def raw_instance(series: IrregularSeries, omega_g: float) -> NormalizedInstance:
    """Identity 'normalization' used when VT-Norm is switched off."""
    features = StaticFeatures(0.0, 1.0, 0.0, 1.0, float(omega_g), float(omega_g))
    values = np.where(series.observed, series.values, 0.0)
    return NormalizedInstance(values, series.times.copy(), series.observed.copy(), features,
                              series.series_id, series.channel)


def _signed_log(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


def transform_features(raw: np.ndarray) -> np.ndarray:
    """Compress feature ranges: signed log of means, log of scales and time units."""
    raw = np.atleast_2d(raw)
    out = np.empty_like(raw)
    out[:, 0] = _signed_log(raw[:, 0])
    out[:, 1] = np.log(raw[:, 1])
    out[:, 2] = raw[:, 2]
    out[:, 3] = np.log(raw[:, 3])
    out[:, 4] = np.log(raw[:, 4])
    out[:, 5] = np.log(raw[:, 5])
    return out


@dataclass
class FeatureStandardizer:
    """z-scores transformed static features with constants fitted on training data.

    Features that are constant over the training corpus keep unit scale, and
    outputs are clipped to ``[-clip, clip]`` so unseen domains stay bounded.
    """

    mean: np.ndarray
    std: np.ndarray
    clip: float = 5.0

    @classmethod
    def identity(cls) -> FeatureStandardizer:
        return cls(np.zeros(6), np.ones(6))

    @classmethod
    def fit(cls, features: Sequence[StaticFeatures]) -> FeatureStandardizer:
        if not features:
            return cls.identity()
        t = transform_features(np.stack([f.as_array() for f in features]))
        mean = t.mean(axis=0)
        std = t.std(axis=0)
        std = np.where(std < EPS_SIGMA, 1.0, std)
        return cls(mean, std)

    def __call__(self, features: Sequence[StaticFeatures] | np.ndarray) -> np.ndarray:
        if isinstance(features, np.ndarray):
            raw = np.atleast_2d(features)
        else:
            raw = np.stack([f.as_array() for f in features])
        z = (transform_features(raw) - self.mean) / self.std
        return np.clip(z, -self.clip, self.clip)

    def unclipped(self, features: Sequence[StaticFeatures]) -> np.ndarray:
        raw = np.stack([f.as_array() for f in features])
        return (transform_features(raw) - self.mean) / self.std


def is_constant(values: np.ndarray, observed: np.ndarray) -> bool:
    x = np.asarray(values)[np.asarray(observed, bool)]
    return x.size < 2 or math.isclose(float(np.ptp(x)), 0.0)

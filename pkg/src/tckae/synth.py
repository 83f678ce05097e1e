"""
Two-class synthetic MTS with class-dependent dynamics and missingness.

Each variable follows a first-order autoregression driven by a class-shifted
level and a sinusoid whose period depends on the class::

    x_t = ar * x_{t-1} + level_c * sign_v + amplitude * sin(2 pi t / period_c + phase_v) + noise

Cells go missing independently with a rate that depends on (class, variable);
``informative_missingness`` scales the gap between the two classes' rates
while the class-weighted average rate stays at ``missing_rate``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mts import TimeSeriesDataset

__all__ = ["SynthConfig", "generate", "missing_rates"]

_MAX_RESAMPLE = 1000


@dataclass(frozen=True)
class SynthConfig:
    n: int = 600
    t: int = 20
    v: int = 10
    class_balance: float = 0.5
    separation: float = 0.1
    missing_rate: float = 0.5
    informative_missingness: float = 0.8
    noise_std: float = 1.0
    ar: float = 0.7
    amplitude: float = 1.0
    period: float = 10.0
    # fraction of the largest feasible class gap in missing rates reached at
    # informative_missingness = 1
    missing_gap: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n < 4 or self.t < 2 or self.v < 1:
            raise ValueError("need n >= 4, t >= 2, v >= 1")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must lie in (0, 1)")
        n_pos = round(self.n * self.class_balance)
        if min(n_pos, self.n - n_pos) < 2:
            raise ValueError("each class needs at least 2 samples")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if not 0.0 <= self.informative_missingness <= 1.0:
            raise ValueError("informative_missingness must lie in [0, 1]")
        if not 0.0 <= self.missing_gap < 1.0:
            raise ValueError("missing_gap must lie in [0, 1)")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")


def missing_rates(cfg, signs):
    """(2, V) missing probability per class and variable.

    ``signs`` (length V, entries +-1) decides which class loses more of each
    variable. Rates stay in [0, 1) and average to ``missing_rate`` over classes.
    """
    m, p = cfg.missing_rate, cfg.class_balance
    if m == 0.0:
        return np.zeros((2, len(signs)))
    # largest gap that keeps both classes' rates inside [0, 1]
    gap_max = min(m / p, m / (1 - p), (1 - m) / p, (1 - m) / (1 - p))
    gap = cfg.missing_gap * cfg.informative_missingness * gap_max
    rate1 = m + signs * gap * (1 - p)
    rate0 = m - signs * gap * p
    return np.stack([rate0, rate1])


def generate(cfg):
    """Draw a labelled dataset; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5717]))
    N, T, V = cfg.n, cfg.t, cfg.v

    n_pos = round(N * cfg.class_balance)
    labels = np.zeros(N, dtype=np.int64)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)

    level_sign = rng.choice([-1.0, 1.0], size=V)
    phase = rng.uniform(0, 2 * np.pi, size=V)
    miss_sign = rng.choice([-1.0, 1.0], size=V)
    rates = missing_rates(cfg, miss_sign)

    expected_obs = ((1.0 - rates) * T).sum(axis=1)
    if np.any(expected_obs < 2.0) or np.any(rates >= 1.0):
        raise ValueError(
            f"missing_rate={cfg.missing_rate} leaves fewer than 2 expected observations per series")

    level = np.where(labels == 1, 0.5, -0.5) * cfg.separation                    # N
    period = np.where(labels == 1, cfg.period / (1.0 + 0.5 * cfg.separation), cfg.period)
    steps = np.arange(T)
    drive = (level[:, None, None] * level_sign[None, None, :]
             + cfg.amplitude * np.sin(2 * np.pi * steps[None, :, None] / period[:, None, None]
                                      + phase[None, None, :]))
    noise = rng.normal(0.0, cfg.noise_std, size=(N, T, V))
    x = np.empty((N, T, V))
    x[:, 0] = drive[:, 0] + noise[:, 0]
    for t in range(1, T):
        x[:, t] = cfg.ar * x[:, t - 1] + drive[:, t] + noise[:, t]

    row_rates = rates[labels]                                                  # N x V
    mask = rng.random((N, T, V)) >= row_rates[:, None, :]
    for i in range(N):
        tries = 0
        while mask[i].sum() < 2:
            tries += 1
            if tries > _MAX_RESAMPLE:
                raise ValueError(f"could not draw 2 observations for series {i}")
            mask[i] = rng.random((T, V)) >= row_rates[i][None, :]

    values = np.where(mask, x, np.nan)
    return TimeSeriesDataset(values, mask, labels)

"""Time- and frequency-domain augmentations and the per-batch view policy.

All functions act on plain (E, T) / (E, F) float arrays and draw randomness
only from the ``numpy.random.Generator`` they are given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from tfmcl.errors import InvalidArgumentError
from tfmcl.signal import Window, normalize_psd, normalize_time, psd_matrix

TIME_METHODS = ("resample", "channel_substitution", "timing_inversion", "noise_addition",
                "channel_perturbation")
FREQ_METHODS = ("band_removal", "band_addition")


@dataclass(frozen=True)
class AugPolicy:
    time_methods: Tuple[str, ...] = TIME_METHODS
    freq_methods: Tuple[str, ...] = FREQ_METHODS
    noise_sigma_frac: float = 0.1
    resample_factor_range: Tuple[float, float] = (0.8, 1.2)
    perturb_scale_range: Tuple[float, float] = (0.7, 1.3)
    band_frac: float = 0.1
    band_add_amp_frac: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "time_methods", tuple(self.time_methods))
        object.__setattr__(self, "freq_methods", tuple(self.freq_methods))
        object.__setattr__(self, "resample_factor_range", tuple(self.resample_factor_range))
        object.__setattr__(self, "perturb_scale_range", tuple(self.perturb_scale_range))
        if not self.time_methods or not self.freq_methods:
            raise InvalidArgumentError("augmentation method sets must be non-empty")
        for m in self.time_methods:
            if m not in TIME_METHODS:
                raise InvalidArgumentError(f"unknown time augmentation {m!r}")
        for m in self.freq_methods:
            if m not in FREQ_METHODS:
                raise InvalidArgumentError(f"unknown frequency augmentation {m!r}")
        for name in ("resample_factor_range", "perturb_scale_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise InvalidArgumentError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.noise_sigma_frac < 0 or self.band_add_amp_frac < 0:
            raise InvalidArgumentError("noise_sigma_frac and band_add_amp_frac must be >= 0")
        if not 0 < self.band_frac <= 1:
            raise InvalidArgumentError(f"band_frac must lie in (0, 1], got {self.band_frac}")


DEFAULT_POLICY = AugPolicy()


@dataclass
class ViewPair:
    t: np.ndarray
    t_aug: np.ndarray
    f: np.ndarray
    f_aug: np.ndarray
    time_method: str = ""
    freq_method: str = ""


def _resample(x, factor):
    n_t = x.shape[1]
    n_new = int(math.floor(n_t * factor))
    grid = np.linspace(0.0, n_t - 1.0, n_new)
    y = np.stack([np.interp(grid, np.arange(n_t), row) for row in x])
    if n_new >= n_t:
        start = (n_new - n_t) // 2
        return y[:, start:start + n_t]
    left = (n_t - n_new) // 2
    return np.pad(y, ((0, 0), (left, n_t - n_new - left)), mode="edge")


def augment_time(t, method: str, rng: np.random.Generator, policy: AugPolicy = DEFAULT_POLICY):
    """Apply one time-domain augmentation to an (E, T) array."""
    x = np.asarray(t.samples if isinstance(t, Window) else t, dtype=np.float64)
    n_ch = x.shape[0]
    if method == "resample":
        return _resample(x, rng.uniform(*policy.resample_factor_range))
    if method == "channel_substitution":
        if n_ch < 2:
            raise InvalidArgumentError("channel_substitution needs at least 2 channels")
        src, dst = rng.choice(n_ch, size=2, replace=False)
        y = x.copy()
        y[dst] = x[src]
        return y
    if method == "timing_inversion":
        return x[:, ::-1].copy()
    if method == "noise_addition":
        sigma = policy.noise_sigma_frac * x.std(axis=1, keepdims=True)
        return x + rng.standard_normal(x.shape) * sigma
    if method == "channel_perturbation":
        return x * rng.uniform(*policy.perturb_scale_range, size=(n_ch, 1))
    raise InvalidArgumentError(f"unknown time augmentation {method!r}")


def band_width(n_bins: int, band_frac: float) -> int:
    # rounding guard: 0.1 * 30 must give 3, not 4
    return min(n_bins, max(1, math.ceil(round(band_frac * n_bins, 9))))


def augment_freq(f, method: str, rng: np.random.Generator, policy: AugPolicy = DEFAULT_POLICY):
    """Apply one frequency-domain augmentation to an (E, F) spectrum matrix.

    The band-addition amplitude is relative to the mean magnitude of the matrix,
    which is the plain mean for a raw (non-negative) PSD and stays non-zero for a
    z-scored one.
    """
    x = np.asarray(f, dtype=np.float64)
    n_bins = x.shape[1]
    if n_bins < 2:
        raise InvalidArgumentError(f"frequency augmentation needs F >= 2, got {n_bins}")
    if method not in FREQ_METHODS:
        raise InvalidArgumentError(f"unknown frequency augmentation {method!r}")
    width = band_width(n_bins, policy.band_frac)
    start = int(rng.integers(0, n_bins - width + 1))
    y = x.copy()
    if method == "band_removal":
        y[:, start:start + width] = x.min()
    else:
        y[:, start:start + width] += policy.band_add_amp_frac * np.abs(x).mean()
    return y


def make_view_pairs(windows: Sequence, policy: AugPolicy, seed: int, epoch: int,
                    batch_index: int) -> List[ViewPair]:
    """Build (t, t_aug, f, f_aug) for every window of a batch.

    ``t`` is the per-channel z-scored window and ``f`` its normalized PSD; the
    augmented views are drawn from an rng stream keyed by
    (seed, epoch, batch_index, sample_index).
    """
    if len(windows) < 2:
        raise InvalidArgumentError(f"a batch needs at least 2 windows, got {len(windows)}")
    pairs = []
    for i, w in enumerate(windows):
        raw = w.samples if isinstance(w, Window) else np.asarray(w)
        rng = np.random.default_rng([seed, epoch, batch_index, i])
        t = normalize_time(raw)
        f = normalize_psd(psd_matrix(raw))
        tm = policy.time_methods[int(rng.integers(len(policy.time_methods)))]
        fm = policy.freq_methods[int(rng.integers(len(policy.freq_methods)))]
        t_aug = augment_time(t, tm, rng, policy)
        f_aug = augment_freq(f, fm, rng, policy)
        pairs.append(ViewPair(t, t_aug, f, f_aug, tm, fm))
    return pairs


def stack_views(pairs: Sequence[ViewPair]):
    """Stack a list of ViewPairs into four (N, E, ·) arrays."""
    return tuple(np.stack([getattr(p, k) for p in pairs]) for k in ("t", "t_aug", "f", "f_aug"))

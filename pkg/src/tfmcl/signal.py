"""Windows, autocorrelation/PSD estimation, spectral masking and synthetic data."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from tfmcl.errors import InvalidArgumentError

LOG_EPS = 1e-10
ZSCORE_EPS = 1e-8


@dataclass(frozen=True)
class Window:
    """One multichannel slice, ``samples`` has shape (E, T)."""

    samples: np.ndarray
    fs_hz: float
    subject_id: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.samples)
        if x.ndim != 2:
            raise InvalidArgumentError(f"window samples must be 2-D (E, T), got shape {x.shape}")
        n_ch, n_t = x.shape
        if n_ch < 1 or n_t < 8 or n_t % 2:
            raise InvalidArgumentError(f"window needs E >= 1 and even T >= 8, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("window contains non-finite samples")
        if not self.fs_hz > 0:
            raise InvalidArgumentError(f"fs_hz must be positive, got {self.fs_hz}")
        if self.label is not None and self.label not in (0, 1):
            raise InvalidArgumentError(f"label must be 0, 1 or None, got {self.label!r}")
        object.__setattr__(self, "samples", x)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_times(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class Spectrum:
    """One-sided PSD with DC included and Nyquist excluded (length T/2)."""

    psd: np.ndarray
    fs_hz: float = 1.0

    @property
    def freqs(self) -> np.ndarray:
        n_t = 2 * len(self.psd)
        return np.arange(len(self.psd)) * self.fs_hz / n_t


def _as_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError(f"expected a 1-D signal, got shape {x.shape}")
    if x.size == 0:
        raise InvalidArgumentError("signal is empty")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("signal contains non-finite values")
    return x


def autocorrelation(x) -> np.ndarray:
    """Biased autocorrelation r[k] = (1/T) sum_n x[n] x[n+k] for lags 0..T-1."""
    x = _as_signal(x)
    n = x.size
    return np.correlate(x, x, mode="full")[n - 1 :] / n


def psd(x, fs_hz: float = 1.0) -> Spectrum:
    """Periodogram |X[m]|^2 / T for m = 0..T/2-1."""
    x = _as_signal(x)
    n = x.size
    if n % 2 or n < 4:
        raise InvalidArgumentError(f"psd needs an even length >= 4, got {n}")
    spec = np.fft.rfft(x)[: n // 2]
    return Spectrum(psd=(spec.real**2 + spec.imag**2) / n, fs_hz=fs_hz)


def two_sided_psd(x) -> np.ndarray:
    """Full periodogram |X[m]|^2 / T for m = 0..T-1; ``psd`` is its first half."""
    x = _as_signal(x)
    spec = np.fft.fft(x)
    return (spec.real**2 + spec.imag**2) / x.size


def psd_matrix(samples) -> np.ndarray:
    """Row-wise periodogram of an (E, T) array, returns (E, T/2)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected (E, T) samples, got shape {x.shape}")
    n = x.shape[1]
    if n % 2 or n < 4:
        raise InvalidArgumentError(f"psd needs an even length >= 4, got {n}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("samples contain non-finite values")
    spec = np.fft.rfft(x, axis=1)[:, : n // 2]
    return (spec.real**2 + spec.imag**2) / n


def window_psd(w: Window) -> np.ndarray:
    return psd_matrix(w.samples)


def zscore_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return (x - mu) / np.maximum(sd, ZSCORE_EPS)


def normalize_time(samples) -> np.ndarray:
    """Per-channel z-score of a raw window."""
    return zscore_rows(samples)


def normalize_psd(psd_mat) -> np.ndarray:
    """log-compress then z-score each channel's spectrum."""
    return zscore_rows(np.log(np.asarray(psd_mat, dtype=np.float64) + LOG_EPS))


def bandpass_notch(
    w: Window,
    lo_hz: float,
    hi_hz: float,
    notch_lo_hz: Optional[float] = None,
    notch_hi_hz: Optional[float] = None,
) -> Window:
    """Zero-phase DFT masking: keep bins in [lo, hi], drop bins in [notch_lo, notch_hi]."""
    nyq = w.fs_hz / 2
    if not (0 <= lo_hz < hi_hz <= nyq):
        raise InvalidArgumentError(f"band must satisfy 0 <= lo < hi <= {nyq}, got [{lo_hz}, {hi_hz}]")
    if (notch_lo_hz is None) != (notch_hi_hz is None):
        raise InvalidArgumentError("notch needs both edges or neither")
    if notch_lo_hz is not None and not (0 <= notch_lo_hz <= notch_hi_hz <= nyq):
        raise InvalidArgumentError(
            f"notch must satisfy 0 <= lo <= hi <= {nyq}, got [{notch_lo_hz}, {notch_hi_hz}]"
        )
    x = np.asarray(w.samples, dtype=np.float64)
    freqs = np.abs(np.fft.fftfreq(w.n_times, d=1.0 / w.fs_hz))
    keep = (freqs >= lo_hz) & (freqs <= hi_hz)
    if notch_lo_hz is not None:
        keep &= ~((freqs >= notch_lo_hz) & (freqs <= notch_hi_hz))
    y = np.fft.ifft(np.fft.fft(x, axis=1) * keep, axis=1).real
    return Window(y.astype(w.samples.dtype, copy=False), w.fs_hz, w.subject_id, w.label)


def _band_bins(n_times: int, fs_hz: float, band_hz) -> np.ndarray:
    lo, hi = band_hz
    if not (0 <= lo < hi <= fs_hz / 2):
        raise InvalidArgumentError(f"class band {band_hz} outside [0, {fs_hz / 2}] Hz")
    freqs = np.fft.rfftfreq(n_times, d=1.0 / fs_hz)
    bins = np.flatnonzero((freqs >= lo) & (freqs <= hi))
    # DC and Nyquist cannot carry a random phase
    bins = bins[(bins > 0) & (bins < n_times // 2)]
    if bins.size == 0:
        raise InvalidArgumentError(f"class band {band_hz} contains no DFT bins for T={n_times}")
    return bins


def _band_component(rng, n_ch, n_times, bins, rms):
    spec = np.zeros((n_ch, n_times // 2 + 1), dtype=np.complex128)
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_ch, bins.size))
    spec[:, bins] = np.exp(1j * phases)
    x = np.fft.irfft(spec, n_times, axis=1)
    # equal-magnitude bins: the rms is phase independent
    return x * (rms / np.sqrt(np.mean(x**2, axis=1, keepdims=True)))


def _pink_noise(rng, n_ch, n_times, sigma):
    if sigma == 0:
        return np.zeros((n_ch, n_times))
    white = rng.standard_normal((n_ch, n_times))
    spec = np.fft.rfft(white, axis=1)
    k = np.arange(spec.shape[1], dtype=np.float64)
    k[0] = np.inf
    x = np.fft.irfft(spec / np.sqrt(k), n_times, axis=1)
    return sigma * x / x.std(axis=1, keepdims=True)


def gen_synthetic_dataset(
    n_subjects: int,
    windows_per_subject: int,
    n_channels: int,
    window_len: int,
    fs_hz: float,
    class_band_hz=(8.0, 12.0),
    power_ratio: float = 3.0,
    noise_sigma: float = 1.0,
    seed: int = 0,
    band_rms: float = 1.0,
):
    """Labelled two-class dataset of band-limited oscillations over 1/f noise.

    Every window carries a random-phase oscillation occupying all DFT bins of
    ``class_band_hz`` with rms ``band_rms``; class 1 subjects scale it by
    ``power_ratio`` (an amplitude factor, so in-band power grows by its square).
    Labels are balanced across subjects and constant within a subject.
    """
    from tfmcl.data import Dataset

    if min(n_subjects, windows_per_subject, n_channels) < 1:
        raise InvalidArgumentError("subject, window and channel counts must be >= 1")
    if window_len < 8 or window_len % 2:
        raise InvalidArgumentError(f"window_len must be even and >= 8, got {window_len}")
    if not power_ratio > 1:
        raise InvalidArgumentError(f"power_ratio must exceed 1, got {power_ratio}")
    if noise_sigma < 0:
        raise InvalidArgumentError("noise_sigma must be >= 0")
    bins = _band_bins(window_len, fs_hz, class_band_hz)

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_subjects) % 2)
    windows = []
    for s in range(n_subjects):
        label = int(labels[s])
        rms = band_rms * (power_ratio if label == 1 else 1.0)
        for _ in range(windows_per_subject):
            x = _band_component(rng, n_channels, window_len, bins, rms)
            x = x + _pink_noise(rng, n_channels, window_len, noise_sigma)
            windows.append(Window(x.astype(np.float32), float(fs_hz), f"S{s:03d}", label))
    return Dataset(windows)

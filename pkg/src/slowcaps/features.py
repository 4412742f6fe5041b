"""Degradation feature engineering.

The pipeline treats each run-to-failure series as a normal stage followed
by a degradation stage, split at a per-unit change point.  Steps:

1. z-score normalization fitted on pooled normal-stage data only, applied
   to every sample;
2. linear slow feature extraction: directions w minimizing the mean
   squared temporal difference of w'x subject to unit variance and mutual
   decorrelation on the normal data.  Solved by whitening the static
   covariance and diagonalizing the whitened difference covariance;
   slowness values come out ascending, so the slowest direction is first;
3. retained-direction count picked at the largest relative gap in the
   slowness spectrum; window length picked where the sample ACF of the
   first slow feature enters the two-sigma noise band;
4. piece-wise linear remaining-useful-life labels, constant at rul_max
   before the change point and decaying linearly after it;
5. hybrid frames: normalized channels concatenated with slow features,
   cut into sliding windows labeled at their last sample.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "NormalizationStats",
    "SlowFeatureModel",
    "FrameBatch",
    "FeaturePipeline",
    "drop_constant_channels",
    "fit_normalizer",
    "apply_normalizer",
    "invert_normalizer",
    "fit_sfa",
    "select_num_slow_features",
    "sample_acf",
    "select_window_from_acf",
    "select_window_length",
    "piecewise_rul_labels",
    "fuse_and_slice",
    "concat_batches",
    "pipeline_to_arrays",
    "pipeline_from_arrays",
]

log = logging.getLogger("slowcaps.features")


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D sample-by-channel matrix, got shape {a.shape}")
    return a


def _as_segments(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray):
        return [_as_matrix(x)]
    segs = [_as_matrix(s) for s in x]
    if not segs:
        raise ValueError("no segments provided")
    widths = {s.shape[1] for s in segs}
    if len(widths) != 1:
        raise ValueError(f"segments disagree on channel count: {sorted(widths)}")
    return segs


def drop_constant_channels(matrices: Iterable[np.ndarray], tol: float = 1e-10) -> np.ndarray:
    """Boolean mask of channels whose pooled standard deviation exceeds tol.

    Flat channels carry no degradation information and would break the
    z-score; they are removed before any normalization.
    """
    segs = _as_segments(matrices)
    pooled = np.vstack(segs)
    std = pooled.std(axis=0)
    mask = std > tol
    if not mask.any():
        raise ValueError("all channels are constant at the given tolerance")
    dropped = int((~mask).sum())
    if dropped:
        log.info("dropping %d constant channel(s) of %d", dropped, mask.size)
    return mask


@dataclass
class NormalizationStats:
    """Per-channel z-score location and scale fitted on normal-stage data."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be matching 1-D arrays")


def fit_normalizer(segments, tol: float = 1e-12) -> NormalizationStats:
    """Fit pooled z-score statistics over the given normal-stage segments."""
    pooled = np.vstack(_as_segments(segments))
    if pooled.shape[0] < 2:
        raise ValueError("need at least two samples to fit normalization")
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    bad = np.flatnonzero(std < tol)
    if bad.size:
        raise ValueError(f"zero-variance channel(s) at indices {bad.tolist()}; "
                         "drop constant channels first")
    return NormalizationStats(mean=mean, std=std)


def apply_normalizer(matrix, stats: NormalizationStats) -> np.ndarray:
    """Apply (x - mean) / std; used on normal and degradation data alike."""
    m = _as_matrix(matrix)
    if m.shape[1] != stats.mean.shape[0]:
        raise ValueError(
            f"channel count {m.shape[1]} does not match fitted stats "
            f"({stats.mean.shape[0]})"
        )
    return (m - stats.mean) / stats.std


def invert_normalizer(matrix, stats: NormalizationStats) -> np.ndarray:
    m = _as_matrix(matrix)
    if m.shape[1] != stats.mean.shape[0]:
        raise ValueError("channel count does not match fitted stats")
    return m * stats.std + stats.mean


@dataclass
class SlowFeatureModel:
    """Full slow-direction decomposition of normalized normal-stage data.

    ``weights`` holds one direction per column, ordered by ascending
    slowness; ``lambdas[i]`` equals the mean squared temporal difference
    of feature i on the fitting data.  ``num_slow`` (set after spectrum
    inspection) splits the columns into the slow basis and the residual
    basis.  ``cov_static`` is the ridged static covariance and
    ``cov_diff`` the covariance of within-segment first differences.
    """

    weights: np.ndarray
    lambdas: np.ndarray
    ridge: float
    cov_static: np.ndarray
    cov_diff: np.ndarray
    num_slow: int | None = None

    @property
    def n_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def slow_basis(self) -> np.ndarray:
        self._require_split()
        return self.weights[:, : self.num_slow]

    @property
    def residual_basis(self) -> np.ndarray:
        self._require_split()
        return self.weights[:, self.num_slow :]

    def _require_split(self):
        if self.num_slow is None:
            raise ValueError("num_slow has not been set on this model")

    def project(self, matrix, n: int | None = None) -> np.ndarray:
        """Project ``matrix`` onto the first ``n`` slow directions.

        No bias is subtracted: the input is expected to be normalized
        with the same statistics used during fitting.
        """
        m = _as_matrix(matrix)
        if m.shape[1] != self.n_channels:
            raise ValueError(
                f"channel count {m.shape[1]} does not match model ({self.n_channels})"
            )
        if n is None:
            self._require_split()
            n = self.num_slow
        if not 1 <= n <= self.n_channels:
            raise ValueError(f"cannot project onto {n} of {self.n_channels} directions")
        return m @ self.weights[:, :n]

    def project_residual(self, matrix) -> np.ndarray:
        m = _as_matrix(matrix)
        return m @ self.residual_basis


def fit_sfa(segments, ridge_scale: float = 1e-8) -> SlowFeatureModel:
    """Extract slow directions from normalized normal-stage segments.

    Temporal differences are taken within each segment only, never across
    segment boundaries.  The static covariance (sample covariance of the
    pooled data) receives a relative ridge of ``ridge_scale * trace/J``
    before whitening so near-collinear channels stay solvable.
    """
    segs = _as_segments(segments)
    pooled = np.vstack(segs)
    n, j = pooled.shape
    if j < 2:
        raise ValueError("need at least two channels for slow feature extraction")
    if n < j + 2:
        raise ValueError(f"need at least {j + 2} samples for {j} channels, got {n}")
    diffs = [np.diff(s, axis=0) for s in segs if s.shape[0] >= 2]
    if not diffs:
        raise ValueError("no segment has two or more samples; cannot form differences")
    d = np.vstack(diffs)
    cov_static = np.cov(pooled, rowvar=False, ddof=1)
    # second moment of the differences, not centered: slowness is the
    # mean squared step size
    cov_diff = d.T @ d / d.shape[0]
    ridge = float(ridge_scale) * float(np.trace(cov_static)) / j
    cov_static = cov_static + ridge * np.eye(j)
    evals, evecs = np.linalg.eigh(cov_static)
    if evals.min() <= 0.0:
        raise ValueError("static covariance is singular even after ridging")
    whiten = (evecs / np.sqrt(evals)) @ evecs.T
    lam, v = np.linalg.eigh(whiten @ cov_diff @ whiten)
    weights = whiten @ v
    # deterministic sign: largest-magnitude component of each direction
    # is positive
    idx = np.argmax(np.abs(weights), axis=0)
    signs = np.sign(weights[idx, np.arange(j)])
    signs[signs == 0] = 1.0
    weights = weights * signs
    return SlowFeatureModel(
        weights=weights,
        lambdas=lam,
        ridge=ridge,
        cov_static=cov_static,
        cov_diff=cov_diff,
    )


def select_num_slow_features(lambdas) -> int:
    """Count of retained slow directions: largest relative gap rule.

    Scans boundary positions P = 1 .. floor(J/2) (the slow half of the
    ascending spectrum) and returns the P maximizing lambda[P] /
    lambda[P-1]; ties break toward the smallest P.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1 or lam.size < 2:
        raise ValueError("need at least two slowness values")
    if np.any(lam <= 0.0):
        raise ValueError("slowness values must all be positive")
    limit = max(1, lam.size // 2)
    ratios = lam[1 : limit + 1] / lam[:limit]
    return int(np.argmax(ratios)) + 1


def sample_acf(x, max_lag: int) -> np.ndarray:
    """Biased sample autocorrelation for lags 0..max_lag; acf[0] == 1."""
    v = np.asarray(x, dtype=np.float64).ravel()
    n = v.size
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    if n <= max_lag:
        raise ValueError(f"series of length {n} cannot support lag {max_lag}")
    c = v - v.mean()
    denom = float(c @ c)
    if denom == 0.0:
        raise ValueError("series is constant; autocorrelation undefined")
    acf = np.empty(max_lag + 1)
    acf[0] = 1.0
    for lag in range(1, max_lag + 1):
        acf[lag] = float(c[:-lag] @ c[lag:]) / denom
    return acf


def select_window_from_acf(acf, n_samples: int) -> int:
    """Smallest lag whose |acf| drops inside the 2/sqrt(N) noise band.

    If no lag within the computed range crosses the band, the largest
    examined lag is returned with a warning.
    """
    a = np.asarray(acf, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise ValueError("acf must contain lag 0 and at least one further lag")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    band = 2.0 / np.sqrt(n_samples)
    below = np.flatnonzero(np.abs(a[1:]) < band)
    if below.size == 0:
        max_lag = a.size - 1
        log.warning(
            "no lag up to %d entered the +/-%.4f band; using %d",
            max_lag, band, max_lag,
        )
        return max_lag
    return int(below[0]) + 1


def select_window_length(series, max_lag: int | None = None) -> int:
    """Window length from one series: first ACF entry into the noise band."""
    v = np.asarray(series, dtype=np.float64).ravel()
    if max_lag is None:
        max_lag = min(v.size - 2, 200)
    acf = sample_acf(v, max_lag)
    return select_window_from_acf(acf, v.size)


def piecewise_rul_labels(n_samples: int, change_point: int, rul_max: float) -> np.ndarray:
    """Remaining-useful-life target per sample index k = 1..n_samples.

    Constant at ``rul_max`` while k <= change_point, then decays by one
    per sample, floored at zero.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if not 0 <= change_point <= n_samples:
        raise ValueError(
            f"change point {change_point} outside series of length {n_samples}"
        )
    if rul_max <= 0:
        raise ValueError(f"rul_max must be positive, got {rul_max}")
    k = np.arange(1, n_samples + 1, dtype=np.float64)
    y = np.where(k <= change_point, float(rul_max), float(rul_max) - (k - change_point))
    return np.maximum(y, 0.0)


@dataclass
class FrameBatch:
    """Sliding-window frames with aligned labels and provenance.

    ``frames`` has shape (n, window, channels); frames of the same unit
    are stored contiguously in time order.  ``end_indices`` records the
    1-based sample index of each frame's last row within its unit.
    """

    frames: np.ndarray
    labels: np.ndarray
    unit_ids: np.ndarray
    end_indices: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.unit_ids = np.asarray(self.unit_ids)
        self.end_indices = np.asarray(self.end_indices, dtype=np.int64)
        n = self.frames.shape[0]
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be rank 3, got shape {self.frames.shape}")
        if not (self.labels.shape == (n,) == self.unit_ids.shape == self.end_indices.shape):
            raise ValueError("frames, labels, unit_ids and end_indices disagree in length")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def window(self) -> int:
        return self.frames.shape[1]

    @property
    def channels(self) -> int:
        return self.frames.shape[2]

    def units(self) -> list:
        out, seen = [], set()
        for u in self.unit_ids:
            if u not in seen:
                seen.add(u)
                out.append(u)
        return out

    def unit_slice(self, unit) -> slice:
        idx = np.flatnonzero(self.unit_ids == unit)
        if idx.size == 0:
            raise KeyError(f"unit {unit} not in batch")
        return slice(int(idx[0]), int(idx[-1]) + 1)


def fuse_and_slice(
    x_d,
    s_d,
    window: int,
    labels,
    stride: int = 1,
    unit_id="u0",
    start_index: int = 1,
) -> FrameBatch | None:
    """Concatenate channels with slow features and cut sliding windows.

    ``x_d`` (K x J) and ``s_d`` (K x P, may have zero columns) share the
    sample axis; each window of ``window`` rows becomes one frame whose
    label is the entry of ``labels`` aligned with the frame's last row.
    ``start_index`` is the 1-based series index of row 0, recorded in the
    frame provenance.  Returns None (with a warning) when the segment is
    shorter than the window.
    """
    xd = _as_matrix(x_d)
    sd = np.asarray(s_d, dtype=np.float64)
    if sd.ndim != 2:
        raise ValueError(f"slow feature block must be 2-D, got shape {sd.shape}")
    if sd.shape[0] != xd.shape[0]:
        raise ValueError(
            f"sample counts differ: {xd.shape[0]} channels rows vs {sd.shape[0]} slow rows"
        )
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.size != xd.shape[0]:
        raise ValueError(f"labels length {y.size} does not match {xd.shape[0]} samples")
    if window < 1:
        raise ValueError("window must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = xd.shape[0]
    if k < window:
        log.warning(
            "unit %s: segment of %d samples is shorter than window %d; skipped",
            unit_id, k, window,
        )
        return None
    hybrid = np.hstack([xd, sd]) if sd.shape[1] else xd
    views = np.lib.stride_tricks.sliding_window_view(hybrid, window, axis=0)
    frames = np.ascontiguousarray(views[::stride].transpose(0, 2, 1))
    ends = np.arange(window - 1, k, stride, dtype=np.int64)
    return FrameBatch(
        frames=frames,
        labels=y[ends],
        unit_ids=np.full(frames.shape[0], unit_id, dtype=object),
        end_indices=ends + start_index,
    )


def concat_batches(batches: Sequence[FrameBatch]) -> FrameBatch:
    parts = [b for b in batches if b is not None and len(b)]
    if not parts:
        raise ValueError("no frames to concatenate")
    return FrameBatch(
        frames=np.concatenate([b.frames for b in parts]),
        labels=np.concatenate([b.labels for b in parts]),
        unit_ids=np.concatenate([b.unit_ids for b in parts]),
        end_indices=np.concatenate([b.end_indices for b in parts]),
    )


@dataclass
class FeaturePipeline:
    """Fitted feature chain: channel mask, z-score stats, slow directions.

    ``transform`` maps a raw series matrix to its normalized channels and
    slow features; ``hybrid`` concatenates the two, matching the frame
    channel layout (retained channels first, slow features after).
    """

    channel_mask: np.ndarray
    stats: NormalizationStats
    sfa: SlowFeatureModel
    window: int
    include_slow: bool = True

    def __post_init__(self):
        self.channel_mask = np.asarray(self.channel_mask, dtype=bool)
        if self.channel_mask.sum() != self.stats.mean.shape[0]:
            raise ValueError("mask and normalization stats disagree on channel count")
        if self.sfa.num_slow is None:
            raise ValueError("slow feature model must have num_slow set")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def n_retained(self) -> int:
        return int(self.channel_mask.sum())

    @property
    def num_slow(self) -> int:
        return int(self.sfa.num_slow)

    @property
    def frame_channels(self) -> int:
        return self.n_retained + (self.num_slow if self.include_slow else 0)

    def transform(self, raw_matrix) -> tuple[np.ndarray, np.ndarray]:
        m = _as_matrix(raw_matrix)
        if m.shape[1] != self.channel_mask.size:
            raise ValueError(
                f"raw channel count {m.shape[1]} does not match mask "
                f"({self.channel_mask.size})"
            )
        z = apply_normalizer(m[:, self.channel_mask], self.stats)
        if self.include_slow:
            slow = self.sfa.project(z, self.num_slow)
        else:
            slow = np.empty((z.shape[0], 0))
        return z, slow

    def hybrid(self, raw_matrix) -> np.ndarray:
        z, slow = self.transform(raw_matrix)
        return np.hstack([z, slow]) if slow.shape[1] else z

    def without_slow(self) -> "FeaturePipeline":
        return replace(self, include_slow=False)


def pipeline_to_arrays(pipe: FeaturePipeline) -> dict[str, np.ndarray]:
    """Flatten a fitted pipeline into named float arrays (checkpoint form)."""
    return {
        "channel_mask": pipe.channel_mask.astype(np.float64),
        "norm_mean": pipe.stats.mean,
        "norm_std": pipe.stats.std,
        "sfa_weights": pipe.sfa.weights,
        "sfa_lambdas": pipe.sfa.lambdas,
        "sfa_cov_static": pipe.sfa.cov_static,
        "sfa_cov_diff": pipe.sfa.cov_diff,
        "sfa_ridge": np.asarray(pipe.sfa.ridge),
        "num_slow": np.asarray(float(pipe.num_slow)),
        "window": np.asarray(float(pipe.window)),
        "include_slow": np.asarray(1.0 if pipe.include_slow else 0.0),
    }


def pipeline_from_arrays(arrays: dict[str, np.ndarray]) -> FeaturePipeline:
    sfa = SlowFeatureModel(
        weights=arrays["sfa_weights"],
        lambdas=arrays["sfa_lambdas"],
        ridge=float(arrays["sfa_ridge"]),
        cov_static=arrays["sfa_cov_static"],
        cov_diff=arrays["sfa_cov_diff"],
        num_slow=int(arrays["num_slow"]),
    )
    return FeaturePipeline(
        channel_mask=arrays["channel_mask"] > 0.5,
        stats=NormalizationStats(mean=arrays["norm_mean"], std=arrays["norm_std"]),
        sfa=sfa,
        window=int(arrays["window"]),
        include_slow=bool(float(arrays["include_slow"]) > 0.5),
    )

"""End-to-end orchestration shared by the CLI and the test harness.

Fitting order for run-to-failure data: drop flat channels, fit z-score
statistics on pooled normal segments, extract slow directions from the
normalized normal segments, pick the retained count from the slowness
spectrum, pick the window length from the averaged degradation-stage
autocorrelation of the first slow feature, then slice hybrid frames
labeled with the piece-wise RUL target.

Milling runs reuse the same machinery: the first cut of each case plays
the normal stage, every cut becomes a short unit whose frames all carry
the run-level label.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import features as F
from . import network
from .data import MillingRun, RunToFailureSeries
from .evaluation import EvaluationReport, build_report, last_point_predictions, \
    sequence_predictions
from .features import FeaturePipeline, FrameBatch
from .training import TrainConfig, TrainReport, derive_hyperparams, train

__all__ = [
    "FeatureSettings",
    "FeatureDiagnostics",
    "ConditionNormalizer",
    "fit_features",
    "build_frames",
    "milling_normal_runs",
    "fit_features_milling",
    "build_frames_milling",
    "milling_run_series",
    "ABLATION_VARIANTS",
    "variant_flags",
    "ablation_run",
]

log = logging.getLogger("slowcaps.pipeline")

ABLATION_VARIANTS = ("full", "no-sfa", "no-lstm", "plain-capsnet")


@dataclass
class FeatureSettings:
    """Knobs for the feature fitting stage; None means rule-derived."""

    rul_max: float = 125.0
    ridge_scale: float = 1e-8
    constant_tol: float = 1e-10
    num_slow: int | None = None
    window: int | None = None
    max_lag: int | None = None
    per_condition: bool = False


@dataclass
class FeatureDiagnostics:
    lambdas: np.ndarray
    num_slow: int
    window: int
    acf: np.ndarray | None
    acf_band: float | None
    retained_channels: list[int]
    ridge: float


@dataclass
class ConditionNormalizer:
    """Per-operating-condition z-score applied before the shared pipeline.

    Conditions are identified by their rounded setting vectors; each
    row is standardized with the statistics of its nearest condition
    center, fitted per condition on normal-stage training rows.
    """

    centers: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def apply(self, sensors: np.ndarray, settings: np.ndarray) -> np.ndarray:
        if settings is None:
            raise ValueError("per-condition normalization needs settings")
        d = settings[:, None, :] - self.centers[None, :, :]
        nearest = np.argmin((d * d).sum(axis=2), axis=1)
        return (sensors - self.means[nearest]) / self.stds[nearest]


def fit_condition_normalizer(
    series_list: Sequence[RunToFailureSeries], tol: float = 1e-12
) -> ConditionNormalizer:
    rows = []
    for s in series_list:
        if s.settings is None:
            raise ValueError(f"unit {s.unit_id} has no settings columns")
        cp = s.change_point
        for x, c in zip(s.sensors[:cp], np.round(s.settings[:cp], 1)):
            rows.append((tuple(c), x))
    groups: dict[tuple, list] = {}
    for key, x in rows:
        groups.setdefault(key, []).append(x)
    centers, means, stds = [], [], []
    for key in sorted(groups):
        block = np.asarray(groups[key])
        if block.shape[0] < 2:
            raise ValueError(f"operating condition {key} has fewer than two normal samples")
        std = block.std(axis=0)
        std = np.where(std < tol, 1.0, std)
        centers.append(key)
        means.append(block.mean(axis=0))
        stds.append(std)
    return ConditionNormalizer(
        centers=np.asarray(centers, dtype=np.float64),
        means=np.asarray(means),
        stds=np.asarray(stds),
    )


def _series_matrix(
    s: RunToFailureSeries, condition: ConditionNormalizer | None
) -> np.ndarray:
    if condition is None:
        return s.sensors
    return condition.apply(s.sensors, s.settings)


def fit_features(
    train_series: Sequence[RunToFailureSeries],
    settings: FeatureSettings | None = None,
) -> tuple[FeaturePipeline, FeatureDiagnostics, ConditionNormalizer | None]:
    """Fit the whole feature chain on training units."""
    st = settings or FeatureSettings()
    if not train_series:
        raise ValueError("no training units")
    condition = fit_condition_normalizer(train_series) if st.per_condition else None
    matrices = [_series_matrix(s, condition) for s in train_series]
    mask = F.drop_constant_channels(matrices, st.constant_tol)
    normal_segs = []
    for s, m in zip(train_series, matrices):
        seg = m[: s.change_point][:, mask]
        if seg.shape[0] >= 2:
            normal_segs.append(seg)
    if not normal_segs:
        raise ValueError("no unit has a usable normal stage")
    stats = F.fit_normalizer(normal_segs)
    normalized_normals = [F.apply_normalizer(seg, stats) for seg in normal_segs]
    sfa = F.fit_sfa(normalized_normals, ridge_scale=st.ridge_scale)
    if st.num_slow is not None:
        p = int(st.num_slow)
        if not 1 <= p <= sfa.n_channels:
            raise ValueError(f"pinned num_slow {p} outside 1..{sfa.n_channels}")
    else:
        p = F.select_num_slow_features(sfa.lambdas)
    sfa.num_slow = p

    acf_mean = None
    band = None
    if st.window is not None:
        window = int(st.window)
        if window < 1:
            raise ValueError(f"pinned window {window} must be >= 1")
    else:
        acfs = []
        lengths = []
        for s, m in zip(train_series, matrices):
            z_deg = F.apply_normalizer(m[s.change_point :][:, mask], stats)
            if z_deg.shape[0] < 4:
                continue
            slow1 = sfa.project(z_deg, 1).ravel()
            max_lag = min(z_deg.shape[0] - 2, st.max_lag or 200)
            try:
                acfs.append((F.sample_acf(slow1, max_lag), z_deg.shape[0]))
            except ValueError:
                continue
            lengths.append(z_deg.shape[0])
        if not acfs:
            raise ValueError(
                "no degradation stage long enough to select a window; pin one"
            )
        shortest = min(a.size for a, _ in acfs)
        acf_mean = np.mean([a[:shortest] for a, _ in acfs], axis=0)
        n_mean = int(round(float(np.mean(lengths))))
        band = 2.0 / np.sqrt(n_mean)
        window = F.select_window_from_acf(acf_mean, n_mean)
    pipe = FeaturePipeline(
        channel_mask=mask, stats=stats, sfa=sfa, window=window, include_slow=True
    )
    diag = FeatureDiagnostics(
        lambdas=sfa.lambdas.copy(),
        num_slow=p,
        window=window,
        acf=acf_mean,
        acf_band=band,
        retained_channels=np.flatnonzero(mask).tolist(),
        ridge=sfa.ridge,
    )
    return pipe, diag, condition


def build_frames(
    series_list: Sequence[RunToFailureSeries],
    pipe: FeaturePipeline,
    rul_max: float,
    stride: int = 1,
    condition: ConditionNormalizer | None = None,
) -> FrameBatch:
    """Degradation-stage frames for every unit, labeled by remaining life."""
    parts = []
    for s in series_list:
        z, slow = pipe.transform(_series_matrix(s, condition))
        cp = s.change_point
        labels = F.piecewise_rul_labels(s.length, cp, rul_max)
        part = F.fuse_and_slice(
            z[cp:], slow[cp:], pipe.window, labels[cp:],
            stride=stride, unit_id=s.unit_id, start_index=cp + 1,
        )
        if part is not None:
            parts.append(part)
    return F.concat_batches(parts)


def milling_normal_runs(runs: Sequence[MillingRun]) -> list[MillingRun]:
    return [r for r in runs if r.is_normal]


def fit_features_milling(
    train_runs: Sequence[MillingRun],
    settings: FeatureSettings | None = None,
) -> tuple[FeaturePipeline, FeatureDiagnostics]:
    """Milling variant: first cut of each case is the normal stage."""
    st = settings or FeatureSettings()
    if not train_runs:
        raise ValueError("no training runs")
    matrices = [r.sensors for r in train_runs]
    mask = F.drop_constant_channels(matrices, st.constant_tol)
    normal_segs = [r.sensors[:, mask] for r in train_runs if r.is_normal]
    if not normal_segs:
        raise ValueError("no run is flagged normal")
    stats = F.fit_normalizer(normal_segs)
    sfa = F.fit_sfa([F.apply_normalizer(seg, stats) for seg in normal_segs],
                    ridge_scale=st.ridge_scale)
    p = int(st.num_slow) if st.num_slow is not None else \
        F.select_num_slow_features(sfa.lambdas)
    if not 1 <= p <= sfa.n_channels:
        raise ValueError(f"num_slow {p} outside 1..{sfa.n_channels}")
    sfa.num_slow = p
    if st.window is not None:
        window = int(st.window)
    else:
        acfs = []
        for r in train_runs:
            if r.is_normal:
                continue
            z = F.apply_normalizer(r.sensors[:, mask], stats)
            slow1 = sfa.project(z, 1).ravel()
            max_lag = min(z.shape[0] - 2, st.max_lag or 200)
            acfs.append(F.sample_acf(slow1, max_lag))
        if not acfs:
            raise ValueError("no degraded runs to select a window from; pin one")
        shortest = min(a.size for a in acfs)
        n = train_runs[0].sensors.shape[0]
        window = F.select_window_from_acf(
            np.mean([a[:shortest] for a in acfs], axis=0), n
        )
    pipe = FeaturePipeline(channel_mask=mask, stats=stats, sfa=sfa,
                           window=window, include_slow=True)
    diag = FeatureDiagnostics(
        lambdas=sfa.lambdas.copy(), num_slow=p, window=window, acf=None,
        acf_band=None, retained_channels=np.flatnonzero(mask).tolist(),
        ridge=sfa.ridge,
    )
    return pipe, diag


def build_frames_milling(
    runs: Sequence[MillingRun], pipe: FeaturePipeline, stride: int = 1
) -> FrameBatch:
    """One short unit per cut; every frame carries the run-level label."""
    parts = []
    for r in runs:
        z, slow = pipe.transform(r.sensors)
        labels = np.full(z.shape[0], r.rul)
        part = F.fuse_and_slice(z, slow, pipe.window, labels,
                                stride=stride, unit_id=r.unit_id)
        if part is not None:
            parts.append(part)
    return F.concat_batches(parts)


def milling_run_series(run: MillingRun) -> RunToFailureSeries:
    """Wrap a cut as a series so the last-point protocol applies per run."""
    return RunToFailureSeries(
        unit_id=run.unit_id,
        sensors=run.sensors,
        change_point=run.sensors.shape[0],
        true_rul=run.rul,
        metadata={"case": run.case_id, "run": run.run_id,
                  "wear": run.wear_filled},
    )


def variant_flags(variant: str) -> tuple[bool, bool]:
    """Map an ablation variant to (include_slow, use_lstm)."""
    table = {
        "full": (True, True),
        "no-sfa": (False, True),
        "no-lstm": (True, False),
        "plain-capsnet": (False, False),
    }
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}; pick from {ABLATION_VARIANTS}")
    return table[variant]


@dataclass
class AblationResult:
    reports: dict[str, EvaluationReport]
    train_reports: dict[str, TrainReport]
    summary_rows: list[dict] = field(default_factory=list)


def ablation_run(
    train_series: Sequence[RunToFailureSeries],
    test_series: Sequence[RunToFailureSeries],
    settings: FeatureSettings,
    make_config: Callable[[FeaturePipeline, str], network.ModelConfig],
    train_cfg: TrainConfig,
    variants: Sequence[str] = ABLATION_VARIANTS,
    eval_mode: str = "last_point",
    jobs: int = 1,
) -> AblationResult:
    """Train and evaluate the architecture variants under shared seeds.

    The feature chain is fitted once; the no-sfa variants drop the slow
    feature columns from the frames but keep the window, normalization
    and data splits identical, so differences isolate the architecture
    change.  ``make_config(pipe, variant)`` supplies the model for each
    variant (the pipe exposes frame channels, slow count and window);
    ``eval_mode`` picks the per-unit last-point protocol or dense
    per-sequence scoring on the held-out units.  ``jobs`` > 1 trains
    variants on a thread pool; results are identical to the serial run.
    """
    if eval_mode not in ("last_point", "dense"):
        raise ValueError(f"unknown eval mode {eval_mode!r}")
    pipe_full, _, condition = fit_features(train_series, settings)

    def run_variant(variant: str):
        include_slow, use_lstm = variant_flags(variant)
        pipe = pipe_full if include_slow else pipe_full.without_slow()
        batch = build_frames(train_series, pipe, settings.rul_max,
                             condition=condition)
        config = make_config(pipe, variant)
        if config.use_lstm != use_lstm:
            raise ValueError(f"config factory disagrees with variant {variant}")
        params, treport = train(config, batch, train_cfg)
        label_scale = train_cfg.label_scale
        if eval_mode == "last_point":
            ids, preds = last_point_predictions(
                params, config, pipe, list(test_series), label_scale,
                preprocess=None if condition is None
                else (lambda s: _series_matrix(s, condition)),
            )
            truths = [s.true_rul for s in test_series]
            if any(t is None for t in truths):
                raise ValueError("last-point evaluation needs true residual life")
        else:
            test_batch = build_frames(test_series, pipe, settings.rul_max,
                                      condition=condition)
            preds, truths, ids = sequence_predictions(
                params, config, test_batch.frames, test_batch.labels,
                test_batch.unit_ids, config.sequence_length, label_scale,
            )
        report = build_report(
            ids, truths, preds, variant=variant, seed=train_cfg.seed,
            clip=True, rul_max=settings.rul_max,
        )
        return report, treport

    results: dict[str, tuple[EvaluationReport, TrainReport]] = {}
    if jobs > 1 and len(variants) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {v: pool.submit(run_variant, v) for v in variants}
            for v in variants:
                results[v] = futures[v].result()
    else:
        for v in variants:
            results[v] = run_variant(v)

    reports: dict[str, EvaluationReport] = {}
    train_reports: dict[str, TrainReport] = {}
    rows = []
    for variant in variants:
        report, treport = results[variant]
        reports[variant] = report
        train_reports[variant] = treport
        rows.append({
            "variant": variant, "rmse": report.rmse, "score": report.score,
            "parameters": treport.parameter_count,
            "best_epoch": treport.best_epoch,
        })
    return AblationResult(reports=reports, train_reports=train_reports,
                          summary_rows=rows)

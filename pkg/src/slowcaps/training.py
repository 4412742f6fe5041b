"""Model fitting: minibatch Adam with early stopping, plus the
hyper-parameter derivation rules and the two-axis sensitivity search.

Routing and weight updates interleave at batch granularity: every
forward pass reruns the routing iterations, and Adam applies one update
per minibatch from gradients of the squared-error loss.  Training
optimizes labels divided by ``label_scale`` (the rul ceiling, by
default), which keeps the loss surface well scaled; reported losses are
in the scaled space and predictions are unscaled on the way out.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import network
from .features import FrameBatch
from .optim import Adam
from .tensor import Tensor, backward, no_grad, reduce_mean, mul, sub

__all__ = [
    "TrainConfig",
    "TrainReport",
    "build_sequences",
    "split_unit_ids",
    "train",
    "derive_hyperparams",
    "GridCell",
    "GridResult",
    "sensitivity_grid",
]

log = logging.getLogger("slowcaps.training")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-4
    validation_fraction: float = 0.1
    label_scale: float = 1.0
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            problems.append("learning_rate must be >= 0")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.min_delta < 0:
            problems.append("min_delta must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            problems.append("validation_fraction must be in (0, 1)")
        if self.label_scale <= 0:
            problems.append("label_scale must be positive")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))


@dataclass
class TrainReport:
    """Per-epoch losses (scaled-label MSE) and stopping bookkeeping."""

    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    stopped_early: bool
    parameter_count: int
    train_sequences: int
    val_sequences: int
    label_scale: float
    wall_seconds: float

    def to_json_dict(self, include_timing: bool = False) -> dict:
        doc = {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "parameter_count": self.parameter_count,
            "train_sequences": self.train_sequences,
            "val_sequences": self.val_sequences,
            "label_scale": self.label_scale,
        }
        if include_timing:
            doc["wall_seconds"] = self.wall_seconds
        return doc


def build_sequences(
    frames: np.ndarray,
    labels: np.ndarray,
    unit_ids: np.ndarray,
    length: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack runs of ``length`` consecutive frames within each unit.

    Frames must be grouped by unit and time ordered.  Each sample is
    labeled by its final frame.  Units holding fewer than ``length``
    frames contribute nothing (logged at debug level).
    """
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    frames = np.asarray(frames)
    labels = np.asarray(labels)
    unit_ids = np.asarray(unit_ids)
    starts = []
    ends = []
    i = 0
    n = frames.shape[0]
    while i < n:
        j = i
        while j < n and unit_ids[j] == unit_ids[i]:
            j += 1
        if j - i >= length:
            starts.extend(range(i, j - length + 1))
        else:
            log.debug("unit %s has %d frames, fewer than sequence length %d",
                      unit_ids[i], j - i, length)
        i = j
    if not starts:
        raise ValueError(f"no unit has {length} consecutive frames")
    s = np.asarray(starts, dtype=np.int64)
    idx = s[:, None] + np.arange(length)
    ends = s + length - 1
    return frames[idx], labels[ends], unit_ids[ends]


def split_unit_ids(
    unit_ids: list,
    fraction: float,
    rng: np.random.Generator,
) -> tuple[list, list]:
    """Shuffle unit ids and hold out round(fraction * n), at least one."""
    uids = list(unit_ids)
    if len(uids) < 2:
        raise ValueError("need at least two units to split off validation")
    n_val = int(round(fraction * len(uids)))
    n_val = min(max(n_val, 1), len(uids) - 1)
    order = rng.permutation(len(uids))
    val = {uids[i] for i in order[:n_val]}
    return [u for u in uids if u not in val], [u for u in uids if u in val]


def _forward_loss(x, y_scaled, params, config, mode, rng):
    pred, _ = network.model_forward(x, params, config, mode=mode, rng=rng)
    err = sub(pred, Tensor(y_scaled))
    return reduce_mean(mul(err, err)), pred


def _eval_mse(x, y_scaled, params, config, chunk: int = 512) -> float:
    sse = 0.0
    with no_grad():
        for lo in range(0, y_scaled.size, chunk):
            hi = min(lo + chunk, y_scaled.size)
            pred, _ = network.model_forward(x[lo:hi], params, config, mode="eval")
            d = pred.data - y_scaled[lo:hi]
            sse += float(d @ d)
    return sse / y_scaled.size


def train(
    config: network.ModelConfig,
    batch: FrameBatch,
    cfg: TrainConfig,
    params: dict[str, Tensor] | None = None,
    val_units: list | None = None,
) -> tuple[dict[str, Tensor], TrainReport]:
    """Fit the model on a frame batch; returns best-validation parameters.

    The validation split holds out whole units so no frame of a unit
    appears on both sides.  Early stopping watches validation MSE with
    the configured patience and minimum improvement, and the parameters
    from the best validation epoch are returned regardless of where
    training stopped.  Everything is driven by ``cfg.seed``: repeated
    calls are bit-identical.
    """
    t0 = time.perf_counter()
    root = np.random.SeedSequence(cfg.seed)
    ss_init, ss_split, ss_shuffle, ss_dropout = root.spawn(4)
    units = batch.units()
    if val_units is None:
        _, val_units = split_unit_ids(
            units, cfg.validation_fraction, np.random.default_rng(ss_split)
        )
    val_set = set(val_units)
    train_units = [u for u in units if u not in val_set]
    if not train_units or not val_set:
        raise ValueError("unit split left one side empty")

    x_all, y_all, uid_all = build_sequences(
        batch.frames, batch.labels, batch.unit_ids, config.sequence_length
    )
    in_val = np.asarray([u in val_set for u in uid_all])
    x_tr, y_tr = x_all[~in_val], y_all[~in_val]
    x_va, y_va = x_all[in_val], y_all[in_val]
    if x_tr.shape[0] == 0 or x_va.shape[0] == 0:
        raise ValueError("training or validation side has no sequences")
    ys_tr = y_tr / cfg.label_scale
    ys_va = y_va / cfg.label_scale

    if params is None:
        params = network.init_parameters(config, np.random.default_rng(ss_init))
    adam = Adam(params, lr=cfg.learning_rate, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng(ss_shuffle)
    dropout_rng = np.random.default_rng(ss_dropout)

    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = np.inf
    best_epoch = 0
    best_snapshot = {k: t.data.copy() for k, t in params.items()}
    stale = 0
    stopped_early = False
    n_tr = ys_tr.size
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n_tr) if cfg.shuffle else np.arange(n_tr)
        sse = 0.0
        for lo in range(0, n_tr, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            try:
                loss, _ = _forward_loss(
                    x_tr[sel], ys_tr[sel], params, config, "train", dropout_rng
                )
                adam.zero_grad()
                backward(loss)
                adam.step()
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}, batch {lo // cfg.batch_size}: {exc}"
                ) from None
            sse += loss.item() * sel.size
        train_losses.append(sse / n_tr)
        val_mse = _eval_mse(x_va, ys_va, params, config)
        val_losses.append(val_mse)
        if val_mse < best_val - cfg.min_delta:
            best_val = val_mse
            best_epoch = epoch
            best_snapshot = {k: t.data.copy() for k, t in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped_early = True
                log.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                break
    for k, t in params.items():
        t.data[...] = best_snapshot[k]
    report = TrainReport(
        train_loss=train_losses,
        val_loss=val_losses,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
        parameter_count=network.parameter_count(params),
        train_sequences=int(n_tr),
        val_sequences=int(ys_va.size),
        label_scale=cfg.label_scale,
        wall_seconds=time.perf_counter() - t0,
    )
    return params, report


def derive_hyperparams(
    num_slow: int,
    n_channels: int,
    window: int,
    conv_filters: int = 64,
    lstm_units: int = 16,
    **overrides,
) -> network.ModelConfig:
    """Architecture defaults from the feature dimensions.

    With P slow features over J channels: the advanced layer gets P
    capsules of dimension J+P, the basic capsule dimension is
    floor((P+J)/2), and the basic channel count is conv_filters divided
    by that dimension (filters are bumped to the next multiple when they
    do not divide).  Filter count and LSTM width stay free for the
    sensitivity search.
    """
    p, j = int(num_slow), int(n_channels)
    if p < 1 or j < 1:
        raise ValueError("num_slow and n_channels must be positive")
    d = max((p + j) // 2, 1)
    filters = int(conv_filters)
    if filters % d != 0:
        bumped = ((filters + d - 1) // d) * d
        log.info("bumping conv filters %d -> %d to divide capsule dim %d",
                 filters, bumped, d)
        filters = bumped
    kwargs = dict(
        window_length=int(window),
        in_channels=j + p,
        conv_filters=filters,
        caps_dim=d,
        caps_channels=filters // d,
        num_advanced=p,
        advanced_dim=j + p,
        lstm_units=int(lstm_units),
    )
    kwargs.update(overrides)
    return network.ModelConfig(**kwargs)


@dataclass
class GridCell:
    conv_filters: int
    lstm_units: int
    rmse: float
    score: float
    seed: int
    best_epoch: int


@dataclass
class GridResult:
    best: GridCell
    cells: list[GridCell] = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        return [
            {"conv_filters": c.conv_filters, "lstm_units": c.lstm_units,
             "rmse": c.rmse, "score": c.score, "seed": c.seed,
             "best_epoch": c.best_epoch}
            for c in self.cells
        ]


def _cell_seed(base_seed: int, filters: int, units: int) -> int:
    return int(np.random.SeedSequence([base_seed, filters, units]).generate_state(1)[0])


def sensitivity_grid(
    filter_candidates,
    unit_candidates,
    batch: FrameBatch,
    base_config: network.ModelConfig,
    cfg: TrainConfig,
    explore: str = "greedy",
    jobs: int = 1,
) -> GridResult:
    """Two-axis search over convolution filters and LSTM width.

    Candidate lists are scanned in order (customarily multiples of 8
    starting at 8).  Each cell trains from a seed derived from the base
    seed and the cell coordinates, always against the same validation
    units, and is scored by validation RMSE with the prognostics score
    as tie-break.  In greedy mode an axis stops extending as soon as a
    step fails to improve: within a row, the next LSTM width must beat
    the row's best; a new filter row must beat the global best.
    ``explore="full"`` evaluates every cell; only full mode can spread
    cells over ``jobs`` worker threads (greedy is order-dependent), and
    the result is identical to the serial scan.
    """
    filters = [int(f) for f in filter_candidates]
    lstm_units = [int(u) for u in unit_candidates]
    if not filters or not lstm_units:
        raise ValueError("candidate lists must be nonempty")
    if explore not in ("greedy", "full"):
        raise ValueError(f"unknown exploration mode {explore!r}")
    d = base_config.caps_dim
    bad = [f for f in filters if f % d != 0]
    if bad:
        raise ValueError(
            f"filter candidates {bad} are not divisible by capsule dim {d}"
        )
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA5]))
    _, val_units = split_unit_ids(batch.units(), cfg.validation_fraction, split_rng)
    val_set = set(val_units)
    x_all, y_all, uid_all = build_sequences(
        batch.frames, batch.labels, batch.unit_ids, base_config.sequence_length
    )
    in_val = np.asarray([uid in val_set for uid in uid_all])
    x_va, y_va = x_all[in_val], y_all[in_val]

    from .evaluation import rmse as _rmse, scoring_function as _sf

    def run_cell(f: int, u: int) -> GridCell:
        config = replace(base_config, conv_filters=f, caps_channels=f // d,
                         caps_kernel=None, lstm_units=u)
        seed = _cell_seed(cfg.seed, f, u)
        cell_cfg = replace(cfg, seed=seed)
        params, report = train(config, batch, cell_cfg, val_units=val_units)
        preds = _predict_chunked(x_va, params, config, cfg.label_scale)
        return GridCell(
            conv_filters=f, lstm_units=u,
            rmse=_rmse(preds, y_va),
            score=_sf(preds, y_va),
            seed=seed, best_epoch=report.best_epoch,
        )

    cells: list[GridCell] = []
    best: GridCell | None = None
    if explore == "full" and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        pairs = [(f, u) for f in filters for u in lstm_units]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, f, u) for f, u in pairs]
            cells = [fut.result() for fut in futures]
        for cell in cells:
            if _better(cell, best):
                best = cell
    else:
        for f in filters:
            row_best: GridCell | None = None
            row_improved_global = False
            for u in lstm_units:
                cell = run_cell(f, u)
                cells.append(cell)
                if _better(cell, best):
                    best = cell
                    row_improved_global = True
                if row_best is None or _better(cell, row_best):
                    row_best = cell
                elif explore == "greedy":
                    # this width did not improve the row; stop extending it
                    break
            if explore == "greedy" and not row_improved_global:
                # a whole row without global improvement ends the filter axis
                break
    assert best is not None
    return GridResult(best=best, cells=cells)


def _predict_chunked(x, params, config, label_scale: float, chunk: int = 512) -> np.ndarray:
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        hi = min(lo + chunk, x.shape[0])
        out[lo:hi] = network.predict(x[lo:hi], params, config, label_scale)
    return out


def _better(a: GridCell, b: GridCell | None) -> bool:
    if b is None:
        return True
    if a.rmse != b.rmse:
        return a.rmse < b.rmse
    return a.score < b.score

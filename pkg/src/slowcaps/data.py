"""Dataset access: turbofan text files, milling CSV, synthetic generator.

All loaders are pure: they read files (or an RNG) and return in-memory
structures, never writing anything.  Units come back sorted by id with
cycle-ordered samples, and every series records its change point, the
sample index where the degradation stage begins.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "RunToFailureSeries",
    "MillingRun",
    "SyntheticSpec",
    "load_cmapss",
    "load_milling",
    "milling_protocol_split",
    "generate_synthetic",
    "export_cmapss_format",
    "split_units",
]

log = logging.getLogger("slowcaps.data")

CMAPSS_SETTINGS = 3
CMAPSS_SENSORS = 21
MILLING_SENSORS = 6
MILLING_SAMPLES_PER_RUN = 90
MILLING_WEAR_THRESHOLD = 0.45
MILLING_COLUMNS = [
    "case", "run", "material", "doc", "feed", "speed",
    "smcac", "smcdc", "vib_table", "vib_spindle", "ae_table", "ae_spindle",
    "vb",
]


@dataclass
class RunToFailureSeries:
    """One unit's multivariate sensor history.

    ``change_point`` is the 1-based index of the last normal-stage
    sample; samples after it belong to the degradation stage.  For
    truncated evaluation units the residual life at the final cycle is
    stored in ``true_rul`` and the change point is informational only.
    """

    unit_id: str
    sensors: np.ndarray
    change_point: int
    settings: np.ndarray | None = None
    true_rul: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sensors = np.asarray(self.sensors, dtype=np.float64)
        if self.sensors.ndim != 2 or self.sensors.shape[0] < 1:
            raise ValueError(f"unit {self.unit_id}: sensors must be a nonempty matrix")
        if self.settings is not None:
            self.settings = np.asarray(self.settings, dtype=np.float64)
            if self.settings.shape[0] != self.sensors.shape[0]:
                raise ValueError(f"unit {self.unit_id}: settings rows do not match sensors")
        if not 0 <= self.change_point <= self.length:
            raise ValueError(
                f"unit {self.unit_id}: change point {self.change_point} outside "
                f"series of length {self.length}"
            )

    @property
    def length(self) -> int:
        return self.sensors.shape[0]

    @property
    def n_channels(self) -> int:
        return self.sensors.shape[1]

    def normal_part(self) -> np.ndarray:
        return self.sensors[: self.change_point]

    def degradation_part(self) -> np.ndarray:
        return self.sensors[self.change_point :]


def _read_space_table(path) -> list[list[float]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                rows.append([float(tok) for tok in stripped.split()])
            except ValueError as exc:
                raise ValueError(f"{path}: malformed row at line {ln}") from exc
    if not rows:
        raise ValueError(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent column counts {sorted(widths)}")
    return rows


def _group_cmapss_units(rows: list[list[float]], path, n_sensors: int):
    width = len(rows[0])
    expected = 2 + CMAPSS_SETTINGS + n_sensors
    if width != expected:
        raise ValueError(
            f"{path}: expected {expected} columns "
            f"(unit, cycle, {CMAPSS_SETTINGS} settings, {n_sensors} sensors), got {width}"
        )
    arr = np.asarray(rows)
    units = []
    for uid in np.unique(arr[:, 0]).astype(int):
        block = arr[arr[:, 0] == uid]
        order = np.argsort(block[:, 1], kind="stable")
        block = block[order]
        cycles = block[:, 1].astype(int)
        if not np.array_equal(cycles, np.arange(1, len(cycles) + 1)):
            raise ValueError(
                f"{path}: unit {uid} cycles are not contiguous from 1"
            )
        units.append((uid, block[:, 2 : 2 + CMAPSS_SETTINGS],
                      block[:, 2 + CMAPSS_SETTINGS :]))
    return units


def _count_conditions(all_settings: np.ndarray) -> int:
    return int(np.unique(np.round(all_settings, 1), axis=0).shape[0])


def load_cmapss(
    train_path,
    test_path=None,
    rul_path=None,
    rul_max: float = 125.0,
    n_sensors: int = CMAPSS_SENSORS,
) -> dict:
    """Load a turbofan dataset in the standard whitespace text layout.

    Rows are: unit id, cycle, three operational settings, then the
    sensor columns.  Training units run to failure, so the change point
    is placed rul_max cycles before the end.  Test units are truncated;
    their residual life comes from the companion file of one integer per
    unit.  Returns a dict with "train", "test" (series lists) and
    "manifest".
    """
    train_units = _group_cmapss_units(_read_space_table(train_path), train_path, n_sensors)
    train = []
    for uid, settings, sensors in train_units:
        k = sensors.shape[0]
        cp = int(k - rul_max)
        if cp < 1:
            log.warning(
                "unit %s: length %d does not exceed rul_max %s; "
                "treating the first sample as the only normal one", uid, k, rul_max
            )
            cp = 1
        train.append(RunToFailureSeries(
            unit_id=str(uid), sensors=sensors, change_point=cp, settings=settings,
        ))
    test = []
    if test_path is not None:
        if rul_path is None:
            raise ValueError("test data requires the residual-life file")
        test_units = _group_cmapss_units(_read_space_table(test_path), test_path, n_sensors)
        ruls = [r[0] for r in _read_space_table(rul_path)]
        if len(ruls) != len(test_units):
            raise ValueError(
                f"residual-life file has {len(ruls)} entries for "
                f"{len(test_units)} test units"
            )
        for (uid, settings, sensors), rul in zip(test_units, ruls):
            test.append(RunToFailureSeries(
                unit_id=str(uid), sensors=sensors, change_point=sensors.shape[0],
                settings=settings, true_rul=float(rul),
            ))
    all_settings = np.vstack([s.settings for s in train] + [s.settings for s in test])
    manifest = {
        "train_units": len(train),
        "test_units": len(test),
        "sensors": n_sensors,
        "operating_conditions": _count_conditions(all_settings),
        "rul_max": float(rul_max),
    }
    return {"train": train, "test": test, "manifest": manifest}


@dataclass
class MillingRun:
    """One milling cut: fixed-length sensor block plus wear bookkeeping.

    ``rul`` counts remaining cuts until flank wear first exceeds the
    threshold within the same case; the first cut of each case is
    flagged normal.
    """

    case_id: int
    run_id: int
    material: int
    params: np.ndarray
    sensors: np.ndarray
    wear: float | None
    wear_filled: float = np.nan
    rul: float = np.nan
    is_normal: bool = False

    @property
    def unit_id(self) -> str:
        return f"c{self.case_id:02d}r{self.run_id:02d}"


def load_milling(
    csv_path,
    wear_threshold: float = MILLING_WEAR_THRESHOLD,
    samples_per_run: int = MILLING_SAMPLES_PER_RUN,
) -> dict:
    """Load the milling CSV (one row per sample, runs of fixed length).

    Columns: case, run, material, three cutting parameters, six sensor
    channels, and the measured flank wear (may be empty on unmeasured
    runs).  Missing wear values are filled by linear interpolation over
    run order within each case, clamped at the ends.  Per-run labels
    count the cuts remaining until wear first exceeds ``wear_threshold``.
    """
    path = Path(csv_path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if [h.strip() for h in header] != MILLING_COLUMNS:
            raise ValueError(
                f"{path}: unexpected header; want {','.join(MILLING_COLUMNS)}"
            )
        raw: dict[tuple[int, int], dict] = {}
        for ln, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MILLING_COLUMNS):
                raise ValueError(f"{path}: wrong column count at line {ln}")
            try:
                case = int(row[0])
                run = int(row[1])
                material = int(row[2])
                params = [float(x) for x in row[3:6]]
                sensors = [float(x) for x in row[6:12]]
                wear = float(row[12]) if row[12].strip() else None
            except ValueError as exc:
                raise ValueError(f"{path}: malformed row at line {ln}") from exc
            entry = raw.setdefault(
                (case, run),
                {"material": material, "params": params, "sensors": [], "wear": wear},
            )
            entry["sensors"].append(sensors)
            if wear is not None:
                entry["wear"] = wear
    runs: list[MillingRun] = []
    for (case, run), entry in sorted(raw.items()):
        block = np.asarray(entry["sensors"], dtype=np.float64)
        if block.shape[0] != samples_per_run:
            raise ValueError(
                f"{path}: case {case} run {run} has {block.shape[0]} samples, "
                f"expected {samples_per_run}"
            )
        runs.append(MillingRun(
            case_id=case, run_id=run, material=int(entry["material"]),
            params=np.asarray(entry["params"]), sensors=block, wear=entry["wear"],
        ))
    if not runs:
        raise ValueError(f"{path}: no runs found")
    _fill_wear_and_label(runs, wear_threshold)
    cases = sorted({r.case_id for r in runs})
    materials = {}
    for r in runs:
        materials.setdefault(r.material, set()).add(r.case_id)
    manifest = {
        "runs": len(runs),
        "cases": len(cases),
        "runs_by_material": {str(m): sum(1 for r in runs if r.material == m)
                             for m in sorted(materials)},
        "wear_threshold": float(wear_threshold),
    }
    return {"runs": runs, "manifest": manifest}


def _fill_wear_and_label(runs: list[MillingRun], threshold: float) -> None:
    by_case: dict[int, list[MillingRun]] = {}
    for r in runs:
        by_case.setdefault(r.case_id, []).append(r)
    for case, case_runs in by_case.items():
        case_runs.sort(key=lambda r: r.run_id)
        order = np.arange(len(case_runs), dtype=np.float64)
        measured = [(i, r.wear) for i, r in enumerate(case_runs) if r.wear is not None]
        if not measured:
            raise ValueError(f"case {case}: no wear measurements at all")
        xi = np.asarray([m[0] for m in measured], dtype=np.float64)
        yi = np.asarray([m[1] for m in measured], dtype=np.float64)
        filled = np.interp(order, xi, yi)
        exceed = np.flatnonzero(filled > threshold)
        if exceed.size:
            fail_at = int(exceed[0])
        else:
            fail_at = len(case_runs)
            log.warning(
                "case %s never exceeds wear threshold %.2f; labeling from end of record",
                case, threshold,
            )
        for i, r in enumerate(case_runs):
            r.wear_filled = float(filled[i])
            r.rul = float(max(fail_at - i, 0))
            r.is_normal = i == 0


def milling_protocol_split(
    runs: list[MillingRun],
    train_cases_primary: int = 9,
    train_cases_secondary: int = 2,
) -> tuple[list[MillingRun], list[MillingRun]]:
    """Case-level split: first N cases of each material train, rest test.

    Materials are taken in ascending id; the first
    ``train_cases_primary`` cases of the first material and the first
    ``train_cases_secondary`` of the second go to training.
    """
    materials = sorted({r.material for r in runs})
    if len(materials) != 2:
        raise ValueError(f"protocol split expects two materials, got {materials}")
    quota = {materials[0]: train_cases_primary, materials[1]: train_cases_secondary}
    train_cases = set()
    for m in materials:
        cases = sorted({r.case_id for r in runs if r.material == m})
        if len(cases) < quota[m]:
            raise ValueError(
                f"material {m} has {len(cases)} cases, fewer than the "
                f"{quota[m]} requested for training"
            )
        train_cases.update(cases[: quota[m]])
    train = [r for r in runs if r.case_id in train_cases]
    test = [r for r in runs if r.case_id not in train_cases]
    return train, test


@dataclass
class SyntheticSpec:
    """Generator settings for run-to-failure series with planted structure.

    Hidden slow latents are low-frequency sinusoids; after each unit's
    change point the designated latent also drifts linearly, so the
    label is driven by the slowest structure in the data.  Channels are
    a fixed random mixing of the latents plus white noise.
    """

    channels: int = 6
    latents: int = 2
    periods: tuple[float, ...] = (430.0, 170.0)
    drift_latent: int = 0
    drift_slope: float = 0.02
    noise_scale: float = 0.1
    units: int = 20
    length_range: tuple[int, int] = (280, 320)
    rul_max: float = 120.0
    change_fraction: tuple[float, float] | None = None
    mixing: np.ndarray | str | None = None

    def __post_init__(self):
        if self.channels < 1 or self.latents < 1:
            raise ValueError("channels and latents must be positive")
        if self.latents > self.channels:
            raise ValueError("cannot mix more latents than channels")
        if len(self.periods) != self.latents:
            raise ValueError("need one period per latent")
        if not 0 <= self.drift_latent < self.latents:
            raise ValueError("drift latent index out of range")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be >= 0")
        if self.units < 1:
            raise ValueError("need at least one unit")
        lo, hi = self.length_range
        if lo < 2 or hi < lo:
            raise ValueError(f"bad length range {self.length_range}")
        if self.rul_max <= 0:
            raise ValueError("rul_max must be positive")


def generate_synthetic(spec: SyntheticSpec, seed: int) -> dict:
    """Generate units under ``spec``; fully determined by ``seed``.

    Returns {"series": [...], "truth": {...}} where truth carries the
    mixing matrix, per-unit latent paths and change points for oracle
    checks.
    """
    root = np.random.SeedSequence(seed)
    mix_ss, unit_ss = root.spawn(2)
    rng_mix = np.random.default_rng(mix_ss)
    if isinstance(spec.mixing, str):
        if spec.mixing != "identity":
            raise ValueError(f"unknown mixing preset {spec.mixing!r}")
        if spec.channels != spec.latents:
            raise ValueError("identity mixing needs channels == latents")
        mixing = np.eye(spec.latents)
    elif spec.mixing is not None:
        mixing = np.asarray(spec.mixing, dtype=np.float64)
        if mixing.shape != (spec.latents, spec.channels):
            raise ValueError(
                f"mixing must have shape ({spec.latents}, {spec.channels})"
            )
    else:
        mixing = rng_mix.normal(0.0, 1.0, size=(spec.latents, spec.channels))
        mixing /= np.sqrt(spec.latents)
    rng = np.random.default_rng(unit_ss)
    lo, hi = spec.length_range
    series = []
    truth_units = []
    for u in range(spec.units):
        k_c = int(rng.integers(lo, hi + 1))
        if spec.change_fraction is None:
            cp = max(int(k_c - spec.rul_max), 1)
        else:
            flo, fhi = spec.change_fraction
            cp = int(np.clip(round(rng.uniform(flo, fhi) * k_c), 1, k_c - 1))
        t = np.arange(1, k_c + 1, dtype=np.float64)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.latents)
        latents = np.stack(
            [np.sin(2.0 * np.pi * t / p + ph) for p, ph in zip(spec.periods, phases)],
            axis=1,
        )
        drift = np.maximum(t - cp, 0.0) * spec.drift_slope
        latents[:, spec.drift_latent] += drift
        noise = rng.normal(0.0, spec.noise_scale, size=(k_c, spec.channels)) \
            if spec.noise_scale > 0 else np.zeros((k_c, spec.channels))
        sensors = latents @ mixing + noise
        uid = f"s{u + 1:03d}"
        series.append(RunToFailureSeries(
            unit_id=uid, sensors=sensors, change_point=cp,
            settings=np.zeros((k_c, CMAPSS_SETTINGS)),
        ))
        truth_units.append({"unit_id": uid, "change_point": cp, "latents": latents})
    return {
        "series": series,
        "truth": {"mixing": mixing, "units": truth_units, "spec": spec},
    }


def export_cmapss_format(
    series: list[RunToFailureSeries],
    out_dir,
    tag: str = "synthetic",
    truncate_for_test: bool = False,
    rng: np.random.Generator | None = None,
    rul_max: float | None = None,
) -> dict[str, Path]:
    """Write series in the turbofan text layout so loaders stay uniform.

    With ``truncate_for_test`` each unit is cut short of failure by a
    uniform number of cycles (at most 80 percent of ``rul_max``) and the
    residual-life file is emitted alongside.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if truncate_for_test:
        if rng is None or rul_max is None:
            raise ValueError("test export needs an rng and rul_max")
        data_path = out / f"test_{tag}.txt"
        rul_path = out / f"RUL_{tag}.txt"
    else:
        data_path = out / f"train_{tag}.txt"
        rul_path = None
    lines = []
    ruls = []
    for idx, s in enumerate(series, start=1):
        k = s.length
        if truncate_for_test:
            residual = int(rng.integers(0, int(0.8 * rul_max) + 1))
            residual = min(residual, k - max(s.change_point, 1) - 1)
            residual = max(residual, 0)
            end = k - residual
            ruls.append(residual)
        else:
            end = k
        settings = s.settings if s.settings is not None else np.zeros((k, CMAPSS_SETTINGS))
        for row in range(end):
            vals = [f"{idx:d}", f"{row + 1:d}"]
            vals += [f"{v:.6f}" for v in settings[row]]
            vals += [f"{v:.6f}" for v in s.sensors[row]]
            lines.append(" ".join(vals))
    data_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths = {"data": data_path}
    if rul_path is not None:
        rul_path.write_text("\n".join(str(r) for r in ruls) + "\n", encoding="utf-8")
        paths["rul"] = rul_path
    return paths


def split_units(
    series: list[RunToFailureSeries],
    fraction: float,
    rng: np.random.Generator,
) -> tuple[list[RunToFailureSeries], list[RunToFailureSeries]]:
    """Partition whole units at random; no unit contributes to both sides."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if len(series) < 2:
        raise ValueError("need at least two units to split")
    n_held = int(round(fraction * len(series)))
    n_held = min(max(n_held, 1), len(series) - 1)
    order = rng.permutation(len(series))
    held_idx = set(order[:n_held].tolist())
    held = [s for i, s in enumerate(series) if i in held_idx]
    kept = [s for i, s in enumerate(series) if i not in held_idx]
    return kept, held

"""Well production data: ingest, gap filling, min-max scaling, windowing, splitting.

A well is held as a :class:`WellSeries` of daily records. The pipeline that
turns it into model inputs is

    load_series -> interpolate_missing -> fit_scaler/apply_scaler
                -> make_windows -> split_chronological

and, for the multi-well model, :func:`build_global` appends one-hot well
identity columns and merges the per-well sample lists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractError, DataError, SchemaError

CANONICAL_COLUMNS = ("oil_rate", "gas_rate", "water_rate", "bhp", "bht", "choke_pct", "liquid_rate")

# choke held constant for lo..hi-1 days at a time
_SEGMENT_DAYS = (1, 6)

_FEATURES = {
    ("full", "bhp"): ("oil_rate", "gas_rate", "water_rate", "bht", "choke_pct"),
    ("reduced", "bhp"): ("choke_pct", "bht"),
    ("full", "liquid_rate"): ("bhp", "bht", "choke_pct"),
}


@dataclass
class WellSeries:
    """Daily records for one well; ``missing[name]`` is True where a cell was blank."""

    well_id: str
    dates: np.ndarray
    columns: Dict[str, np.ndarray]
    missing: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        n = len(self.dates)
        if n > 1 and not np.all(np.diff(self.dates.astype(np.int64)) > 0):
            raise DataError(f"{self.well_id}: dates are not strictly increasing")
        for name, col in self.columns.items():
            if len(col) != n:
                raise DataError(f"{self.well_id}: column {name} has {len(col)} values for {n} dates")
        for name in self.columns:
            if name not in self.missing:
                self.missing[name] = np.isnan(self.columns[name])

    def __len__(self) -> int:
        return len(self.dates)

    def replace(self, columns: Dict[str, np.ndarray], missing: Optional[Dict[str, np.ndarray]] = None) -> "WellSeries":
        return WellSeries(self.well_id, self.dates.copy(), columns,
                          dict(self.missing) if missing is None else missing)


@dataclass(frozen=True)
class FeatureSet:
    mode: str = "full"
    target: str = "bhp"

    def __post_init__(self):
        if (self.mode, self.target) not in _FEATURES:
            if self.target not in ("bhp", "liquid_rate") or self.mode not in ("full", "reduced"):
                raise ConfigError(f"unknown feature set {self.mode}/{self.target}")
            raise ConfigError("the reduced feature set is only defined for target=bhp")

    @property
    def features(self) -> Tuple[str, ...]:
        return _FEATURES[(self.mode, self.target)]

    @property
    def columns(self) -> Tuple[str, ...]:
        """Every column the pipeline reads: inputs followed by the target."""
        return self.features + (self.target,)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "target": self.target, "features": list(self.features)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureSet":
        return cls(data["mode"], data["target"])


@dataclass
class ScalerParams:
    """Per-feature minimum and maximum taken from the training range."""

    features: List[str]
    mins: Dict[str, float]
    maxs: Dict[str, float]

    def scale(self, name: str, values: np.ndarray) -> np.ndarray:
        lo, hi = self.mins[name], self.maxs[name]
        if hi == lo:
            return np.zeros_like(np.asarray(values, dtype=np.float64))
        return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)

    def inverse(self, name: str, values: np.ndarray) -> np.ndarray:
        lo, hi = self.mins[name], self.maxs[name]
        return np.asarray(values, dtype=np.float64) * (hi - lo) + lo

    def to_json(self) -> dict:
        return {f: {"min": self.mins[f], "max": self.maxs[f]} for f in self.features}

    @classmethod
    def from_json(cls, data: Mapping) -> "ScalerParams":
        feats = list(data)
        return cls(feats, {f: float(data[f]["min"]) for f in feats}, {f: float(data[f]["max"]) for f in feats})

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScalerParams":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Sample:
    window: np.ndarray
    target: float
    pad_len: int
    date: np.datetime64
    well_id: str = ""
    well_onehot: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class DatasetSplits:
    train: List[Sample]
    validation: List[Sample]
    test: List[Sample]

    def get(self, name: str) -> List[Sample]:
        if name not in ("train", "validation", "test"):
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def load_mapping(path: Union[str, Path, None]) -> Dict[str, str]:
    if path is None:
        return {}
    try:
        mapping = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"column mapping file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"column mapping {path} is not valid JSON: {exc}") from None
    if not isinstance(mapping, dict):
        raise ConfigError(f"column mapping {path} must be a JSON object")
    return {str(k): str(v) for k, v in mapping.items()}


def _parse_float(cell: str) -> float:
    # float() round-trips repr output exactly, unlike pandas' fast parser
    try:
        value = float(cell)
    except ValueError:
        return math.nan
    return value if math.isfinite(value) else math.nan


def load_series(
    path: Union[str, Path],
    mapping: Union[Mapping[str, str], str, Path, None] = None,
    required: Optional[Sequence[str]] = None,
    well_id: Optional[str] = None,
) -> WellSeries:
    """Read one well's CSV into a :class:`WellSeries` sorted by date.

    ``mapping`` renames source headers to canonical names (dict or JSON
    file). ``required`` lists canonical columns that must be present; other
    canonical columns are kept when available. Blank or unparseable cells
    become missing values.
    """
    path = Path(path)
    if not isinstance(mapping, Mapping):
        mapping = load_mapping(mapping)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"well file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    frame = frame.rename(columns=dict(mapping))
    if "date" not in frame.columns:
        raise SchemaError(f"{path}: no 'date' column")
    if frame.empty:
        raise DataError(f"{path} has a header but no rows")
    for name in required or ():
        if name not in frame.columns:
            raise SchemaError(f"{path}: missing required column '{name}'")

    try:
        dates = pd.to_datetime(frame["date"].str.strip(), format="%Y-%m-%d").to_numpy().astype("datetime64[D]")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unparseable date: {exc}") from None
    uniq, counts = np.unique(dates, return_counts=True)
    if np.any(counts > 1):
        raise DataError(f"{path}: duplicate date {np.datetime_as_string(uniq[counts > 1][0])}")
    order = np.argsort(dates, kind="stable")

    columns = {}
    for name in CANONICAL_COLUMNS:
        if name in frame.columns:
            columns[name] = np.array([_parse_float(v) for v in frame[name]])[order]
    return WellSeries(well_id or path.stem, dates[order], columns)


def with_liquid_rate(series: WellSeries) -> WellSeries:
    """Add ``liquid_rate = oil_rate + water_rate`` when the file lacks it."""
    if "liquid_rate" in series.columns:
        return series
    if "oil_rate" not in series.columns or "water_rate" not in series.columns:
        raise SchemaError(f"{series.well_id}: liquid_rate absent and cannot be derived from oil/water rates")
    cols = dict(series.columns)
    cols["liquid_rate"] = cols["oil_rate"] + cols["water_rate"]
    miss = dict(series.missing)
    miss["liquid_rate"] = np.isnan(cols["liquid_rate"])
    return series.replace(cols, miss)


def interpolate_missing(series: WellSeries, columns: Optional[Sequence[str]] = None) -> WellSeries:
    """Fill gaps linearly in time; leading/trailing gaps hold the nearest observed value."""
    names = list(columns) if columns is not None else list(series.columns)
    days = series.dates.astype(np.int64).astype(np.float64)
    cols = dict(series.columns)
    for name in names:
        if name not in cols:
            raise SchemaError(f"{series.well_id}: no column '{name}' to interpolate")
        col = cols[name]
        seen = ~np.isnan(col)
        if seen.sum() < 2:
            raise DataError(f"{series.well_id}: column '{name}' has fewer than 2 observed values")
        if seen.all():
            continue
        # np.interp clamps outside the observed range, which is the edge-hold rule
        cols[name] = np.interp(days, days[seen], col[seen])
    return series.replace(cols)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def _names(features: Union[FeatureSet, Sequence[str]]) -> List[str]:
    return list(features.columns) if isinstance(features, FeatureSet) else list(features)


def fit_scaler(
    series: Union[WellSeries, Sequence[WellSeries]],
    features: Union[FeatureSet, Sequence[str]],
    train_end: Optional[int] = None,
) -> ScalerParams:
    """Min/max of each column over the first ``train_end`` rows.

    Several series can be passed to pool the statistics (global model);
    ``train_end`` then applies to each one as its own training cut.
    """
    group = [series] if isinstance(series, WellSeries) else list(series)
    names = _names(features)
    mins, maxs = {}, {}
    for name in names:
        chunks = []
        for s in group:
            end = train_rows(len(s)) if train_end is None else train_end
            if name not in s.columns:
                raise SchemaError(f"{s.well_id}: missing column '{name}'")
            chunks.append(s.columns[name][:end])
        values = np.concatenate(chunks)
        if values.size == 0 or np.isnan(values).all():
            raise DataError(f"no training values for '{name}'")
        mins[name] = float(np.nanmin(values))
        maxs[name] = float(np.nanmax(values))
    return ScalerParams(names, mins, maxs)


def apply_scaler(series: WellSeries, params: ScalerParams) -> WellSeries:
    cols = dict(series.columns)
    for name in params.features:
        if name not in cols:
            raise SchemaError(f"{series.well_id}: missing column '{name}'")
        cols[name] = params.scale(name, cols[name])
    return series.replace(cols)


def inverse_scale(values: np.ndarray, params: ScalerParams, name: str) -> np.ndarray:
    return params.inverse(name, values)


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

def make_windows(series: WellSeries, window: int, features: FeatureSet) -> List[Sample]:
    """One sample per day: the last ``window`` rows of inputs, zero-padded at the start."""
    if window < 1:
        raise ContractError(f"window length must be positive, got {window}")
    if features.target in features.features:
        raise ContractError(f"target {features.target} is also an input feature")
    T = len(series)
    if T < 1:
        raise DataError(f"{series.well_id}: empty series")
    for name in features.columns:
        if name not in series.columns:
            raise SchemaError(f"{series.well_id}: missing column '{name}'")
    inputs = np.column_stack([series.columns[n] for n in features.features])
    if np.isnan(inputs).any() or np.isnan(series.columns[features.target]).any():
        raise DataError(f"{series.well_id}: missing values remain; interpolate first")
    padded = np.vstack([np.zeros((window - 1, inputs.shape[1])), inputs])
    target = series.columns[features.target]
    samples = []
    for t in range(T):
        samples.append(Sample(
            window=padded[t:t + window].copy(),
            target=float(target[t]),
            pad_len=max(0, window - 1 - t),
            date=series.dates[t],
            well_id=series.well_id,
        ))
    return samples


def _cuts(T: int, ratios: Sequence[float]) -> Tuple[int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ContractError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    # the small slack keeps e.g. 0.85 * 20 from flooring to 16
    first = math.floor(ratios[0] * T + 1e-9)
    second = math.floor((ratios[0] + ratios[1]) * T + 1e-9)
    return first, second


def train_rows(T: int, ratios: Sequence[float] = (0.70, 0.15, 0.15)) -> int:
    """Number of leading days whose samples land in the training split."""
    return _cuts(T, ratios)[0]


def split_chronological(samples: Sequence[Sample], ratios: Sequence[float] = (0.70, 0.15, 0.15)) -> DatasetSplits:
    first, second = _cuts(len(samples), ratios)
    splits = DatasetSplits(list(samples[:first]), list(samples[first:second]), list(samples[second:]))
    for name in ("train", "validation", "test"):
        if not splits.get(name):
            raise DataError(f"{name} split is empty for {len(samples)} samples")
    return splits


def build_global(wells: Sequence[Sequence[Sample]], ids: Sequence[str]) -> List[Sample]:
    """Append one-hot well columns to every window and merge the wells by date.

    Padded rows stay all-zero, including their one-hot columns.
    """
    W = len(wells)
    if W < 2:
        raise ContractError("the global model needs at least 2 wells")
    if len(ids) != W:
        raise ContractError(f"{W} sample lists but {len(ids)} well ids")
    shapes = {s.window.shape for group in wells for s in group}
    if len(shapes) > 1:
        raise ContractError(f"wells disagree on window shape: {sorted(shapes)}")
    merged = []
    for idx, (group, wid) in enumerate(zip(wells, ids)):
        onehot = np.zeros(W)
        onehot[idx] = 1.0
        for s in group:
            n = s.window.shape[0]
            extra = np.tile(onehot, (n, 1))
            extra[:s.pad_len] = 0.0
            merged.append((s.date, idx, Sample(
                window=np.hstack([s.window, extra]),
                target=s.target,
                pad_len=s.pad_len,
                date=s.date,
                well_id=wid,
                well_onehot=onehot.copy(),
            )))
    merged.sort(key=lambda item: (item[0], item[1]))
    return [s for _, _, s in merged]


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Arrays ``X[B, N, M]`` and ``y[B]`` for a sample list."""
    if not samples:
        raise DataError("no samples to stack")
    X = np.stack([s.window for s in samples])
    y = np.array([s.target for s in samples], dtype=np.float64)
    return X, y


# ---------------------------------------------------------------------------
# end-to-end preparation
# ---------------------------------------------------------------------------

def clean(series: WellSeries, features: FeatureSet) -> WellSeries:
    if features.target == "liquid_rate" or "liquid_rate" in features.features:
        series = with_liquid_rate(series)
    for name in features.columns:
        if name not in series.columns:
            raise SchemaError(f"{series.well_id}: missing column '{name}'")
    return interpolate_missing(series, features.columns)


def prepare_well(
    series: WellSeries,
    features: FeatureSet,
    window: int,
    scaler: Optional[ScalerParams] = None,
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
) -> Tuple[ScalerParams, DatasetSplits]:
    """Clean, scale (fitting on the training range unless ``scaler`` is given), window and split."""
    series = clean(series, features)
    if scaler is None:
        scaler = fit_scaler(series, features, train_rows(len(series), ratios))
    samples = make_windows(apply_scaler(series, scaler), window, features)
    return scaler, split_chronological(samples, ratios)


def prepare_global(
    wells: Sequence[WellSeries],
    features: FeatureSet,
    window: int,
    scaler: Optional[ScalerParams] = None,
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
) -> Tuple[ScalerParams, DatasetSplits, Dict[str, DatasetSplits]]:
    """Global-model datasets: pooled scaler, per-well splits merged split by split.

    Returns the scaler, the merged splits and each well's own (one-hot
    augmented) splits for per-well reporting.
    """
    if len(wells) < 2:
        raise ContractError("the global model needs at least 2 wells")
    ids = [w.well_id for w in wells]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate well ids: {ids}")
    cleaned = [clean(w, features) for w in wells]
    if scaler is None:
        scaler = fit_scaler(cleaned, features)
    per_well_samples = [make_windows(apply_scaler(w, scaler), window, features) for w in cleaned]
    per_well = {}
    merged = {"train": [], "validation": [], "test": []}
    splits_by_well = [split_chronological(s, ratios) for s in per_well_samples]
    for name in merged:
        parts = [sp.get(name) for sp in splits_by_well]
        augmented = build_global(parts, ids)
        merged[name] = augmented
        for wid in ids:
            per_well.setdefault(wid, {})[name] = [s for s in augmented if s.well_id == wid]
    return (
        scaler,
        DatasetSplits(merged["train"], merged["validation"], merged["test"]),
        {wid: DatasetSplits(d["train"], d["validation"], d["test"]) for wid, d in per_well.items()},
    )


def onehot_samples(samples: Sequence[Sample], index: int, n_wells: int) -> List[Sample]:
    """Attach well ``index`` of ``n_wells`` one-hot columns to a single well's samples."""
    onehot = np.zeros(n_wells)
    onehot[index] = 1.0
    out = []
    for s in samples:
        extra = np.tile(onehot, (s.window.shape[0], 1))
        extra[:s.pad_len] = 0.0
        out.append(Sample(np.hstack([s.window, extra]), s.target, s.pad_len, s.date, s.well_id, onehot.copy()))
    return out


# ---------------------------------------------------------------------------
# synthetic wells
# ---------------------------------------------------------------------------

def generate_synthetic(
    seed: int,
    days: int,
    wells: int = 1,
    coupling: float = 0.0,
    lag: int = 0,
    missing_rate: float = 0.02,
    start: str = "2014-04-01",
    noise_seed: Optional[int] = None,
) -> List[WellSeries]:
    """Deterministic synthetic wells driven by piecewise-constant choke schedules.

    Liquid rate follows the choke (``q = k * choke * (1 + noise)``) and is
    split into phases by fixed fractions. Bottomhole pressure drops with the
    well's own rate ``lag`` days earlier, with ``coupling`` times the summed
    neighbour rates (interference) and with the day-to-day rate change
    (transient term). About ``missing_rate`` of the measured cells are blanked.

    ``seed`` fixes the well constants (productivity, reservoir pressure).
    Choke schedules, noise and blanking come from ``noise_seed`` when given,
    so two calls sharing ``seed`` describe the same wells operated differently.
    """
    if days < 50:
        raise ContractError(f"need at least 50 days, got {days}")
    if wells < 1:
        raise ContractError(f"need at least one well, got {wells}")
    if not 0.0 <= coupling <= 1.0:
        raise ContractError(f"coupling must lie in [0, 1], got {coupling}")
    if not 0 <= lag < days:
        raise ContractError(f"lag must lie in [0, days), got {lag}")
    const = np.random.default_rng([seed, 0])
    productivity = const.uniform(5.0, 7.0, wells)
    reservoir = const.uniform(230.0, 270.0, wells)
    rng = np.random.default_rng([seed if noise_seed is None else noise_seed, 1])
    dates = np.datetime64(start, "D") + np.arange(days)

    chokes, rates = [], []
    for i in range(wells):
        choke = np.empty(days)
        t = 0
        while t < days:
            span = int(rng.integers(*_SEGMENT_DAYS))
            choke[t:t + span] = rng.uniform(20.0, 100.0)
            t += span
        chokes.append(choke)
        rates.append(productivity[i] * choke * (1.0 + rng.normal(0.0, 0.01, days)))

    def delayed(q):
        return np.concatenate([np.full(lag, q[0]), q[:days - lag]]) if lag else q

    total = sum(delayed(q) for q in rates)
    out = []
    a, b = 0.15, 0.05
    for i in range(wells):
        q = rates[i]
        p0 = reservoir[i]
        neighbours = total - delayed(q)
        dq = np.diff(q, prepend=q[0])
        bhp = p0 - a * delayed(q) - coupling * a * neighbours - b * dq
        bhp = bhp + rng.normal(0.0, 0.01 * np.ptp(bhp), days)
        bht = 95.0 + 0.01 * q
        bht = bht + rng.normal(0.0, 0.01 * np.ptp(bht), days)
        oil = 0.7 * q
        cols = {
            "oil_rate": oil,
            "gas_rate": 150.0 * oil,
            "water_rate": 0.3 * q,
            "bhp": bhp,
            "bht": bht,
            "choke_pct": chokes[i].copy(),
            "liquid_rate": q.copy(),
        }
        for name in cols:
            blank = rng.random(days) < missing_rate
            cols[name] = np.where(blank, np.nan, cols[name])
        out.append(WellSeries(f"well_{i}", dates.copy(), cols))
    return out


def write_series(series: WellSeries, path: Union[str, Path]) -> None:
    """Write a series as a canonical CSV (blank cells for missing values)."""
    frame = pd.DataFrame({"date": np.datetime_as_string(series.dates, unit="D")})
    for name in CANONICAL_COLUMNS:
        if name in series.columns:
            frame[name] = [repr(float(v)) if not np.isnan(v) else "" for v in series.columns[name]]
    frame.to_csv(path, index=False)

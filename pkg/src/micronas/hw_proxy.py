"""Linear ops->latency calibration and constant-power energy estimates per (backbone, MCU)."""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import jsonschema
import numpy as np

R2_FLOOR = 0.95
POWER_CV_LIMIT = 0.05
CSV_HEADER = ["model_id", "backbone_id", "mcu_id", "ops", "latency_ms", "power_mw"]


class CalibrationWarning(UserWarning):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class McuProfile:
    name: str
    sram_bytes: int
    flash_bytes: int
    nominal_power_mw: float

    def __post_init__(self):
        if min(self.sram_bytes, self.flash_bytes, self.nominal_power_mw) <= 0:
            raise SchemaError(f"profile {self.name!r}: fields must be positive")


@dataclass(frozen=True)
class MeasurementRow:
    model_id: str
    backbone_id: str
    mcu_id: str
    ops: float
    latency_ms: float
    power_mw: float | None = None

    def __post_init__(self):
        if self.ops <= 0:
            raise SchemaError(f"{self.model_id}: ops must be positive")
        if self.latency_ms <= 0:
            raise SchemaError(f"{self.model_id}: latency_ms must be positive")


@dataclass(frozen=True)
class HwProxyModel:
    backbone_id: str
    mcu_id: str
    slope_ms_per_mop: float
    intercept_ms: float
    r_squared: float
    mean_power_mw: float | None = None
    power_cv: float | None = None
    n_rows: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HwProxyModel":
        try:
            jsonschema.validate(d, _schema("hw_model.schema.json")["$defs"]["model"])
        except jsonschema.ValidationError as exc:
            raise SchemaError(exc.message) from None
        return cls(**d)


@dataclass(frozen=True)
class EnergyEstimate:
    energy_mj: float
    latency_ms: float
    power_mw: float
    low_confidence: bool


def _schema(name: str) -> dict:
    return json.loads(resources.files("micronas").joinpath("schemas", name).read_text())


# ---------------------------------------------------------------------------
# fitting / prediction
# ---------------------------------------------------------------------------


def _least_squares(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), min(max(r2, 0.0), 1.0)


def fit_latency_model(rows: Iterable[MeasurementRow], backbone_id: str | None = None, mcu_id: str | None = None) -> HwProxyModel:
    """Ordinary least squares ``latency_ms = slope * Mops + intercept`` for one group.

    Without an explicit group, all rows must share one (backbone, MCU) pair;
    mixing pairs still fits but warns, since each backbone has its own slope.
    """
    rows = list(rows)
    if backbone_id is not None:
        rows = [r for r in rows if r.backbone_id == backbone_id]
    if mcu_id is not None:
        rows = [r for r in rows if r.mcu_id == mcu_id]
    groups = {(r.backbone_id, r.mcu_id) for r in rows}
    if len(groups) > 1:
        warnings.warn(f"fitting one line across {len(groups)} backbone/MCU groups", CalibrationWarning, stacklevel=2)
    if len(rows) < 3:
        raise ValueError(f"need at least 3 measurements, got {len(rows)}")
    mops = np.array([r.ops for r in rows], dtype=float) / 1e6
    lat = np.array([r.latency_ms for r in rows], dtype=float)
    if np.ptp(mops) == 0:
        raise ValueError("ops are identical across rows; slope is undetermined")
    slope, intercept, r2 = _least_squares(mops, lat)
    bb = backbone_id or (rows[0].backbone_id if len(groups) == 1 else "mixed")
    mcu = mcu_id or (rows[0].mcu_id if len(groups) == 1 else "mixed")
    if r2 < R2_FLOOR:
        warnings.warn(f"{bb}/{mcu}: r^2 = {r2:.3f} below {R2_FLOOR}", CalibrationWarning, stacklevel=2)
    powers = np.array([r.power_mw for r in rows if r.power_mw is not None], dtype=float)
    mean_p = float(powers.mean()) if powers.size else None
    cv = float(powers.std() / powers.mean()) if powers.size else None
    return HwProxyModel(bb, mcu, slope, intercept, r2, mean_p, cv, len(rows))


def fit_all(rows: Iterable[MeasurementRow]) -> list[HwProxyModel]:
    groups = defaultdict(list)
    for r in rows:
        groups[(r.backbone_id, r.mcu_id)].append(r)
    return [fit_latency_model(g, bb, mcu) for (bb, mcu), g in sorted(groups.items())]


def predict_latency(model: HwProxyModel, ops: float) -> float:
    """Latency in ms; never below the fitted intercept, and never negative."""
    return max(model.slope_ms_per_mop * ops / 1e6 + model.intercept_ms, model.intercept_ms, 0.0)


def estimate_energy(model: HwProxyModel, ops: float) -> EnergyEstimate:
    if model.mean_power_mw is None:
        raise ValueError(f"{model.backbone_id}/{model.mcu_id}: no power measurements")
    latency = predict_latency(model, ops)
    low = model.power_cv is not None and model.power_cv > POWER_CV_LIMIT
    return EnergyEstimate(model.mean_power_mw * latency / 1000.0, latency, model.mean_power_mw, low)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_measurements(source) -> list[MeasurementRow]:
    """Parse a measurement CSV; errors name the 1-based data row."""
    text = Path(source).read_text(encoding="utf-8") if not isinstance(source, io.StringIO) else source.getvalue()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise SchemaError(f"expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
    rows = []
    for i, rec in enumerate(reader, start=1):
        try:
            power = rec["power_mw"].strip()
            rows.append(
                MeasurementRow(
                    rec["model_id"], rec["backbone_id"], rec["mcu_id"],
                    float(rec["ops"]), float(rec["latency_ms"]), float(power) if power else None,
                )
            )
        except (SchemaError, ValueError, TypeError, AttributeError) as exc:
            raise SchemaError(f"row {i}: {exc}") from None
    return rows


def write_measurements(rows: Iterable[MeasurementRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.model_id, r.backbone_id, r.mcu_id, int(r.ops), f"{r.latency_ms:.6f}",
                        "" if r.power_mw is None else f"{r.power_mw:.6f}"])


def load_profiles(source=None) -> dict[str, McuProfile]:
    """MCU profiles from a JSON document; the bundled set when ``source`` is None."""
    if source is None:
        doc = json.loads(resources.files("micronas").joinpath("data", "mcu_profiles.json").read_text())
    elif isinstance(source, dict):
        doc = source
    else:
        doc = json.loads(Path(source).read_text())
    try:
        jsonschema.validate(doc, _schema("profiles.schema.json"))
    except jsonschema.ValidationError as exc:
        raise SchemaError(exc.message) from None
    return {p["name"]: McuProfile(**p) for p in doc["profiles"]}


def save_models(models: Iterable[HwProxyModel], path) -> dict:
    doc = {"models": [m.to_dict() for m in models]}
    jsonschema.validate(doc, _schema("hw_model.schema.json"))
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def load_models(path) -> list[HwProxyModel]:
    doc = json.loads(Path(path).read_text())
    try:
        jsonschema.validate(doc, _schema("hw_model.schema.json"))
    except jsonschema.ValidationError as exc:
        raise SchemaError(exc.message) from None
    return [HwProxyModel(**m) for m in doc["models"]]


# Fictional devices used for the bundled calibration CSV: latency = a * Mops + b.
SYNTHETIC_LINES = {
    ("kws", "sim-m4"): (8.8, 12.0),
    ("kws", "sim-m7"): (4.4, 6.0),
    ("cifar", "sim-m4"): (12.3, 9.0),
    ("cifar", "sim-m7"): (6.2, 4.5),
}
SYNTHETIC_POWER = {"sim-m4": 160.0, "sim-m7": 445.0}


def synthetic_measurements(n_per_group: int = 200, noise: float = 0.02, seed: int = 0) -> list[MeasurementRow]:
    """Rows on known lines with multiplicative Gaussian noise of relative std ``noise``."""
    rng = np.random.default_rng(seed)
    rows = []
    for (bb, mcu), (a, b) in SYNTHETIC_LINES.items():
        mops = rng.uniform(2.0, 150.0, size=n_per_group)
        lat = (a * mops + b) * (1.0 + noise * rng.standard_normal(n_per_group))
        power = SYNTHETIC_POWER[mcu] * (1.0 + 0.005 * rng.standard_normal(n_per_group))
        for i in range(n_per_group):
            rows.append(MeasurementRow(f"{bb}-{i:03d}", bb, mcu, float(round(mops[i] * 1e6)), float(lat[i]), float(power[i])))
    return rows


def bundled_measurements_path() -> Path:
    return Path(str(resources.files("micronas").joinpath("data", "synthetic_measurements.csv")))

"""Forecast quality metrics in physical units: RMSE, RSE, RAE and MAPE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class MetricReport:
    rmse: float
    rse: Optional[float]
    rae: Optional[float]
    mape: Optional[float]
    n: int

    def to_json(self) -> dict:
        return {
            "rmse": self.rmse,
            "rse": self.rse,
            "rae": self.rae,
            "mape": self.mape,
            "n": self.n,
            "undefined": {
                "rmse": False,
                "rse": self.rse is None,
                "rae": self.rae is None,
                "mape": self.mape is None,
            },
        }

    @classmethod
    def from_json(cls, data) -> "MetricReport":
        return cls(data["rmse"], data["rse"], data["rae"], data["mape"], data["n"])


def evaluate(preds: Sequence[float], actuals: Sequence[float]) -> MetricReport:
    """Compare predictions with actual values.

    RSE and RAE normalise by the errors of the constant mean predictor and are
    reported as ``None`` when the actuals are constant. MAPE is a percentage
    averaged over the points and is ``None`` if any actual value is zero.
    """
    yhat = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(actuals, dtype=np.float64).reshape(-1)
    if yhat.size != y.size:
        raise ContractError(f"{yhat.size} predictions for {y.size} actual values")
    if y.size == 0:
        raise ContractError("cannot evaluate an empty series")
    n = y.size
    err = yhat - y
    sq = float(np.sum(err * err))
    dev = y.mean() - y
    sq_base = float(np.sum(dev * dev))
    abs_base = float(np.sum(np.abs(dev)))
    rse = sq / sq_base if sq_base > 0 else None
    rae = float(np.sum(np.abs(err))) / abs_base if abs_base > 0 else None
    mape = 100.0 / n * float(np.sum(np.abs(err / y))) if np.all(y != 0) else None
    return MetricReport(math.sqrt(sq / n), rse, rae, mape, int(n))

"""Per-horizon error metrics in original units."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TrafficSeries, make_windows


@dataclass
class HorizonMetrics:
    step: int
    mae: float
    rmse: float


@dataclass
class EvalReport:
    horizons: list[HorizonMetrics]
    n_samples: int
    config_hash: str
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def mean_mae(self) -> float:
        return float(np.mean([h.mae for h in self.horizons]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_mae"] = self.mean_mae
        return d


def evaluate(model, test: TrafficSeries, horizons: list[int] | None = None, stride: int | None = None) -> EvalReport:
    """Window the test range and score the model's de-normalized forecasts.

    ``model`` needs ``normalizer``, ``cfg`` and ``predict(windows)`` returning
    normalized forecasts of shape (B, N, T_out).
    """
    cfg = model.cfg
    T, T_out = cfg.model.T, cfg.model.T_out
    horizons = list(range(1, T_out + 1)) if horizons is None else list(horizons)
    bad = [h for h in horizons if not 1 <= h <= T_out]
    if bad:
        raise ValueError(f"horizon step(s) {bad} outside [1, {T_out}]")
    if getattr(model, "n_nodes", test.n_nodes) != test.n_nodes:
        raise ValueError(f"model has {model.n_nodes} nodes, test series has {test.n_nodes}")
    norm = model.normalizer
    windows = make_windows(norm.apply_series(test), T, T_out, stride or cfg.data.eval_stride)
    pred = norm.invert(np.asarray(model.predict(windows)))
    truth = norm.invert(np.stack([w.y for w in windows]))
    rows = []
    for h in horizons:
        err = pred[..., h - 1] - truth[..., h - 1]
        rows.append(HorizonMetrics(h, float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))))
    return EvalReport(rows, len(windows), cfg.digest(), int(getattr(model, "seed", 0)))

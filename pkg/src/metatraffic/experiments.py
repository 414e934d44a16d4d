"""End-to-end desk experiments: transfer vs scratch, the memory/MPE ablation grid,
memory-size and task-count sweeps, and the finite-difference gradient check."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import Config
from .data import CityPair, few_shot_split
from .evaluation import EvalReport, evaluate
from .graph import gumbel_noise
from .losses import LossWeights, compact_loss, mae, separate_loss, total_loss
from .model import PARAM_NAMES, forward, init_params
from .tasks import DEFAULT_PERIODS, PeriodSpec, eta, periodic_encoding
from .trainer import finetune, pretrain, train_from_scratch


@dataclass
class PipelineResult:
    seed: int
    report: EvalReport
    split_hash: str
    pretrain_log: list[dict] = field(default_factory=list)
    finetune_log: list[dict] = field(default_factory=list)

    @property
    def mae(self) -> float:
        return self.report.mean_mae


def split_hash(pair: CityPair, cfg: Config) -> str:
    train, test = few_shot_split(pair.target, cfg.data.finetune_days)
    h = hashlib.sha256()
    for part in (pair.source, train, test):
        h.update(part.digest().encode())
    return h.hexdigest()[:16]


_CACHE: dict[tuple, PipelineResult] = {}


def run_pipeline(pair: CityPair, cfg: Config, seed: int, scratch: bool = False, cache: bool = True) -> PipelineResult:
    """Pre-train on the source (unless ``scratch``), fine-tune on the target's few-shot
    range and evaluate on the rest. Results are memoized per (config, data, seed)."""
    key = (cfg.digest(), split_hash(pair, cfg), seed, scratch)
    if cache and key in _CACHE:
        return _CACHE[key]
    train, test = few_shot_split(pair.target, cfg.data.finetune_days)
    pre_log: list[dict] = []
    ft_log: list[dict] = []
    if scratch:
        model = train_from_scratch(train, cfg, seed, log=ft_log.append)
    else:
        ckpt = pretrain(pair.source, cfg, seed, log=pre_log.append)
        model = finetune(ckpt, train, cfg, seed, log=ft_log.append)
    result = PipelineResult(seed, evaluate(model, test), key[1], pre_log, ft_log)
    if cache:
        _CACHE[key] = result
    return result


def clear_cache() -> None:
    _CACHE.clear()


def _summary(results: list[PipelineResult]) -> dict:
    maes = [r.mae for r in results]
    return {
        "mae_mean": float(np.mean(maes)),
        "mae_std": float(np.std(maes)),
        "maes": maes,
        "split_hash": results[0].split_hash,
    }


def run_transfer_vs_scratch(pair: CityPair, cfg: Config, seeds: list[int]) -> dict:
    transfer = [run_pipeline(pair, cfg, s) for s in seeds]
    scratch = [run_pipeline(pair, cfg, s, scratch=True) for s in seeds]
    t = np.array([r.mae for r in transfer])
    b = np.array([r.mae for r in scratch])
    return {
        "transfer": _summary(transfer),
        "scratch": _summary(scratch),
        "paired_improvement": float(np.mean((b - t) / b)),
    }


def run_ablation(pair: CityPair, cfg: Config, seeds: list[int]) -> list[dict]:
    """2 x 2 grid over {memory on/off} x {MPE on/off} with shared seeds and data."""
    rows = []
    for memory in (False, True):
        for mpe in (False, True):
            cell = cfg.replace(**{"model.use_memory": memory, "tasks.enable_mpe": mpe})
            rows.append({"memory": memory, "mpe": mpe, **_summary([run_pipeline(pair, cell, s) for s in seeds])})
    return rows


def sweep_memory(pair: CityPair, cfg: Config, sizes: list[int], seeds: list[int]) -> list[dict]:
    bad = [b for b in sizes if b < 2]
    if bad:
        raise ValueError(f"memory sizes must be >= 2, got {bad}")
    return [
        {"b": b, **_summary([run_pipeline(pair, cfg.replace(**{"model.memory_items": b}), s) for s in seeds])}
        for b in sizes
    ]


def sweep_tasks(pair: CityPair, cfg: Config, ks: list[int], seeds: list[int]) -> list[dict]:
    bad = [k for k in ks if not 1 <= k <= len(DEFAULT_PERIODS)]
    if bad:
        raise ValueError(f"task counts must lie in [1, {len(DEFAULT_PERIODS)}], got {bad}")
    return [
        {"k": k, **_summary([run_pipeline(pair, cfg.replace(**{"tasks.periods": list(DEFAULT_PERIODS[:k])}), s) for s in seeds])}
        for k in ks
    ]


# ------------------------------------------------------------------ gradcheck


@dataclass
class GradcheckResult:
    worst: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.worst.values())

    def failing(self) -> list[str]:
        return [k for k, v in self.worst.items() if not v < self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: str | None = None,
    dims: tuple[int, int, int, int, int, int] = (4, 6, 2, 3, 4, 5),
) -> GradcheckResult:
    """Central differences against the tape gradient for every parameter coordinate.

    The loss exercises the whole chain: period + meta codes on the input,
    similarity, soft sampled graph (fixed noise), GCN, memory read-out, the
    recurrence, read-out and the weighted MAE/separate/compact objective.
    ``corrupt`` names a tensor whose analytic gradient is perturbed (negative control).
    """
    N, T, T_out, H, b, d = dims
    rng = np.random.default_rng(seed)
    params = init_params(N, T, T_out, H, b, d, rng)
    params["pe_scale"] = params["pe_scale"] + rng.normal(0, 0.1, size=params["pe_scale"].shape)
    x = rng.normal(size=(2, N, T)) + periodic_encoding(np.array([5, 9]), T, PeriodSpec(1, 6))[:, None, :]
    y = rng.normal(size=(2, N, T_out))
    noise = gumbel_noise(N, rng)
    weights = LossWeights()

    def loss_of(tensors):
        xin = ad.add(x, eta(tensors["pe_scale"], tensors["pe_basis"]))
        tr = forward(tensors, xin, tau=0.5, noise=noise)
        return total_loss(
            mae(tr.y_hat, y),
            separate_loss(tr.O, tensors["memory"], tr.top2, weights.margin),
            compact_loss(tr.O, tensors["memory"], tr.top2),
            weights,
        )

    tensors = ad.parameters(params)
    grads = ad.backward(loss_of(tensors), tensors)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] + 1e-2 * (1.0 + np.abs(grads[corrupt]))

    def value(p):
        return loss_of(ad.parameters(p, [])).item()

    worst = {}
    for name in PARAM_NAMES:
        numeric = np.zeros_like(params[name])
        for i in np.ndindex(params[name].shape):
            plus = {**params, name: params[name].copy()}
            minus = {**params, name: params[name].copy()}
            plus[name][i] += step
            minus[name][i] -= step
            numeric[i] = (value(plus) - value(minus)) / (2 * step)
        worst[name] = float(relative_error(grads[name], numeric).max())
    return GradcheckResult(worst, tolerance)

"""First-order MAML pre-training on a source city and Adam fine-tuning on a target."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError
from .config import Config
from .data import (
    Normalizer,
    TrafficSeries,
    WindowSample,
    epoch_batches,
    fit_normalizer,
    make_windows,
    stack_windows,
)
from .losses import compact_loss, mae, separate_loss, total_loss
from .graph import gumbel_noise
from .model import META_PE, PARAM_NAMES, SHARED, ModelParams, dims_of, forward, init_params, init_private
from .optim import OptimizerState, adam_step, sgd_step
from .tasks import MetaPE, PeriodSpec, Task, build_tasks, eta, periodic_encoding

LossFn = Callable[[dict[str, Tensor]], Tensor]


def value_and_grad(loss_fn: LossFn, params: Mapping[str, np.ndarray], names: Iterable[str]):
    names = list(names)
    tensors = ad.parameters(params, names)
    loss = loss_fn(tensors)
    grads = ad.backward(loss, {k: tensors[k] for k in names})
    return loss.item(), grads


# ----------------------------------------------------------------- MAML core


@dataclass
class MetaTask:
    support_loss: LossFn | None
    query_loss: LossFn | None


def inner_adapt(
    params: Mapping[str, np.ndarray],
    support_loss: LossFn | None,
    lr: float,
    steps: int = 1,
    frozen: Iterable[str] = META_PE,
) -> ModelParams:
    """``steps`` plain gradient-descent updates on the support loss.

    Returns an independent copy; tensors in ``frozen`` are carried over untouched.
    """
    if support_loss is None:
        raise ValueError("inner_adapt needs a non-empty support set")
    frozen = set(frozen)
    adapted = {k: v.copy() for k, v in params.items()}
    names = [k for k in adapted if k not in frozen]
    for _ in range(steps):
        _, grads = value_and_grad(support_loss, adapted, names)
        adapted.update(sgd_step({k: adapted[k] for k in names}, grads, lr))
    return adapted


@dataclass
class MetaStepResult:
    params: ModelParams
    query_losses: list[float]


def meta_step(
    params: Mapping[str, np.ndarray],
    tasks: Sequence[MetaTask],
    inner_lr: float,
    outer_lr: float,
    inner_steps: int = 1,
    trainable: Iterable[str] | None = None,
    inner_frozen: Iterable[str] = META_PE,
) -> MetaStepResult:
    """One outer update from the summed query losses of the adapted copies.

    First-order: the query gradient taken at each adapted copy is applied to
    the meta-parameters directly.
    """
    trainable = list(params) if trainable is None else [k for k in params if k in set(trainable)]
    summed = {k: np.zeros_like(params[k]) for k in trainable}
    losses = []
    for task in tasks:
        if task.query_loss is None:
            raise ValueError("meta_step: task has no query set")
        adapted = inner_adapt(params, task.support_loss, inner_lr, inner_steps, inner_frozen) if inner_steps else dict(params)
        value, grads = value_and_grad(task.query_loss, adapted, trainable)
        for k in trainable:
            summed[k] = summed[k] + grads[k]
        losses.append(value)
    new = dict(params)
    if trainable:
        new.update(sgd_step({k: params[k] for k in trainable}, summed, outer_lr))
    return MetaStepResult(new, losses)


# ------------------------------------------------------------ loss regimes


@dataclass
class LossRecord:
    regime: str
    total: float
    mae: float
    sep: float
    comp: float
    sep_term: float  # weighted contribution actually added to the total
    comp_term: float


def objective(trace, memory: Tensor, y: np.ndarray, cfg: Config, regime: str) -> tuple[Tensor, LossRecord]:
    """Pre-training optimizes MAE alone; fine-tuning uses the weighted total."""
    m = mae(trace.y_hat, y)
    if regime == "pretrain":
        return m, LossRecord(regime, m.item(), m.item(), 0.0, 0.0, 0.0, 0.0)
    if regime != "finetune":
        raise ValueError(f"unknown loss regime {regime!r}")
    w = cfg.loss
    if trace.top2 is None:
        total = w.c1 * m
        return total, LossRecord(regime, total.item(), m.item(), 0.0, 0.0, 0.0, 0.0)
    sep = separate_loss(trace.O, memory, trace.top2, w.margin)
    comp = compact_loss(trace.O, memory, trace.top2)
    total = total_loss(m, sep, comp, w)
    return total, LossRecord(regime, total.item(), m.item(), sep.item(), comp.item(), w.c2 * sep.item(), w.c3 * comp.item())


def run_model(tensors: dict[str, Tensor], x, cfg: Config, noise: np.ndarray, hard: bool | None = None):
    return forward(
        tensors,
        x,
        tau=cfg.model.tau,
        noise=noise,
        hard=cfg.model.hard_graph if hard is None else hard,
        use_memory=cfg.model.use_memory,
    )


def with_meta_code(base: np.ndarray, tensors: dict[str, Tensor], enabled: bool):
    if not enabled:
        return base
    return ad.add(base, eta(tensors["pe_scale"], tensors["pe_basis"]))


Hook = Callable[[LossRecord, object, np.ndarray, np.ndarray], None]  # record, trace, y, memory


def _loss_fn(x, y, cfg: Config, noise_rng: np.random.Generator, regime: str, meta_code: bool, hook: Hook | None) -> LossFn:
    def fn(tensors):
        n = tensors["node_embedding"].shape[0]
        trace = run_model(tensors, with_meta_code(x, tensors, meta_code), cfg, gumbel_noise(n, noise_rng))
        loss, record = objective(trace, tensors["memory"], y, cfg, regime)
        if hook is not None:
            hook(record, trace, y, tensors["memory"].data)
        return loss

    return fn


def strgc_meta_tasks(tasks: Sequence[Task], cfg: Config, noise_rng: np.random.Generator, hook: Hook | None = None) -> list[MetaTask]:
    """Support inputs carry the period code only; query inputs also get the meta code."""
    out = []
    for t in tasks:
        sup = _loss_fn(t.support_x, t.support_y, cfg, noise_rng, "pretrain", False, hook) if t.support else None
        qry = _loss_fn(t.query_base, t.query_y, cfg, noise_rng, "pretrain", cfg.tasks.enable_mpe, hook) if t.query else None
        out.append(MetaTask(sup, qry))
    return out


def outer_trainable(cfg: Config) -> list[str]:
    return [k for k in PARAM_NAMES if cfg.tasks.enable_mpe or k not in META_PE]


def target_meta_code(cfg: Config) -> bool:
    return cfg.tasks.enable_mpe and cfg.tasks.finetune_mpe


def target_trainable(cfg: Config) -> list[str]:
    return [k for k in PARAM_NAMES if target_meta_code(cfg) or k not in META_PE]


# --------------------------------------------------------------- pretrain


def _streams(seed: int, n: int = 3) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def pretrain(
    source: TrafficSeries,
    cfg: Config,
    seed: int,
    log: Callable[[dict], None] | None = None,
    hook: Hook | None = None,
) -> Checkpoint:
    """Meta-train on the source city; returns the checkpoint of the meta-parameters."""
    m = cfg.model
    init_rng, batch_rng, noise_rng = _streams(seed)
    norm = fit_normalizer(source)
    windows = make_windows(norm.apply_series(source), m.T, m.T_out, cfg.data.stride)
    if len(windows) < cfg.train.batch_size and cfg.train.max_epochs > 0:
        raise ValueError(f"{len(windows)} windows cannot fill a batch of {cfg.train.batch_size}")
    params = init_params(source.n_nodes, m.T, m.T_out, m.hidden, m.memory_items, m.embed_dim, init_rng)
    specs = [PeriodSpec(v, source.samples_per_hour) for v in cfg.tasks.periods]
    trainable = outer_trainable(cfg)
    for epoch in range(1, cfg.train.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for batch in epoch_batches(windows, cfg.train.batch_size, batch_rng, len(specs)):
            mpe = MetaPE(params["pe_scale"], params["pe_basis"])
            tasks = build_tasks(batch, specs, mpe, cfg.tasks.enable_pe)
            res = meta_step(
                params,
                strgc_meta_tasks(tasks, cfg, noise_rng, hook),
                cfg.train.inner_lr,
                cfg.train.outer_lr,
                cfg.train.inner_steps,
                trainable,
            )
            params = res.params
            losses.extend(res.query_losses)
        if log is not None:
            log({"epoch": epoch, "mean_query_mae": float(np.mean(losses)), "wall_ms": round((time.perf_counter() - t0) * 1000, 3)})
    meta = {
        "role": "source",
        "n_nodes": source.n_nodes,
        "node_ids": list(source.node_ids),
        "samples_per_hour": source.samples_per_hour,
        "normalizer": {"mean": norm.mean, "std": norm.std},
        "seed": seed,
    }
    return Checkpoint(params, cfg.to_dict(), meta)


# --------------------------------------------------------------- finetune


def transfer_params(ckpt: Checkpoint, n_nodes: int, cfg: Config, rng: np.random.Generator) -> ModelParams:
    """Shared tensors from ``ckpt`` plus freshly initialized city-private tensors."""
    dims = dims_of(ckpt.params)
    m = cfg.model
    want = {"T": m.T, "T_out": m.T_out, "hidden": m.hidden, "memory_items": m.memory_items, "embed_dim": m.embed_dim}
    bad = {k: (getattr(dims, k), v) for k, v in want.items() if getattr(dims, k) != v}
    if bad:
        raise CheckpointError("checkpoint/config mismatch (checkpoint, config): " + ", ".join(f"{k}={v}" for k, v in bad.items()))
    params = {k: ckpt.params[k].copy() for k in SHARED}
    params.update(init_private(n_nodes, m.T, m.embed_dim, rng))
    return params


@dataclass
class Forecaster:
    """A trained parameter set bound to its city's normalizer and config."""

    params: ModelParams
    cfg: Config
    normalizer: Normalizer
    samples_per_hour: int
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return self.params["node_embedding"].shape[0]

    def encode(self, x: np.ndarray, t_start: np.ndarray) -> np.ndarray:
        return encode_target(x, t_start, self.cfg, self.samples_per_hour)

    def predict(self, windows: list[WindowSample], noise: np.ndarray | None = None) -> np.ndarray:
        """Normalized predictions (B, N, T_out) using one hard graph drawn from the eval seed."""
        if noise is None:
            noise = gumbel_noise(self.n_nodes, np.random.default_rng(self.cfg.train.eval_seed))
        x, _, t = stack_windows(windows)
        tensors = ad.parameters(self.params, [])
        xin = with_meta_code(self.encode(x, t), tensors, target_meta_code(self.cfg))
        out = []
        chunk = 256
        for i in range(0, x.shape[0], chunk):
            xi = ad.index(ad.as_tensor(xin), slice(i, i + chunk))
            out.append(run_model(tensors, xi, self.cfg, noise, hard=True).y_hat.data)
        return np.concatenate(out, axis=0)

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        base = {
            "role": "target",
            "n_nodes": self.n_nodes,
            "samples_per_hour": self.samples_per_hour,
            "normalizer": {"mean": self.normalizer.mean, "std": self.normalizer.std},
            "seed": self.seed,
        }
        return Checkpoint(self.params, self.cfg.to_dict(), {**base, **(meta or {})})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Forecaster":
        norm = ckpt.meta["normalizer"]
        return cls(
            {k: v.copy() for k, v in ckpt.params.items()},
            Config.from_dict(ckpt.config),
            Normalizer(norm["mean"], norm["std"]),
            int(ckpt.meta["samples_per_hour"]),
            int(ckpt.meta.get("seed", 0)),
        )


def encode_target(x: np.ndarray, t_start: np.ndarray, cfg: Config, samples_per_hour: int) -> np.ndarray:
    """Daily period code for fine-tuning/evaluation inputs (when enabled)."""
    if cfg.tasks.enable_pe and cfg.tasks.finetune_pe:
        return x + periodic_encoding(t_start, x.shape[-1], PeriodSpec(1, samples_per_hour))[:, None, :]
    return x


def fit_target(
    params: ModelParams,
    target: TrafficSeries,
    cfg: Config,
    seed: int,
    log: Callable[[dict], None] | None = None,
    hook: Hook | None = None,
) -> Forecaster:
    """Mini-batch Adam on the weighted total loss over the target's training range."""
    _, batch_rng, noise_rng = _streams(seed + 1)
    norm = fit_normalizer(target)
    windows = make_windows(norm.apply_series(target), cfg.model.T, cfg.model.T_out, cfg.data.finetune_stride)
    bs = min(cfg.train.finetune_batch_size, len(windows) - len(windows) % 2)
    trainable = target_trainable(cfg)
    state = OptimizerState(lr=cfg.train.finetune_lr)
    model = Forecaster(dict(params), cfg, norm, target.samples_per_hour, seed)
    for epoch in range(1, cfg.train.finetune_epochs + 1):
        records: list[LossRecord] = []

        def keep(rec, trace, y, memory):
            records.append(rec)
            if hook is not None:
                hook(rec, trace, y, memory)

        for batch in epoch_batches(windows, bs - bs % 2, batch_rng, n_parts=1):
            x, y, t = stack_windows(batch)
            fn = _loss_fn(model.encode(x, t), y, cfg, noise_rng, "finetune", target_meta_code(cfg), keep)
            _, grads = value_and_grad(fn, model.params, trainable)
            model.params.update(adam_step(state, {k: model.params[k] for k in trainable}, grads))
        row = {
            "epoch": epoch,
            "total": float(np.mean([r.total for r in records])),
            "mae": float(np.mean([r.mae for r in records])),
            "sep": float(np.mean([r.sep for r in records])),
            "comp": float(np.mean([r.comp for r in records])),
        }
        model.history.append(row)
        if log is not None:
            log(row)
    return model


def finetune(
    ckpt: Checkpoint,
    target: TrafficSeries,
    cfg: Config,
    seed: int,
    log: Callable[[dict], None] | None = None,
    hook: Hook | None = None,
) -> Forecaster:
    """Transfer shared tensors, re-initialize the target's private ones, then fit."""
    init_rng = _streams(seed + 1)[0]
    params = transfer_params(ckpt, target.n_nodes, cfg, init_rng)
    return fit_target(params, target, cfg, seed, log, hook)


def train_from_scratch(
    target: TrafficSeries,
    cfg: Config,
    seed: int,
    log: Callable[[dict], None] | None = None,
) -> Forecaster:
    """Baseline: random initialization, same fine-tuning budget."""
    m = cfg.model
    rng = _streams(seed + 1)[0]
    params = init_params(target.n_nodes, m.T, m.T_out, m.hidden, m.memory_items, m.embed_dim, rng)
    return fit_target(params, target, cfg, seed, log)

"""Periodicity tasks: contiguous batch partition, sinusoidal position codes and
the learnable meta-positional encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import WindowSample, stack_windows

DEFAULT_PERIODS = (1, 7, 30)


@dataclass(frozen=True)
class PeriodSpec:
    V: int
    samples_per_hour: int

    @property
    def period(self) -> int:
        return 24 * self.samples_per_hour * self.V


def periodic_encoding(t_start, T: int, spec: PeriodSpec) -> np.ndarray:
    """Per-position code: sin of the phase at even absolute positions, cos at odd ones.

    ``t_start`` may be a scalar (returns shape (T,)) or an array of starts
    (returns shape (len(t_start), T)).
    """
    pos = np.asarray(t_start, dtype=np.int64)[..., None] + np.arange(T)
    theta = 2.0 * np.pi * (pos % spec.period) / spec.period
    return np.where(pos % 2 == 0, np.sin(theta), np.cos(theta))


@dataclass
class MetaPE:
    pe_scale: np.ndarray  # (1, T)
    pe_basis: np.ndarray  # (N, T)


def init_meta_pe(n_nodes: int, T: int, rng: np.random.Generator) -> MetaPE:
    return MetaPE(np.ones((1, T)), rng.normal(0.0, 0.01, size=(n_nodes, T)))


def eta(pe_scale, pe_basis):
    """Row-broadcast scaling ``pe_scale[t] * pe_basis[n, t]``; works on arrays or tensors."""
    if isinstance(pe_scale, ad.Tensor) or isinstance(pe_basis, ad.Tensor):
        return ad.mul(pe_scale, pe_basis)
    return np.asarray(pe_scale) * np.asarray(pe_basis)


def partition_batch(batch: list, n_parts: int = 3) -> list[list]:
    """Contiguous equal parts in batch order."""
    size = len(batch) // n_parts
    return [batch[i * size : (i + 1) * size] for i in range(n_parts)]


@dataclass
class Task:
    spec: PeriodSpec | None
    support: list[WindowSample]
    query: list[WindowSample]
    support_x: np.ndarray  # (B, N, T) with task code added
    support_y: np.ndarray
    query_base: np.ndarray  # (B, N, T) with task code added, before the meta code
    query_y: np.ndarray
    eta: np.ndarray | None = None  # meta code in effect when the task was built

    @property
    def query_x(self) -> np.ndarray:
        return self.query_base if self.eta is None else self.query_base + self.eta


def encode(windows: list[WindowSample], spec: PeriodSpec | None) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows and add the period code (broadcast over nodes)."""
    x, y, t = stack_windows(windows)
    if spec is not None:
        x = x + periodic_encoding(t, x.shape[-1], spec)[:, None, :]
    return x, y


def build_tasks(
    batch: list[WindowSample],
    specs: list[PeriodSpec],
    meta_pe: MetaPE | None = None,
    enable_pe: bool = True,
) -> list[Task]:
    """One task per spec; each part splits into a support half and a query half."""
    n_nodes = batch[0].x.shape[0]
    if meta_pe is not None and meta_pe.pe_basis.shape[0] != n_nodes:
        raise ValueError(f"meta-PE basis has {meta_pe.pe_basis.shape[0]} nodes, batch has {n_nodes}")
    code = None if meta_pe is None else eta(meta_pe.pe_scale, meta_pe.pe_basis)
    tasks = []
    for spec, part in zip(specs, partition_batch(batch, len(specs))):
        half = len(part) // 2
        sup, qry = part[:half], part[half:]
        use = spec if enable_pe else None
        sx, sy = encode(sup, use)
        qx, qy = encode(qry, use)
        tasks.append(Task(spec, sup, qry, sx, sy, qx, qy, code))
    return tasks

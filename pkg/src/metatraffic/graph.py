"""Memory-mediated graph learning: node similarity, Gumbel adjacency sampling,
GCN propagation and memory addressing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

SIM_EPS = 1e-6
ADDR_EPS = 1e-8


def squash_cosine(Q: Tensor) -> Tensor:
    """Row-normalize ``Q`` and map pairwise cosines to ``[eps, 1 - eps]``."""
    Qn = Q / ad.norm(Q, axis=-1, floor=SIM_EPS)
    cos = Qn @ Qn.T
    return ad.clamp((cos + 1.0) * 0.5, SIM_EPS, 1.0 - SIM_EPS)


def node_similarity(E, M) -> Tensor:
    """Similarity in (0, 1) between nodes, read through the memory bank."""
    E, M = ad.as_tensor(E), ad.as_tensor(M)
    if E.shape[-1] != M.shape[-1]:
        raise ShapeError("node_similarity", E.shape, M.shape, detail="embedding dims differ")
    return squash_cosine(E @ M.T)


def gumbel_noise(n: int, rng: np.random.Generator, symmetric: bool = True) -> np.ndarray:
    """Difference of two standard Gumbel draws for every (i, j), i.e. Logistic(0, 1).

    With ``symmetric`` the upper triangle is mirrored so sampled graphs are undirected.
    """
    g = rng.gumbel(size=(2, n, n))
    diff = g[0] - g[1]
    if symmetric:
        upper = np.triu(diff)
        diff = upper + np.triu(diff, 1).T
    return diff


@dataclass
class LearnedAdjacency:
    A: Tensor
    tau: float
    mode: str


def gumbel_adjacency(
    xi,
    tau: float,
    rng: np.random.Generator | None = None,
    mode: str = "soft",
    noise: np.ndarray | None = None,
) -> LearnedAdjacency:
    """Binary-concrete relaxation of Bernoulli(xi) edges.

    ``noise`` (the g1 - g2 difference) may be supplied to fix the draw;
    otherwise it is taken from ``rng``.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mode not in ("soft", "hard"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    xi = ad.as_tensor(xi)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = gumbel_noise(xi.shape[-1], rng)
    logit = ad.log(xi) - ad.log(1.0 - xi)
    soft = ad.sigmoid((logit + noise) / tau)
    A = ad.straight_through(soft) if mode == "hard" else soft
    return LearnedAdjacency(A, tau, mode)


def propagator(A) -> Tensor:
    """``I + D^-1/2 A D^-1/2`` with a zero inverse-root for zero-degree nodes."""
    A = ad.as_tensor(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError("propagator", A.shape, detail="adjacency must be square")
    deg = ad.sum(A, axis=1, keepdims=True)
    has = deg.data > 0
    # zero-degree rows get a constant 1 before the root, then are masked out
    safe = ad.add(deg, np.where(has, 0.0, 1.0))
    inv = ad.mul(1.0 / ad.sqrt(safe), has.astype(np.float64))
    return np.eye(A.shape[0]) + inv * A * inv.T


def gcn_forward(A, X, W) -> Tensor:
    """``O = (I + D^-1/2 A D^-1/2) X W``; ``X`` may carry a leading batch axis."""
    A, X, W = ad.as_tensor(A), ad.as_tensor(X), ad.as_tensor(W)
    n = A.shape[-1]
    if X.shape[-2] != n:
        raise ShapeError("gcn_forward", A.shape, X.shape, detail="node counts differ")
    if X.shape[-1] != W.shape[0]:
        raise ShapeError("gcn_forward", X.shape, W.shape, detail="time dims differ")
    return propagator(A) @ X @ W


@dataclass
class Addressing:
    w: Tensor  # (..., N, b)
    P: Tensor  # (..., N, d)
    top2: np.ndarray  # (..., N, 2) int


def top2_indices(w: np.ndarray) -> np.ndarray:
    """Largest and second-largest entries along the last axis, ties to the lower index."""
    order = np.argsort(-w, axis=-1, kind="stable")
    return order[..., :2].copy()


def memory_address(O, M) -> Addressing:
    O, M = ad.as_tensor(O), ad.as_tensor(M)
    if M.shape[0] < 2:
        raise ValueError("memory needs at least 2 items")
    if O.shape[-1] != M.shape[-1]:
        raise ShapeError("memory_address", O.shape, M.shape)
    On = O / ad.norm(O, axis=-1, floor=ADDR_EPS)
    Mn = M / ad.norm(M, axis=-1, floor=ADDR_EPS)
    sim = On @ Mn.T
    w = ad.softmax(sim, axis=-1)
    P = w @ M
    return Addressing(w, P, top2_indices(w.data))

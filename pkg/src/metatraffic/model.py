"""Graph-conditioned recurrent forecaster.

similarity -> sampled adjacency -> GCN -> memory read-out P -> GRU whose
per-node weights are generated from P -> per-node affine read-out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import gumbel_adjacency, gumbel_noise, memory_address, node_similarity, propagator, squash_cosine

PARAM_NAMES = (
    "node_embedding",
    "memory",
    "pe_scale",
    "pe_basis",
    "gcn_weight",
    "gate_z",
    "gate_r",
    "gate_c",
    "bias_z",
    "bias_r",
    "bias_c",
    "out_weight",
    "out_bias",
)
PRIVATE = frozenset({"node_embedding", "pe_basis"})
SHARED = frozenset(PARAM_NAMES) - PRIVATE
META_PE = frozenset({"pe_scale", "pe_basis"})

ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class Dims:
    n_nodes: int
    T: int
    T_out: int
    hidden: int
    memory_items: int
    embed_dim: int


def dims_of(params: ModelParams) -> Dims:
    n, d = params["node_embedding"].shape
    return Dims(
        n_nodes=n,
        T=params["pe_scale"].shape[1],
        T_out=params["out_bias"].shape[1],
        hidden=params["bias_z"].shape[1],
        memory_items=params["memory"].shape[0],
        embed_dim=d,
    )


def param_shapes(N: int, T: int, T_out: int, H: int, b: int, d: int) -> dict[str, tuple[int, int]]:
    gate = (d, (1 + H) * H)
    return {
        "node_embedding": (N, d),
        "memory": (b, d),
        "pe_scale": (1, T),
        "pe_basis": (N, T),
        "gcn_weight": (T, d),
        "gate_z": gate,
        "gate_r": gate,
        "gate_c": gate,
        "bias_z": (d, H),
        "bias_r": (d, H),
        "bias_c": (d, H),
        "out_weight": (d, H * T_out),
        "out_bias": (d, T_out),
    }


def init_private(N: int, T: int, d: int, rng: np.random.Generator) -> ModelParams:
    return {
        "node_embedding": rng.normal(0.0, 1.0 / np.sqrt(d), size=(N, d)),
        "pe_basis": rng.normal(0.0, 0.01, size=(N, T)),
    }


def init_params(N: int, T: int, T_out: int, H: int, b: int, d: int, rng: np.random.Generator) -> ModelParams:
    """Gaussian init with std 1/sqrt(fan_in) (fan_in = leading dim of each matrix)."""
    if min(N, T, T_out, H, b, d) < 1:
        raise ValueError("all dimensions must be positive")
    shapes = param_shapes(N, T, T_out, H, b, d)
    params: ModelParams = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        if name == "pe_scale":
            params[name] = np.ones(shape)
        elif name == "pe_basis":
            params[name] = rng.normal(0.0, 0.01, size=shape)
        elif name in ("node_embedding", "memory"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    return params


@dataclass
class ForwardTrace:
    xi: Tensor
    A: Tensor
    O: Tensor
    w: Tensor | None
    P: Tensor
    top2: np.ndarray | None
    hidden: list[Tensor]
    y_hat: Tensor


def _node_weights(P: Tensor, pool: Tensor, rows: int, cols: int) -> Tensor:
    """Per-node (rows x cols) matrices generated as ``reshape(P[n] @ pool)``."""
    flat = P @ pool
    return ad.reshape(flat, P.shape[:-1] + (rows, cols))


def _per_node(u: Tensor, W: Tensor) -> Tensor:
    """Row-vector times that node's own matrix: (..., N, k) x (..., N, k, m) -> (..., N, m)."""
    return ad.vecmat(u, W)


@dataclass
class GateWeights:
    Wz: Tensor
    Wr: Tensor
    Wc: Tensor
    bz: Tensor
    br: Tensor
    bc: Tensor


def gate_weights(P: Tensor, params: dict[str, Tensor]) -> GateWeights:
    H = params["bias_z"].shape[1]
    return GateWeights(
        _node_weights(P, params["gate_z"], 1 + H, H),
        _node_weights(P, params["gate_r"], 1 + H, H),
        _node_weights(P, params["gate_c"], 1 + H, H),
        P @ params["bias_z"],
        P @ params["bias_r"],
        P @ params["bias_c"],
    )


def strgc_cell(x_t, h_prev, prop: Tensor, gates: GateWeights) -> Tensor:
    """One recurrent step. ``x_t``: (..., N, 1), ``h_prev``: (..., N, H), ``prop``: N x N."""
    x_t, h_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev)
    u = prop @ ad.concat([x_t, h_prev], axis=-1)
    z = ad.sigmoid(_per_node(u, gates.Wz) + gates.bz)
    r = ad.sigmoid(_per_node(u, gates.Wr) + gates.br)
    uc = prop @ ad.concat([x_t, r * h_prev], axis=-1)
    c = ad.tanh(_per_node(uc, gates.Wc) + gates.bc)
    return z * h_prev + (1.0 - z) * c


def _sig(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def recurrence(x, prop: Tensor, gates: GateWeights) -> Tensor:
    """All ``strgc_cell`` steps over the T input columns as one tape node.

    Returns the stacked states (T+1, ..., N, H) starting from h_0 = 0. Values and
    gradients match the step-by-step composition of ``strgc_cell``.
    """
    x = ad.as_tensor(x)
    X, A = x.data, prop.data
    H = gates.bz.shape[-1]
    Wzr = np.concatenate([gates.Wz.data, gates.Wr.data], axis=-1)  # (..., N, K, 2H)
    bzr = np.concatenate([gates.bz.data, gates.br.data], axis=-1)
    Wc, bc = gates.Wc.data, gates.bc.data
    T = X.shape[-1]
    hs = [np.zeros(X.shape[:-1] + (H,))]
    cache = []
    for t in range(T):
        xt = X[..., t : t + 1]
        h = hs[-1]
        s = np.concatenate([xt, h], axis=-1)
        u = A @ s
        zr = _sig((u[..., None, :] @ Wzr)[..., 0, :] + bzr)
        z, r = zr[..., :H], zr[..., H:]
        s2 = np.concatenate([xt, r * h], axis=-1)
        uc = A @ s2
        c = np.tanh((uc[..., None, :] @ Wc)[..., 0, :] + bc)
        hs.append(z * h + (1.0 - z) * c)
        cache.append((s, u, zr, s2, uc, c))
    out = np.stack(hs)

    def backward(g_all):
        gX = np.zeros_like(X)
        gA = np.zeros_like(A)
        gWzr = np.zeros_like(Wzr)
        gbzr = np.zeros_like(bzr)
        gWc = np.zeros_like(Wc)
        gbc = np.zeros_like(bc)
        WzrT = np.swapaxes(Wzr, -1, -2)
        WcT = np.swapaxes(Wc, -1, -2)
        AT = A.T
        gh = g_all[T].copy()
        for t in range(T - 1, -1, -1):
            s, u, zr, s2, uc, c = cache[t]
            z, r = zr[..., :H], zr[..., H:]
            h = hs[t]
            gac = gh * (1.0 - z) * (1.0 - c * c)
            gbc += gac
            gWc += uc[..., :, None] * gac[..., None, :]
            guc = (gac[..., None, :] @ WcT)[..., 0, :]
            gs2 = AT @ guc
            gA += _outer_sum(guc, s2)
            gX[..., t] += gs2[..., 0]
            grh = gs2[..., 1:]
            gzr = np.concatenate([gh * (h - c), grh * h], axis=-1) * zr * (1.0 - zr)
            gbzr += gzr
            gWzr += u[..., :, None] * gzr[..., None, :]
            gu = (gzr[..., None, :] @ WzrT)[..., 0, :]
            gs = AT @ gu
            gA += _outer_sum(gu, s)
            gX[..., t] += gs[..., 0]
            gh = gh * z + grh * r + gs[..., 1:] + g_all[t]
        return (gX, gA, gWzr[..., :H], gWzr[..., H:], gWc, gbzr[..., :H], gbzr[..., H:], gbc)

    parents = (x, prop, gates.Wz, gates.Wr, gates.Wc, gates.bz, gates.br, gates.bc)
    return ad.make_node(out, parents, backward, "strgc_recurrence")


def _outer_sum(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Adjoint of ``A @ s`` w.r.t. A, summed over any leading batch axes."""
    N = g.shape[-2]
    return g.reshape(-1, N, g.shape[-1]).transpose(1, 0, 2).reshape(N, -1) @ s.reshape(-1, N, s.shape[-1]).transpose(1, 0, 2).reshape(N, -1).T


def forward(
    params: dict[str, Tensor],
    x,
    *,
    tau: float = 0.5,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    hard: bool = False,
    use_memory: bool = True,
    fused: bool = True,
) -> ForwardTrace:
    """Run the forecaster on encoded input ``x`` of shape (N, T) or (B, N, T).

    A single adjacency sample is shared by every window in the call and every
    recurrent step. ``fused=False`` records every gate operation on the tape
    instead of the single fused recurrence node.
    """
    x = ad.as_tensor(x)
    E, M = params["node_embedding"], params["memory"]
    N, T = E.shape[0], params["gcn_weight"].shape[0]
    if x.shape[-2:] != (N, T):
        raise ad.ShapeError("forward", x.shape, (N, T), detail="input must end with (nodes, T)")
    if noise is None:
        if rng is None:
            raise ValueError("forward needs rng or explicit noise")
        noise = gumbel_noise(N, rng)

    xi = node_similarity(E, M) if use_memory else squash_cosine(E @ E.T)
    adj = gumbel_adjacency(xi, tau, mode="hard" if hard else "soft", noise=noise)
    prop = propagator(adj.A)
    O = prop @ x @ params["gcn_weight"]
    if use_memory:
        addr = memory_address(O, M)
        w, P, top2 = addr.w, addr.P, addr.top2
    else:
        w, top2 = None, None
        P = E if x.ndim == 2 else ad.broadcast_to(E, x.shape[:-2] + E.shape)

    gates = gate_weights(P, params)
    H = params["bias_z"].shape[1]
    h = ad.as_tensor(np.zeros(x.shape[:-1] + (H,)))
    if fused:
        states = recurrence(x, prop, gates)
        hidden = [ad.index(states, i) for i in range(T + 1)]
        h = hidden[-1]
    else:
        hidden = [h]
        for t in range(T):
            x_t = ad.index(x, (Ellipsis, slice(t, t + 1)))
            h = strgc_cell(x_t, h, prop, gates)
            hidden.append(h)

    T_out = params["out_bias"].shape[1]
    W_out = _node_weights(P, params["out_weight"], H, T_out)
    y_hat = _per_node(h, W_out) + P @ params["out_bias"]
    return ForwardTrace(xi, adj.A, O, w, P, top2, hidden, y_hat)

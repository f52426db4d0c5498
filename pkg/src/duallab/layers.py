"""Reusable network blocks: linear maps, temporal convolution, GRU, attention.

All functions are pure graph builders over tape Tensors; parameters arrive
pre-bound (or detached for inference), so the same code serves training and
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import Tensor, apply, concat


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return apply("add", apply("matmul", x, weight), bias)


def temporal_conv(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded convolution over the time axis; x (..., K, C_in) -> (..., K, C_out)."""
    return apply("add", apply("conv1d_same", x, kernels), bias)


@dataclass
class GruParams:
    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor


def init_gru(store, prefix: str, input_dim: int, hidden: int, rng) -> None:
    for gate in ("z", "r", "h"):
        store.add(f"{prefix}/w_{gate}", uniform_init(rng, input_dim, (input_dim, hidden)))
        store.add(f"{prefix}/u_{gate}", uniform_init(rng, hidden, (hidden, hidden)))
        store.add(f"{prefix}/b_{gate}", np.zeros(hidden))


def bind_gru(bound: dict, prefix: str) -> GruParams:
    return GruParams(*[bound[f"{prefix}/{k}_{g}"] for k in ("w", "u", "b")
                       for g in ("z", "r", "h")])


def _gru_core(xz: Tensor, xr: Tensor, xh: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One step given pre-projected inputs xg = x @ w_g + b_g; shape-agnostic."""
    z = apply("sigmoid", apply("add", xz, apply("matmul", h, p.u_z)))
    r = apply("sigmoid", apply("add", xr, apply("matmul", h, p.u_r)))
    cand = apply("tanh", apply("add", xh, apply("matmul",
                                                apply("mul_elementwise", r, h), p.u_h)))
    keep = apply("mul_elementwise", apply("sub", 1.0, z), h)
    return apply("add", keep, apply("mul_elementwise", z, cand))


def gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """h' = (1-z) * h + z * tanh(...); the update gate gates the candidate."""
    xz = apply("add", apply("matmul", x, p.w_z), p.b_z)
    xr = apply("add", apply("matmul", x, p.w_r), p.b_r)
    xh = apply("add", apply("matmul", x, p.w_h), p.b_h)
    return _gru_core(xz, xr, xh, h, p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _gru_direction(xs: Tensor, p: GruParams, reverse: bool) -> Tensor:
    """One GRU direction over (B, K, I) as a single tape node.

    The whole-sequence recurrence and its truncated-nothing BPTT are written
    by hand in numpy; per-step tape nodes would dominate the runtime.
    """
    from . import tape

    x = xs.data[:, ::-1] if reverse else xs.data
    batch, steps, _ = x.shape
    wz, wr, wh = p.w_z.data, p.w_r.data, p.w_h.data
    uz, ur, uh = p.u_z.data, p.u_r.data, p.u_h.data
    hidden = uz.shape[0]
    xz = x @ wz + p.b_z.data                                   # (B, K, H)
    xr = x @ wr + p.b_r.data
    xh = x @ wh + p.b_h.data
    z_all = np.empty((batch, steps, hidden))
    r_all = np.empty_like(z_all)
    c_all = np.empty_like(z_all)
    hprev_all = np.empty_like(z_all)
    h = np.zeros((batch, hidden))
    hs = np.empty_like(z_all)
    for t in range(steps):
        hprev_all[:, t] = h
        z = _sigmoid(xz[:, t] + h @ uz)
        r = _sigmoid(xr[:, t] + h @ ur)
        c = np.tanh(xh[:, t] + (r * h) @ uh)
        h = h + z * (c - h)
        z_all[:, t], r_all[:, t], c_all[:, t] = z, r, c
        hs[:, t] = h
    out = hs[:, ::-1] if reverse else hs

    def backward(grad):
        g = np.ascontiguousarray(grad[:, ::-1]) if reverse else grad
        gxz = np.empty_like(z_all)
        gxr = np.empty_like(z_all)
        gxh = np.empty_like(z_all)
        gh = np.zeros((batch, hidden))
        uz_t, ur_t, uh_t = uz.T, ur.T, uh.T
        for t in range(steps - 1, -1, -1):
            z, r, c, hp = z_all[:, t], r_all[:, t], c_all[:, t], hprev_all[:, t]
            ght = g[:, t] + gh
            gz = ght * (c - hp)
            gc_pre = (ght * z) * (1.0 - c * c)
            gh = ght * (1.0 - z)
            grh = gc_pre @ uh_t
            gr = grh * hp
            gh += grh * r
            gr_pre = gr * r * (1.0 - r)
            gz_pre = gz * z * (1.0 - z)
            gh += gr_pre @ ur_t
            gh += gz_pre @ uz_t
            gxz[:, t], gxr[:, t], gxh[:, t] = gz_pre, gr_pre, gc_pre
        flat = lambda a: a.reshape(-1, a.shape[-1])
        x_f = flat(x)
        hp_f = flat(hprev_all)
        g_uz = hp_f.T @ flat(gxz)
        g_ur = hp_f.T @ flat(gxr)
        g_uh = flat(r_all * hprev_all).T @ flat(gxh)
        g_wz, g_wr, g_wh = x_f.T @ flat(gxz), x_f.T @ flat(gxr), x_f.T @ flat(gxh)
        g_bz, g_br, g_bh = (a.sum(axis=(0, 1)) for a in (gxz, gxr, gxh))
        g_x = gxz @ wz.T + gxr @ wr.T + gxh @ wh.T
        if reverse:
            g_x = np.ascontiguousarray(g_x[:, ::-1])
        return [g_x, g_wz, g_wr, g_wh, g_uz, g_ur, g_uh, g_bz, g_br, g_bh]

    return tape.apply_custom(
        "gru_pass", out,
        [xs, p.w_z, p.w_r, p.w_h, p.u_z, p.u_r, p.u_h, p.b_z, p.b_r, p.b_h],
        backward)


def gru_sequence(xs: Tensor, forward: GruParams, backward: GruParams | None = None) -> Tensor:
    """Run a GRU over xs (B, K, I) -> (B, K, H), or (B, K, 2H) when bidirectional.

    Initial state is zero; the bidirectional output concatenates forward and
    backward states per frame.
    """
    if xs.ndim != 3:
        raise ValueError(f"gru_sequence expects (B, K, I), got {xs.shape}")
    if xs.shape[1] == 0:
        raise ValueError("gru_sequence: empty sequence")
    states = _gru_direction(xs, forward, reverse=False)
    if backward is not None:
        back = _gru_direction(xs, backward, reverse=True)
        states = concat([states, back], axis=-1)
    return states


@dataclass
class AttentionParams:
    w_query: Tensor    # (Q, A)
    w_memory: Tensor   # (M, A)
    loc_kernels: Tensor  # (w, 1, F), convolved over accumulated weights
    w_loc: Tensor      # (F, A)
    v: Tensor          # (A, 1) scoring vector
    b: Tensor          # (A,)


def init_attention(store, prefix: str, query_dim: int, memory_dim: int,
                   attn_dim: int, filters: int, kernel_width: int, rng) -> None:
    store.add(f"{prefix}/w_query", uniform_init(rng, query_dim, (query_dim, attn_dim)))
    store.add(f"{prefix}/w_memory", uniform_init(rng, memory_dim, (memory_dim, attn_dim)))
    store.add(f"{prefix}/loc_kernels", uniform_init(rng, kernel_width, (kernel_width, 1, filters)))
    store.add(f"{prefix}/w_loc", uniform_init(rng, filters, (filters, attn_dim)))
    store.add(f"{prefix}/v", uniform_init(rng, attn_dim, (attn_dim, 1)))
    store.add(f"{prefix}/b", np.zeros(attn_dim))


def bind_attention(bound: dict, prefix: str) -> AttentionParams:
    return AttentionParams(*[bound[f"{prefix}/{k}"] for k in
                             ("w_query", "w_memory", "loc_kernels", "w_loc", "v", "b")])


def location_sensitive_attention(query: Tensor, memory: Tensor, prev_weights: Tensor,
                                 p: AttentionParams, mask=None):
    """Score memory positions from content plus convolved location history.

    query (B, Q) or (Q,); memory (B, T, M) or (T, M); prev_weights (B, T) or
    (T,), normally the accumulated weights of all previous steps (all-zero at
    step 0).  Returns (context (B, M), weights (B, T)), squeezed when the
    inputs were unbatched.  `mask` is an optional additive (B, T) array with
    large negatives at padding positions.
    """
    squeeze = memory.ndim == 2
    if squeeze:
        memory = memory.reshape(1, *memory.shape)
        query = query.reshape(1, -1)
        prev_weights = prev_weights.reshape(1, -1)
    batch, steps, _ = memory.shape
    if steps == 0:
        raise ValueError("attention over empty memory")

    loc = apply("conv1d_same", prev_weights.reshape(batch, steps, 1), p.loc_kernels)
    scores_in = apply("add", apply("matmul", memory, p.w_memory),
                      apply("matmul", query, p.w_query).reshape(batch, 1, -1))
    scores_in = apply("add", scores_in, apply("matmul", loc, p.w_loc))
    scores_in = apply("tanh", apply("add", scores_in, p.b))
    scores = apply("matmul", scores_in, p.v).reshape(batch, steps)
    if mask is not None:
        scores = apply("add", scores, mask)
    weights = apply("softmax_last_axis", scores)                    # (B, T)
    context = apply("matmul", weights.reshape(batch, 1, steps), memory)
    context = context.reshape(batch, memory.shape[-1])
    if squeeze:
        return context.reshape(-1), weights.reshape(-1)
    return context, weights

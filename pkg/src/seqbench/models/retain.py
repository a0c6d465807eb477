"""Reverse-time two-level attention (RETAIN-style) over visit vectors."""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .cells import GRUCell
from .connections import _lengths, reverse_padded, run_sequence


def retain_param_shapes(embed_dim: int, hidden_size: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    shapes.update(GRUCell(embed_dim, hidden_size, "alpha").param_shapes())
    shapes.update(GRUCell(embed_dim, hidden_size, "beta").param_shapes())
    shapes["alpha.w"] = (hidden_size,)
    shapes["alpha.b"] = (1,)
    shapes["beta.W"] = (hidden_size, embed_dim)
    shapes["beta.b"] = (embed_dim,)
    shapes["head.w"] = (embed_dim,)
    shapes["head.b"] = (1,)
    return shapes


def _reversed_states(v: Tensor, mask, prefix, params) -> Tensor:
    """GRU run over each row's visits back to front, re-aligned so position i belongs to visit i."""
    d = v.shape[2]
    H = params[f"{prefix}.b_z"].shape[0]
    cell = GRUCell(d, H, prefix)
    states = nx.stack(run_sequence(reverse_padded(v, mask), cell, params), axis=1)
    return reverse_padded(states, mask)


def retain_attention(v: Tensor, mask: np.ndarray, params) -> tuple[Tensor, Tensor, Tensor]:
    """Return (logit [B], alpha [B, T], beta [B, T, d])."""
    _lengths(mask)
    real = np.asarray(mask) > 0
    g = _reversed_states(v, mask, "alpha", params)
    energy = nx.reshape(nx.affine(g, nx.reshape(params["alpha.w"], (-1, 1)), params["alpha.b"]), real.shape)
    alpha = nx.softmax(energy, mask=real)
    hb = _reversed_states(v, mask, "beta", params)
    beta = nx.tanh(nx.affine(hb, params["beta.W"], params["beta.b"]))
    B, T = real.shape
    weighted = nx.reshape(alpha, (B, T, 1)) * beta * v
    context = nx.sum(weighted, axis=1)
    logit = nx.reshape(nx.affine(context, nx.reshape(params["head.w"], (-1, 1)), params["head.b"]), (-1,))
    return logit, alpha, beta


def retain_forward(v: Tensor, mask: np.ndarray, params) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Probability per patient plus visit-level (alpha) and feature-level (beta) attentions."""
    with nx.no_grad():
        logit, alpha, beta = retain_attention(v, mask, params)
        return nx.sigmoid(logit).data, alpha.data, beta.data

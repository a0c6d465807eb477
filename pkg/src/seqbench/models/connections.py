"""How cells are wired over a padded visit sequence.

Sequences are right-padded: a row's real visits occupy ``t < length`` and the
visit mask is 1 exactly there.
"""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .cells import Cell


def _lengths(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    lengths = mask.sum(axis=1).astype(np.int64)
    if np.any(lengths < 1):
        raise ValueError("sequence with no real visits")
    return lengths


def _dt_column(delta_days, t):
    return None if delta_days is None else np.asarray(delta_days)[:, t]


def embed_visits(table: Tensor, codes: np.ndarray, code_mask: np.ndarray) -> Tensor:
    """Visit vector = mean embedding of the visit's codes; empty visits map to zero."""
    return nx.embedding_mean(table, codes, code_mask)


def classify_head(hidden: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Logit ``hidden @ w + b`` of shape [B]; apply ``sigmoid`` for a probability."""
    return nx.reshape(nx.affine(hidden, nx.reshape(w, (-1, 1)), b), (-1,))


def run_standard(x: Tensor, mask: np.ndarray, cell: Cell, params, delta_days=None) -> Tensor:
    """Left-to-right recurrence from a zero state; hidden at each row's last real visit."""
    _lengths(mask)
    B, T = x.shape[0], x.shape[1]
    xw = cell.project_inputs(params, x)
    U = cell.recurrent_weights(params)
    state = cell.zero_state(B)
    for t in range(T):
        new = cell.step(state, xw[:, t], U, _dt_column(delta_days, t))
        keep = np.asarray(mask)[:, t:t + 1] > 0
        state = tuple(nx.where(keep, n, s) for n, s in zip(new, state))
    return cell.output(state)


def reversal_order(mask: np.ndarray) -> np.ndarray:
    """Per-row time permutation reversing the real visits and leaving padding in place."""
    lengths = _lengths(mask)
    T = np.asarray(mask).shape[1]
    t = np.arange(T)[None, :]
    return np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)


def reverse_padded(x: Tensor, mask: np.ndarray) -> Tensor:
    return nx.permute_time(x, reversal_order(mask))


def _reverse_dt(delta_days, mask):
    if delta_days is None:
        return None
    order = reversal_order(mask)
    rows = np.arange(order.shape[0])[:, None]
    return np.asarray(delta_days)[rows, order]


def run_bidirectional(x: Tensor, mask: np.ndarray, fwd: Cell, bwd: Cell, params,
                      delta_days=None) -> Tensor:
    """Concatenation of the final forward state and the final state over the reversed sequence."""
    h_fwd = run_standard(x, mask, fwd, params, delta_days)
    h_bwd = run_standard(reverse_padded(x, mask), mask, bwd, params, _reverse_dt(delta_days, mask))
    return nx.concat([h_fwd, h_bwd], axis=1)


def run_sequence(x: Tensor, cell: Cell, params, dilation: int = 1, delta_days=None) -> list[Tensor]:
    """Full hidden sequence with recurrent edges ``t - dilation -> t``; no masking."""
    B, T = x.shape[0], x.shape[1]
    xw = cell.project_inputs(params, x)
    U = cell.recurrent_weights(params)
    zero = cell.zero_state(B)
    states = []
    for t in range(T):
        prev = states[t - dilation] if t - dilation >= 0 else zero
        states.append(cell.step(prev, xw[:, t], U, _dt_column(delta_days, t)))
    return [cell.output(s) for s in states]


def last_real(seq: list[Tensor] | Tensor, mask: np.ndarray) -> Tensor:
    lengths = _lengths(mask)
    stacked = nx.stack(seq, axis=1) if isinstance(seq, list) else seq
    return nx.take_rows(stacked, np.arange(len(lengths)), lengths - 1)


def run_dilated(x: Tensor, mask: np.ndarray, cells: list[Cell], params, delta_days=None) -> Tensor:
    """Stacked layers, layer l (1-based) recurring over ``t - 2**(l-1)``; top hidden at last real visit."""
    if not cells:
        raise ValueError("dilated connection needs at least one layer")
    _lengths(mask)
    seq = x
    for l, cell in enumerate(cells):
        out = run_sequence(seq, cell, params, dilation=2 ** l, delta_days=delta_days)
        seq = nx.stack(out, axis=1) if l + 1 < len(cells) else out
    return last_real(seq, mask)


def causal_window(x: Tensor, width: int) -> Tensor:
    """Concatenate ``x[t-width+1] ... x[t]`` on the feature axis, zero-padded on the left."""
    B, T, d = x.shape
    parts = []
    for shift in range(width - 1, 0, -1):
        if shift >= T:
            parts.append(Tensor(np.zeros((B, T, d))))
        else:
            parts.append(nx.concat([Tensor(np.zeros((B, shift, d))), x[:, : T - shift]], axis=1))
    parts.append(x)
    return nx.concat(parts, axis=2) if len(parts) > 1 else x


def fo_pool(z: list[Tensor], f: list[Tensor], c0: Tensor | None = None) -> list[Tensor]:
    """fo-pooling ``c_t = f_t * c_{t-1} + (1 - f_t) * z_t``; returns the cell sequence."""
    c = c0 if c0 is not None else Tensor(np.zeros(z[0].shape))
    out = []
    for z_t, f_t in zip(z, f):
        c = f_t * c + (1.0 - f_t) * z_t
        out.append(c)
    return out


def qrnn_forward(x: Tensor, mask: np.ndarray, params, prefix: str = "qrnn", width: int = 2) -> Tensor:
    """Single QRNN layer with causal width-``width`` convolutional gates and fo-pooling."""
    _lengths(mask)
    H = params[f"{prefix}.b_z"].shape[0]
    window = causal_window(x, width)
    W = nx.concat([params[f"{prefix}.W_{g}"] for g in ("z", "f", "o")], axis=1)
    b = nx.concat([params[f"{prefix}.b_{g}"] for g in ("z", "f", "o")], axis=0)
    pre = nx.affine(window, W, b)
    z = nx.tanh(pre[:, :, :H])
    fo = nx.sigmoid(pre[:, :, H:])
    T = x.shape[1]
    cs = fo_pool([z[:, t] for t in range(T)], [fo[:, t, :H] for t in range(T)])
    hs = nx.stack(cs, axis=1) * fo[:, :, H:]
    return last_real(hs, mask)

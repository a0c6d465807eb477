"""Recurrent cells: vanilla tanh RNN, GRU, LSTM and time-aware LSTM.

Weights use the row-vector convention ``x @ W``. Each cell keeps one
``W_<gate>`` [in x H], ``U_<gate>`` [H x H] and ``b_<gate>`` [H] per gate. For
speed the input projections of a whole sequence are computed in one matmul
(``project_inputs``) and ``step`` only adds the recurrent part.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor

DT_CAP_DAYS = 3650.0


def memory_decay(delta_days) -> np.ndarray:
    """T-LSTM discount ``1 / log(e + dt)``; 1 at dt=0, strictly decreasing."""
    dt = np.minimum(np.asarray(delta_days, dtype=float), DT_CAP_DAYS)
    if np.any(dt < 0):
        raise ValueError("elapsed time must be nonnegative")
    return 1.0 / np.log(math.e + dt)


class Cell:
    gates: tuple[str, ...] = ()
    state_size = 1  # number of [B x H] tensors carried

    def __init__(self, input_size: int, hidden_size: int, prefix: str):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.prefix = prefix

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, H, p = self.input_size, self.hidden_size, self.prefix
        shapes = {}
        for g in self.gates:
            shapes[f"{p}.W_{g}"] = (d, H)
            shapes[f"{p}.U_{g}"] = (H, H)
            shapes[f"{p}.b_{g}"] = (H,)
        return shapes

    def _p(self, params, name) -> Tensor:
        return params[f"{self.prefix}.{name}"]

    def project_inputs(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        """All gates' input projections ``x @ [W_g...] + [b_g...]`` for x of shape (..., d)."""
        W = nx.concat([self._p(params, f"W_{g}") for g in self.gates], axis=1)
        b = nx.concat([self._p(params, f"b_{g}") for g in self.gates], axis=0)
        return nx.affine(x, W, b)

    def recurrent_weights(self, params: Mapping[str, Tensor]):
        return nx.concat([self._p(params, f"U_{g}") for g in self.gates], axis=1)

    def zero_state(self, batch: int) -> tuple[Tensor, ...]:
        return tuple(Tensor(np.zeros((batch, self.hidden_size))) for _ in range(self.state_size))

    def step(self, state, xw_t: Tensor, U, dt_t=None):
        raise NotImplementedError

    def output(self, state) -> Tensor:
        return state[0]


class RNNCell(Cell):
    gates = ("h",)

    def param_shapes(self):
        d, H, p = self.input_size, self.hidden_size, self.prefix
        return {f"{p}.W_x": (d, H), f"{p}.W_h": (H, H), f"{p}.b": (H,)}

    def project_inputs(self, params, x):
        return nx.affine(x, self._p(params, "W_x"), self._p(params, "b"))

    def recurrent_weights(self, params):
        return self._p(params, "W_h")

    def step(self, state, xw_t, U, dt_t=None):
        (h,) = state
        return (nx.tanh(nx.addmm(xw_t, h, U)),)


class GRUCell(Cell):
    gates = ("z", "r", "h")

    def recurrent_weights(self, params):
        Uzr = nx.concat([self._p(params, "U_z"), self._p(params, "U_r")], axis=1)
        return Uzr, self._p(params, "U_h")

    def step(self, state, xw_t, U, dt_t=None):
        (h,) = state
        Uzr, Uh = U
        H = self.hidden_size
        zr = nx.sigmoid(nx.addmm(xw_t[:, : 2 * H], h, Uzr))
        z, r = zr[:, :H], zr[:, H:]
        cand = nx.tanh(nx.addmm(xw_t[:, 2 * H:], r * h, Uh))
        return ((1.0 - z) * h + z * cand,)


class LSTMCell(Cell):
    gates = ("i", "f", "o", "g")
    state_size = 2

    def _lstm(self, h, c, xw_t, U):
        H = self.hidden_size
        pre = nx.addmm(xw_t, h, U)
        ifo = nx.sigmoid(pre[:, : 3 * H])
        g = nx.tanh(pre[:, 3 * H:])
        i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
        c_new = f * c + i * g
        return o * nx.tanh(c_new), c_new

    def step(self, state, xw_t, U, dt_t=None):
        h, c = state
        return self._lstm(h, c, xw_t, U)


class TLSTMCell(LSTMCell):
    """LSTM whose short-term memory is discounted by the elapsed time before each step."""

    def param_shapes(self):
        shapes = super().param_shapes()
        H, p = self.hidden_size, self.prefix
        shapes[f"{p}.W_d"] = (H, H)
        shapes[f"{p}.b_d"] = (H,)
        return shapes

    def recurrent_weights(self, params):
        return super().recurrent_weights(params), self._p(params, "W_d"), self._p(params, "b_d")

    def step(self, state, xw_t, U, dt_t=None):
        h, c = state
        U_lstm, W_d, b_d = U
        if dt_t is None:
            raise ValueError("T-LSTM needs elapsed times")
        g = memory_decay(dt_t)[:, None]
        short = nx.tanh(nx.affine(c, W_d, b_d))
        adjusted = (c - short) + short * g
        return self._lstm(h, adjusted, xw_t, U_lstm)


CELLS = {"RNN": RNNCell, "GRU": GRUCell, "LSTM": LSTMCell, "TLSTM": TLSTMCell}


def _as_row(x) -> Tensor:
    x = nx.as_tensor(x)
    return nx.reshape(x, (1, -1)) if x.ndim == 1 else x


def _single_step(cell_cls, params, state, x, dt=None, prefix="cell"):
    x = _as_row(x)
    state = tuple(_as_row(s) for s in state)
    H = state[0].shape[1]
    cell = cell_cls(x.shape[1], H, prefix)
    out = cell.step(state, cell.project_inputs(params, x), cell.recurrent_weights(params), dt)
    return out


def rnn_step(h, x, params, prefix="cell") -> Tensor:
    """``tanh(x W_x + h W_h + b)``."""
    return _single_step(RNNCell, params, (h,), x, prefix=prefix)[0]


def gru_step(h, x, params, prefix="cell") -> Tensor:
    """GRU update ``(1 - z) * h + z * candidate``; z gates the candidate."""
    return _single_step(GRUCell, params, (h,), x, prefix=prefix)[0]


def lstm_step(h, c, x, params, prefix="cell") -> tuple[Tensor, Tensor]:
    return _single_step(LSTMCell, params, (h, c), x, prefix=prefix)


def tlstm_step(h, c, x, delta_days, params, prefix="cell") -> tuple[Tensor, Tensor]:
    dt = np.atleast_1d(np.asarray(delta_days, dtype=float))
    if np.any(dt < 0):
        raise ValueError("elapsed time must be nonnegative")
    return _single_step(TLSTMCell, params, (h, c), x, dt=dt, prefix=prefix)

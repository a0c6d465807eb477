"""Bag-of-codes logistic regression baseline."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..ehr import PatientRecord, Vocabulary


def multi_hot(codes: np.ndarray, code_mask: np.ndarray, vocab_size: int) -> np.ndarray:
    """Presence (not counts) of every code anywhere in each patient's history."""
    B = codes.shape[0]
    x = np.zeros((B, vocab_size))
    rows = np.broadcast_to(np.arange(B)[:, None, None], codes.shape)
    real = np.asarray(code_mask) > 0
    x[rows[real], codes[real]] = 1.0
    return x


def records_multi_hot(records: Sequence[PatientRecord], vocab_size: int) -> np.ndarray:
    x = np.zeros((len(records), vocab_size))
    for i, r in enumerate(records):
        for v in r.visits:
            x[i, list(v.codes)] = 1.0
    return x


def lr_logits(x: np.ndarray, params) -> nx.Tensor:
    return nx.reshape(nx.affine(nx.Tensor(x), nx.reshape(params["lr.w"], (-1, 1)), params["lr.b"]), (-1,))


def lr_forward(records: Sequence[PatientRecord], vocab: Vocabulary | int, params) -> np.ndarray:
    vocab_size = vocab if isinstance(vocab, int) else len(vocab)
    with nx.no_grad():
        return nx.sigmoid(lr_logits(records_multi_hot(records, vocab_size), params)).data

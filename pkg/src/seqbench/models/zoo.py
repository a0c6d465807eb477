"""Architecture registry, parameter initialization and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..ehr import Batch
from ..numerics import Rng, Tensor
from .cells import CELLS
from .connections import (
    classify_head,
    embed_visits,
    qrnn_forward,
    run_bidirectional,
    run_dilated,
    run_standard,
)
from .logistic import lr_logits, multi_hot
from .retain import retain_attention, retain_param_shapes

MODEL_SCHEMA = "seqbench-model/1"

# display name -> (cell, connection)
ARCHITECTURES: dict[str, tuple[str, str]] = {
    "GRU": ("GRU", "standard"),
    "LSTM": ("LSTM", "standard"),
    "Vanilla-RNN": ("RNN", "standard"),
    "Bi-GRU": ("GRU", "bidirectional"),
    "Bi-LSTM": ("LSTM", "bidirectional"),
    "Bi-RNN": ("RNN", "bidirectional"),
    "D-GRU": ("GRU", "dilated"),
    "D-LSTM": ("LSTM", "dilated"),
    "D-RNN": ("RNN", "dilated"),
    "QRNN": ("QRNN", "qrnn"),
    "T-LSTM": ("TLSTM", "standard"),
    "RETAIN": ("RETAIN", "retain"),
    "LR": ("LR", "bag"),
}

_ALIASES = {name.lower().replace("-", "").replace("_", ""): name for name in ARCHITECTURES}
_ALIASES.update({"rnn": "Vanilla-RNN", "tlstm": "T-LSTM", "dgru": "D-GRU", "bigru": "Bi-GRU"})


def canonical_arch(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in _ALIASES:
        raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}")
    return _ALIASES[key]


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    vocab_size: int
    embed_dim: int = 32
    hidden_size: int = 32
    num_layers: int | None = None
    qrnn_filter_width: int = 2

    def __post_init__(self):
        object.__setattr__(self, "architecture", canonical_arch(self.architecture))
        if self.num_layers is None:
            object.__setattr__(self, "num_layers", 3 if self.connection == "dilated" else 1)
        for name in ("vocab_size", "embed_dim", "hidden_size", "num_layers", "qrnn_filter_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelSpec.{name} must be positive")

    @property
    def cell(self) -> str:
        return ARCHITECTURES[self.architecture][0]

    @property
    def connection(self) -> str:
        return ARCHITECTURES[self.architecture][1]

    def to_dict(self) -> dict:
        return asdict(self)


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class SequenceModel:
    """One classifier from the zoo: shapes, init, and a batch -> logits forward."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        d, H = spec.embed_dim, spec.hidden_size
        self.cells = []
        cell_cls = CELLS.get(spec.cell)
        if spec.connection == "standard":
            self.cells = [cell_cls(d, H, "cell")]
        elif spec.connection == "bidirectional":
            self.cells = [cell_cls(d, H, "fwd"), cell_cls(d, H, "bwd")]
        elif spec.connection == "dilated":
            self.cells = [cell_cls(d if l == 0 else H, H, f"layer{l}") for l in range(spec.num_layers)]

    @property
    def uses_embedding(self) -> bool:
        return self.spec.connection != "bag"

    @property
    def head_width(self) -> int:
        return 2 * self.spec.hidden_size if self.spec.connection == "bidirectional" else self.spec.hidden_size

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        s = self.spec
        if s.connection == "bag":
            return {"lr.w": (s.vocab_size,), "lr.b": (1,)}
        shapes = {"embedding": (s.vocab_size, s.embed_dim)}
        if s.connection == "retain":
            shapes.update(retain_param_shapes(s.embed_dim, s.hidden_size))
            return shapes
        if s.connection == "qrnn":
            k, d, H = s.qrnn_filter_width, s.embed_dim, s.hidden_size
            for g in ("z", "f", "o"):
                shapes[f"qrnn.W_{g}"] = (k * d, H)
                shapes[f"qrnn.b_{g}"] = (H,)
        for cell in self.cells:
            shapes.update(cell.param_shapes())
        shapes["head.w"] = (self.head_width,)
        shapes["head.b"] = (1,)
        return shapes

    def init_params(self, seed: int) -> dict[str, Tensor]:
        """Glorot-uniform weights, zero biases; each tensor has its own named stream."""
        root = Rng(seed)
        params = {}
        for name, shape in self.param_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("b"):
                data = np.zeros(shape)
            else:
                data = glorot(root.stream("init", name), shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return params

    def logits(self, params, batch: Batch) -> Tensor:
        s = self.spec
        if s.connection == "bag":
            return lr_logits(multi_hot(batch.codes, batch.code_mask, s.vocab_size), params)
        v = embed_visits(params["embedding"], batch.codes, batch.code_mask)
        mask = batch.visit_mask
        dt = batch.delta_days if s.cell == "TLSTM" else None
        if s.connection == "retain":
            return retain_attention(v, mask, params)[0]
        if s.connection == "standard":
            hidden = run_standard(v, mask, self.cells[0], params, dt)
        elif s.connection == "bidirectional":
            hidden = run_bidirectional(v, mask, self.cells[0], self.cells[1], params, dt)
        elif s.connection == "dilated":
            hidden = run_dilated(v, mask, self.cells, params, dt)
        else:
            hidden = qrnn_forward(v, mask, params, width=s.qrnn_filter_width)
        return classify_head(hidden, params["head.w"], params["head.b"])

    def loss(self, params, batch: Batch) -> Tensor:
        return nx.bce_with_logits(self.logits(params, batch), batch.labels)

    def predict(self, params, batch: Batch) -> np.ndarray:
        with nx.no_grad():
            return nx.sigmoid(self.logits(params, batch)).data


def build_model(spec: ModelSpec) -> SequenceModel:
    return SequenceModel(spec)


def ensemble_probs(p_a, p_b) -> np.ndarray:
    """Arithmetic mean of two probability vectors (used for GRU + LR)."""
    p_a, p_b = np.asarray(p_a, dtype=float), np.asarray(p_b, dtype=float)
    for p in (p_a, p_b):
        if np.any((p < 0) | (p > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
    return 0.5 * (p_a + p_b)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, spec: ModelSpec, params) -> None:
    """Write a JSON header line followed by raw little-endian float64 tensors."""
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"schema": MODEL_SCHEMA, "spec": spec.to_dict(), "tensors": entries}
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ModelSpec, dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: not a model checkpoint")
    header = json.loads(raw[:newline])
    if header.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"{path}: unknown schema {header.get('schema')!r}")
    spec = ModelSpec(**header["spec"])
    body = raw[newline + 1:]
    params = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64)
        params[e["name"]] = Tensor(arr.reshape(e["shape"]), requires_grad=True, name=e["name"])
    expected = SequenceModel(spec).param_shapes()
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ValueError(f"{path}: tensors do not match the stored model spec")
    return spec, params

"""The seven optimizer families and the early-stopping training loop."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .ehr import PaddedCohort, PatientRecord
from .evaluation import auroc
from .numerics import DimensionError, Rng, Tensor

log = logging.getLogger(__name__)

FAMILIES = ("Adam", "Adamax", "Adagrad", "Adadelta", "RMSprop", "ASGD", "SGD")

DEFAULT_LR = {"SGD": 0.01, "ASGD": 0.01, "Adagrad": 0.01, "Adadelta": 1.0,
              "RMSprop": 0.01, "Adam": 0.001, "Adamax": 0.002}
DEFAULT_EPS = {"SGD": 1e-8, "ASGD": 1e-8, "Adagrad": 1e-10, "Adadelta": 1e-6,
               "RMSprop": 1e-8, "Adam": 1e-8, "Adamax": 1e-8}


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


def canonical_family(name: str) -> str:
    for fam in FAMILIES:
        if fam.lower() == name.lower():
            return fam
    raise ValueError(f"unknown optimizer {name!r}; choose from {', '.join(FAMILIES)}")


@dataclass
class OptimizerConfig:
    family: str = "Adam"
    lr: float | None = None
    weight_decay: float = 0.0
    eps: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    momentum: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        self.family = canonical_family(self.family)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.family]
        if self.eps is None:
            self.eps = DEFAULT_EPS[self.family]
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


class Optimizer:
    """Stateful update rule over a name -> array (or Tensor) parameter map.

    Weight decay is added to the gradient before the family's rule. ASGD keeps a
    uniform running average of the iterates, available from ``averaged``.
    """

    def __init__(self, cfg: OptimizerConfig, state: dict | None = None):
        self.cfg = cfg
        self.state = state if state is not None else {"step": 0}

    def _slot(self, slot: str, name: str, like: np.ndarray) -> np.ndarray:
        bucket = self.state.setdefault(slot, {})
        if name not in bucket:
            bucket[name] = np.zeros_like(like)
        return bucket[name]

    def step(self, params: Mapping, grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.cfg
        arrays = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
        g_all = {}
        for name, w in arrays.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(w)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != w.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
            g_all[name] = g
        if cfg.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in g_all.values()))
            if norm > cfg.clip_norm:
                g_all = {k: g * (cfg.clip_norm / norm) for k, g in g_all.items()}

        self.state["step"] += 1
        t = self.state["step"]
        fam, lr, eps = cfg.family, cfg.lr, cfg.eps
        for name, w in arrays.items():
            g = g_all[name]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * w
            if fam in ("SGD", "ASGD"):
                if cfg.momentum:
                    buf = self._slot("momentum", name, w)
                    buf *= cfg.momentum
                    buf += g
                    g = buf
                w -= lr * g
                if fam == "ASGD":
                    avg = self.state.setdefault("average", {})
                    if name not in avg:
                        avg[name] = w.copy()
                    else:
                        avg[name] += (w - avg[name]) / t
            elif fam == "Adagrad":
                acc = self._slot("sum_sq", name, w)
                acc += g * g
                w -= lr * g / (np.sqrt(acc) + eps)
            elif fam == "Adadelta":
                sq = self._slot("sq_avg", name, w)
                delta_sq = self._slot("delta_avg", name, w)
                sq *= cfg.rho
                sq += (1 - cfg.rho) * g * g
                delta = np.sqrt(delta_sq + eps) / np.sqrt(sq + eps) * g
                delta_sq *= cfg.rho
                delta_sq += (1 - cfg.rho) * delta * delta
                w -= lr * delta
            elif fam == "RMSprop":
                sq = self._slot("sq_avg", name, w)
                sq *= cfg.rho
                sq += (1 - cfg.rho) * g * g
                w -= lr * g / (np.sqrt(sq) + eps)
            elif fam == "Adam":
                m = self._slot("m", name, w)
                v = self._slot("v", name, w)
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                m_hat = m / (1 - cfg.beta1 ** t)
                v_hat = v / (1 - cfg.beta2 ** t)
                w -= lr * m_hat / (np.sqrt(v_hat) + eps)
            elif fam == "Adamax":
                m = self._slot("m", name, w)
                u = self._slot("u", name, w)
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                np.maximum(cfg.beta2 * u, np.abs(g), out=u)
                w -= (lr / (1 - cfg.beta1 ** t)) * m / (u + eps)

    def averaged(self, params: Mapping) -> dict[str, np.ndarray]:
        """Parameters to evaluate with: the ASGD average, otherwise the iterate itself."""
        avg = self.state.get("average", {})
        out = {}
        for k, v in params.items():
            arr = v.data if isinstance(v, Tensor) else v
            out[k] = avg[k].copy() if k in avg else arr.copy()
        return out


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict | None,
                   cfg: OptimizerConfig) -> tuple[dict[str, np.ndarray], dict]:
    """Pure form of one update: returns new parameters and new state, inputs untouched."""
    new_params = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in params.items()}
    opt = Optimizer(cfg, copy.deepcopy(state) if state is not None else None)
    opt.step(new_params, grads)
    return new_params, opt.state


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 128
    patience: int = 5
    seed: int = 0
    min_delta: float = 1e-4
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("max_epochs", "batch_size", "patience", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    valid_auroc: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    def __iter__(self):
        return iter((self.params, self.history))

    @property
    def best_valid_auroc(self) -> float:
        return max(h.valid_auroc for h in self.history)


def _as_padded(data) -> PaddedCohort:
    return data if isinstance(data, PaddedCohort) else PaddedCohort(data)


def predict(model, params, data, batch_size: int = 256) -> np.ndarray:
    cohort = _as_padded(data)
    return np.concatenate([model.predict(params, b) for b in cohort.batches(batch_size)])


def evaluate_auroc(model, params, data, batch_size: int = 256) -> float:
    cohort = _as_padded(data)
    return auroc(predict(model, params, cohort, batch_size), cohort.labels)


def _tensors(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}


def train_model(model, params: dict[str, Tensor], train: Sequence[PatientRecord] | PaddedCohort,
                valid: Sequence[PatientRecord] | PaddedCohort, opt_cfg: OptimizerConfig,
                train_cfg: TrainConfig | None = None) -> TrainResult:
    """Mini-batch BCE training keeping the parameters of the best validation epoch.

    Stops once ``patience`` consecutive epochs fail to beat the best validation
    AUROC by more than ``min_delta``, or at ``max_epochs``.
    """
    from .models.zoo import SequenceModel, ModelSpec

    if isinstance(model, ModelSpec):
        model = SequenceModel(model)
    train_cfg = train_cfg or TrainConfig()
    train_set, valid_set = _as_padded(train), _as_padded(valid)
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if len(set(valid_set.labels.tolist())) < 2:
        raise ValueError("validation set must contain both classes (AUROC undefined)")

    opt = Optimizer(opt_cfg)
    rng = Rng(train_cfg.seed)
    best_auc = -np.inf
    best_params = None
    best_epoch = 0
    stale = 0
    history: list[EpochStats] = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.stream("shuffle", epoch).permutation(len(train_set))
        total, count = 0.0, 0
        for batch in train_set.batches(train_cfg.batch_size, order):
            for p in params.values():
                p.grad = None
            loss = model.loss(params, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step(params, {k: p.grad for k, p in params.items()})
            total += value * len(batch)
            count += len(batch)
        eval_params = _tensors(opt.averaged(params))
        auc = evaluate_auroc(model, eval_params, valid_set, train_cfg.eval_batch_size)
        history.append(EpochStats(epoch, total / count, auc))
        log.debug("epoch %d loss %.5f valid auroc %.5f", epoch, total / count, auc)
        if auc > best_auc:
            stale = 0 if auc > best_auc + train_cfg.min_delta else stale + 1
            best_auc, best_params, best_epoch = auc, eval_params, epoch
        else:
            stale += 1
        if stale >= train_cfg.patience:
            break
    return TrainResult(best_params, history, best_epoch)


def write_history_csv(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "valid_auroc"])
        for h in history:
            writer.writerow([h.epoch, repr(h.train_loss), repr(h.valid_auroc)])

"""Bayesian hyperparameter search: GP surrogate, expected improvement, trial ledger."""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

from .numerics import Rng

log = logging.getLogger(__name__)

N_WARMUP = 10
N_CANDIDATES = 1000
LENGTH_SCALE = 0.2
NOISE = 1e-6
VARIANCE_FLOOR = 1e-4


class SurrogateError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dimension:
    name: str
    low: float
    high: float
    scale: str = "linear"  # linear | log | log2
    integer: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"{self.name}: lower bound must be below upper bound")
        if self.scale not in ("linear", "log", "log2"):
            raise ValueError(f"{self.name}: unknown scale {self.scale!r}")
        if self.scale != "linear" and self.low <= 0:
            raise ValueError(f"{self.name}: log scales need positive bounds")

    def decode(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.scale == "linear":
            value = self.low + u * (self.high - self.low)
        else:
            log_fn, base = (math.log2, 2.0) if self.scale == "log2" else (math.log10, 10.0)
            lo, hi = log_fn(self.low), log_fn(self.high)
            value = base ** (lo + u * (hi - lo))
        if self.integer:
            return int(min(max(round(value), math.ceil(self.low)), math.floor(self.high)))
        return min(max(value, self.low), self.high)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    def __len__(self) -> int:
        return len(self.dims)

    def decode(self, point) -> dict:
        point = np.asarray(point, dtype=float)
        if point.shape != (len(self.dims),):
            raise ValueError(f"point must have {len(self.dims)} coordinates")
        return {d.name: d.decode(u) for d, u in zip(self.dims, point)}


def default_space() -> SearchSpace:
    return SearchSpace((
        Dimension("embed_dim", 8, 256, "log2", integer=True),
        Dimension("hidden_size", 8, 512, "log2", integer=True),
        Dimension("lr", 1e-5, 1e-1, "log"),
        Dimension("weight_decay", 1e-8, 1e-2, "log"),
        Dimension("eps", 1e-10, 1e-4, "log"),
    ))


@dataclass
class Trial:
    index: int
    point: list[float]
    params: dict
    valid_auroc: float = 0.0
    test_auroc: float | None = None
    seed: int = 0
    wall_seconds: float = 0.0
    status: str = "ok"
    arch: str = ""
    family: str = ""
    error: str | None = None

    def to_json(self) -> dict:
        # wall time stays out of the file so reruns are byte-identical
        out = {"index": self.index, "arch": self.arch, "family": self.family, "seed": self.seed,
               "status": self.status, "point": self.point, "params": self.params,
               "valid_auroc": self.valid_auroc, "test_auroc": self.test_auroc}
        if self.error:
            out["error"] = self.error
        return out

    @classmethod
    def from_json(cls, obj: dict) -> Trial:
        return cls(index=obj["index"], point=list(obj["point"]), params=dict(obj["params"]),
                   valid_auroc=obj["valid_auroc"], test_auroc=obj.get("test_auroc"), seed=obj["seed"],
                   status=obj.get("status", "ok"), arch=obj.get("arch", ""), family=obj.get("family", ""),
                   error=obj.get("error"))


# ---------------------------------------------------------------- acquisition


def expected_improvement(mu, sigma, best: float, xi: float = 0.01):
    """Expected improvement over ``best`` for a maximization problem."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    gain = mu - best - xi
    safe = np.where(sigma > 0, sigma, 1.0)
    with np.errstate(over="ignore"):
        # subnormal sigma sends z to +-inf, which is the right limit
        z = gain / safe
        phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei = np.where(sigma > 0, gain * ndtr(z) + sigma * phi, np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def matern52(a: np.ndarray, b: np.ndarray, length_scale: float = LENGTH_SCALE, variance: float = 1.0) -> np.ndarray:
    diff = (a[:, None, :] - b[None, :, :]) / length_scale
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    s5r = math.sqrt(5.0) * r
    return variance * (1.0 + s5r + 5.0 / 3.0 * r * r) * np.exp(-s5r)


@dataclass
class GaussianProcess:
    """Posterior of a zero-noise-ish GP with Matern-5/2 kernel and constant mean."""

    x: np.ndarray
    y: np.ndarray
    mean: float
    variance: float
    jitter: float
    _factor: tuple = field(repr=False, default=None)
    _alpha: np.ndarray = field(repr=False, default=None)

    def __call__(self, query) -> tuple[np.ndarray, np.ndarray]:
        q = np.atleast_2d(np.asarray(query, dtype=float))
        k = matern52(q, self.x, variance=self.variance)
        mu = self.mean + k @ self._alpha
        v = cho_solve(self._factor, k.T)
        var = np.maximum(self.variance - np.sum(k * v.T, axis=1), 0.0)
        return mu, np.sqrt(var)


def fit_surrogate(points, values, length_scale: float = LENGTH_SCALE) -> GaussianProcess:
    x = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(values, dtype=float)
    if len(y) < 1:
        raise SurrogateError("need at least one observation")
    mean = float(y.mean())
    variance = float(np.var(y, ddof=1)) if len(y) > 1 else 0.0
    variance = max(variance, VARIANCE_FLOOR)
    K = matern52(x, x, length_scale, variance)
    jitter = NOISE
    for _ in range(8):
        try:
            factor = cho_factor(K + jitter * np.eye(len(y)), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
    else:
        raise SurrogateError("kernel matrix singular after jitter escalation")
    gp = GaussianProcess(x, y, mean, variance, jitter)
    gp._factor = factor
    gp._alpha = cho_solve(factor, y - mean)
    return gp


def fit_trials(trials: Sequence[Trial]) -> GaussianProcess:
    return fit_surrogate([t.point for t in trials], [t.valid_auroc for t in trials])


def suggest_point(trials: Sequence[Trial], n_dims: int, rng: np.random.Generator,
                  n_warmup: int = N_WARMUP, n_candidates: int = N_CANDIDATES) -> np.ndarray:
    """Unit-cube point: uniform during warmup, else the candidate with the largest EI."""
    if len(trials) < n_warmup:
        return rng.uniform(size=n_dims)
    gp = fit_trials(trials)
    candidates = rng.uniform(size=(n_candidates, n_dims))
    mu, sigma = gp(candidates)
    ei = expected_improvement(mu, sigma, max(t.valid_auroc for t in trials))
    return candidates[int(np.argmax(ei))]


def suggest_next(trials: Sequence[Trial], space: SearchSpace, rng: np.random.Generator) -> tuple[list[float], dict]:
    point = suggest_point(trials, len(space), rng)
    return point.tolist(), space.decode(point)


def maximize(objective: Callable[[dict], float], space: SearchSpace, n_trials: int, seed: int) -> list[Trial]:
    """Maximize ``objective`` over ``space`` with the study's suggest rule (no training)."""
    root = Rng(seed)
    trials: list[Trial] = []
    for i in range(n_trials):
        point, params = suggest_next(trials, space, root.stream("suggest", i))
        trials.append(Trial(i, point, params, valid_auroc=float(objective(params))))
    return trials


# ---------------------------------------------------------------- studies


@dataclass
class StudyData:
    """Train/valid/test records plus vocabulary size, shared by all trials of a study."""

    train: list
    valid: list
    test: list
    vocab_size: int


def split_budget(budget: int, families: Sequence[str]) -> list[tuple[str, int]]:
    """Spread ``budget`` over optimizer families, earlier families take the remainder."""
    base, extra = divmod(budget, len(families))
    return [(f, base + (1 if i < extra else 0)) for i, f in enumerate(families) if base + (i < extra) > 0]


def run_trial(arch: str, family: str, params: dict, data: StudyData, seed: int, train_cfg_kwargs: dict) -> dict:
    """Train one configuration; returns metrics, never raises on numerical failure."""
    from .models import ModelSpec, SequenceModel
    from .optim import OptimizerConfig, TrainConfig, evaluate_auroc, train_model

    start = time.perf_counter()
    try:
        spec = ModelSpec(arch, vocab_size=data.vocab_size, embed_dim=params["embed_dim"],
                         hidden_size=params["hidden_size"])
        model = SequenceModel(spec)
        init = model.init_params(Rng(seed).child_seed("init"))
        opt_cfg = OptimizerConfig(family, lr=params["lr"], weight_decay=params["weight_decay"],
                                  eps=params["eps"], clip_norm=5.0 if spec.cell == "RNN" else None)
        train_cfg = TrainConfig(seed=Rng(seed).child_seed("train"), **train_cfg_kwargs)
        result = train_model(model, init, data.train, data.valid, opt_cfg, train_cfg)
        valid = result.best_valid_auroc
        test = evaluate_auroc(model, result.params, data.test) if data.test else None
        return {"status": "ok", "valid_auroc": valid, "test_auroc": test,
                "wall_seconds": time.perf_counter() - start, "epochs": len(result.history)}
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        return {"status": "failed", "valid_auroc": 0.0, "test_auroc": None, "error": f"{type(exc).__name__}: {exc}",
                "wall_seconds": time.perf_counter() - start}


class Ledger:
    """Append-only JSON Lines trial log; appends are serialized."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.trials: list[Trial] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")

    def append(self, trial: Trial) -> None:
        with self._lock:
            self.trials.append(trial)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(trial.to_json(), sort_keys=True) + "\n")


def read_ledger(path) -> list[Trial]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(Trial.from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed ledger entry ({exc})") from None
    return out


def best_so_far(trials: Sequence[Trial]) -> list[float]:
    """Running maximum of validation AUROC over the ledger prefix."""
    out, best = [], -math.inf
    for t in trials:
        best = max(best, t.valid_auroc)
        out.append(best)
    return out


def run_study(arch: str, data: StudyData, space: SearchSpace | None = None, budget: int = 15,
              root_seed: int = 0, families: Sequence[str] | None = None, ledger_path=None, workers: int = 1,
              train_cfg: dict | None = None) -> list[Trial]:
    """Bayesian search for one architecture, one BO run per optimizer family.

    The budget is split evenly across families. Within a family each round
    issues ``workers`` suggestions from the same ledger snapshot; results are
    appended in trial order so the ledger does not depend on timing.
    """
    from .models import canonical_arch
    from .optim import FAMILIES, canonical_family

    if budget < 1:
        raise ValueError("budget must be at least 1")
    arch = canonical_arch(arch)
    space = space or default_space()
    families = [canonical_family(f) for f in (families or FAMILIES)]
    train_cfg = dict(train_cfg or {})
    root = Rng(root_seed)
    ledger = Ledger(ledger_path)
    index = 0
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for family, n in split_budget(budget, families):
            fam_trials: list[Trial] = []
            done = 0
            while done < n:
                round_size = min(workers, n - done)
                issued = []
                for k in range(round_size):
                    i = index + k
                    point, params = suggest_next(fam_trials, space, root.stream("suggest", arch, family, done + k))
                    issued.append((i, point, params, root.child_seed("trial", arch, i)))
                if pool is None:
                    outcomes = [run_trial(arch, family, p, data, s, train_cfg) for _, _, p, s in issued]
                else:
                    futures = [pool.submit(run_trial, arch, family, p, data, s, train_cfg) for _, _, p, s in issued]
                    outcomes = [f.result() for f in futures]
                for (i, point, params, seed), res in zip(issued, outcomes):
                    trial = Trial(i, point, params, res["valid_auroc"], res["test_auroc"], seed,
                                  res["wall_seconds"], res["status"], arch, family, res.get("error"))
                    ledger.append(trial)
                    fam_trials.append(trial)
                    log.info("%s trial %d [%s] valid %.4f test %s (%.1fs)%s", arch, i, family, trial.valid_auroc,
                             "n/a" if trial.test_auroc is None else f"{trial.test_auroc:.4f}",
                             trial.wall_seconds, f" FAILED {trial.error}" if trial.status != "ok" else "")
                index += round_size
                done += round_size
    finally:
        if pool is not None:
            pool.shutdown()
    return ledger.trials

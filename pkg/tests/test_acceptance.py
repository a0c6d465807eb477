"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line that pytest prints in its terminal summary.
"""

import time

import numpy as np
import pytest

from helpers import random_batch
from seqbench import numerics as nx
from seqbench.cli import run_cli
from seqbench.ehr import (
    Encounter,
    GeneratorSpec,
    build_readmission_labels,
    generate_cohort,
    latent_risk,
    split_cohort,
)
from seqbench.evaluation import auroc, make_report, select_best, table1_fixture
from seqbench.hpo import Dimension, SearchSpace, StudyData, expected_improvement, maximize, run_study
from seqbench.models import ARCHITECTURES, ModelSpec, SequenceModel
from seqbench.models.cells import CELLS
from seqbench.models.connections import run_dilated, run_standard
from seqbench.models.retain import retain_forward, retain_param_shapes
from seqbench.numerics import Tensor
from seqbench.optim import FAMILIES, Optimizer, OptimizerConfig, optimizer_step

# central-difference step for the gradient suite; see the decisions log
GRAD_STEP = 2e-4


def test_gradient_suite(criterion):
    start = time.perf_counter()
    worst = {}
    for k, arch in enumerate(ARCHITECTURES):
        rng = np.random.default_rng(1000 + k)
        batch = random_batch(rng, vocab_size=20, batch=3, steps=6)
        model = SequenceModel(ModelSpec(arch, vocab_size=20, embed_dim=4, hidden_size=5))
        params = model.init_params(k)
        worst[arch] = nx.finite_diff_check(lambda p: model.loss(p, batch), params, h=GRAD_STEP)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = len(worst) == 13 and max(worst.values()) < 1e-4 and elapsed < 120
    criterion(1, "gradient suite", ok,
              f"13 architectures, max rel err {worst[top]:.2e} ({top}) < 1e-4, {elapsed:.1f}s < 120s")


def test_reduction_identities(criterion):
    rng = np.random.default_rng(2)
    bitwise = 0
    for i in range(100):
        kind = ("RNN", "GRU", "LSTM", "TLSTM")[i % 4]
        d, H = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        cell = CELLS[kind](d, H, "layer0")
        params = {k: Tensor(rng.normal(0, 0.7, size=s)) for k, s in cell.param_shapes().items()}
        b = random_batch(rng, batch=int(rng.integers(1, 5)), steps=int(rng.integers(1, 8)))
        x = Tensor(rng.normal(size=b.visit_mask.shape + (d,)))
        dt = b.delta_days if kind == "TLSTM" else None
        a = run_dilated(x, b.visit_mask, [cell], params, dt).data
        s = run_standard(x, b.visit_mask, cell, params, dt).data
        bitwise += bool(np.array_equal(a, s))

    tl_gap = 0.0
    for seed in range(20):
        lstm = SequenceModel(ModelSpec("LSTM", vocab_size=20, embed_dim=4, hidden_size=5))
        tlstm = SequenceModel(ModelSpec("T-LSTM", vocab_size=20, embed_dim=4, hidden_size=5))
        params = tlstm.init_params(seed)
        params["cell.W_d"] = Tensor(rng.normal(size=(5, 5)))
        params["cell.b_d"] = Tensor(rng.normal(size=5))
        b = random_batch(rng)
        b.delta_days[:] = 0.0
        shared = {k: v for k, v in params.items() if k in lstm.param_shapes()}
        tl_gap = max(tl_gap, float(np.max(np.abs(tlstm.logits(params, b).data - lstm.logits(shared, b).data))))

    alpha_gap = 0.0
    for seed in range(20):
        params = {k: Tensor(rng.normal(0, 0.8, size=s)) for k, s in retain_param_shapes(4, 5).items()}
        b = random_batch(rng, batch=5, steps=7)
        v = Tensor(rng.normal(size=(5, 7, 4)))
        _, alpha, _ = retain_forward(v, b.visit_mask, params)
        alpha_gap = max(alpha_gap, float(np.max(np.abs(alpha.sum(axis=1) - 1.0))))

    ok = bitwise == 100 and tl_gap <= 1e-12 and alpha_gap <= 1e-12
    criterion(2, "reduction identities", ok,
              f"dilated L=1 bitwise {bitwise}/100; T-LSTM(dt=0) vs LSTM {tl_gap:.1e}; "
              f"RETAIN |sum(alpha)-1| {alpha_gap:.1e}")


def _pairwise(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).sum() / diff.size)


def test_auroc_oracle(criterion):
    rng = np.random.default_rng(3)
    worst, tied, done = 0.0, 0, 0
    while done < 200:
        n = int(rng.integers(2, 501))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        if done % 2:
            scores = rng.integers(0, int(rng.integers(1, 10)), n).astype(float)
        else:
            scores = rng.normal(size=n)
        tied += len(np.unique(scores)) < n
        worst = max(worst, abs(auroc(scores, labels) - _pairwise(scores, labels)))
        done += 1
    criterion(3, "AUROC oracle", worst <= 1e-12 and tied >= 100,
              f"200 instances ({tied} with ties), max |sort - pairwise| {worst:.1e}")


def test_optimizer_fixtures(criterion):
    one = lambda x: {"w": np.array([float(x)])}
    sgd = optimizer_step(one(1.0), one(0.5), None, OptimizerConfig("SGD", lr=0.1))[0]["w"][0]
    adam = optimizer_step(one(0.0), one(2.0), None, OptimizerConfig("Adam", lr=0.1, eps=1e-8))[0]["w"][0]
    ada = optimizer_step(one(1.0), one(-3.0), None, OptimizerConfig("Adagrad", lr=0.1, eps=1e-10))[0]["w"][0]
    errs = [abs(sgd - 0.95), abs(adam - (-0.1 * 2.0 / (2.0 + 1e-8))), abs(ada - (1.0 + 0.3 / (3.0 + 1e-10)))]

    reduced = []
    for family in FAMILIES:
        w = {"w": np.full(4, 10.0)}
        opt = Optimizer(OptimizerConfig(family))
        for _ in range(200):
            opt.step(w, {"w": 2.0 * w["w"]})
        if float(np.sum(opt.averaged(w)["w"] ** 2)) < 400.0:
            reduced.append(family)
    ok = max(errs) <= 1e-12 and len(reduced) == 7
    criterion(4, "optimizer fixtures", ok,
              f"first-step max err {max(errs):.1e}; {len(reduced)}/7 families reduce ||w||^2 in 200 steps")


def test_bo_sanity(criterion):
    space = SearchSpace((Dimension("x", 0.0, 1.0),))
    offsets = []
    for seed in range(5):
        trials = maximize(lambda p: -(p["x"] - 0.3) ** 2, space, 30, seed)
        best = max(trials, key=lambda t: t.valid_auroc)
        offsets.append(abs(best.params["x"] - 0.3))
    ei0 = expected_improvement(0.8, 0.0, 0.8)
    hits = sum(o <= 0.05 for o in offsets)
    criterion(5, "BO sanity", hits == 5 and ei0 == 0.0,
              f"{hits}/5 seeds within 0.05 (worst {max(offsets):.4f}); EI(sigma=0, mu=best) = {ei0}")


@pytest.mark.slow
def test_planted_signal_benchmark(criterion):
    start = time.perf_counter()
    spec = GeneratorSpec(n_patients=4000, seed=42)
    records, vocab, structure = generate_cohort(spec, return_structure=True)
    risk = [latent_risk(r.visits, spec, structure.code_weights, structure.order_pairs) for r in records]
    oracle = auroc(risk, [r.label for r in records])
    train, valid, test = split_cohort(records, (0.7, 0.1, 0.2), seed=42)
    data = StudyData(train, valid, test, len(vocab))
    ledgers = {arch: run_study(arch, data, budget=15, root_seed=42) for arch in ("GRU", "LR")}
    chosen = select_best(ledgers)
    elapsed = time.perf_counter() - start
    gru, lr = chosen["GRU"].test_auroc, chosen["LR"].test_auroc
    ok = oracle > 0.95 and gru >= 0.80 and gru - lr >= 0.05 and elapsed < 1800
    criterion(6, "planted-signal benchmark", ok,
              f"oracle {oracle:.4f}; GRU test {gru:.4f}; LR test {lr:.4f}; gap {gru - lr:.4f}; "
              f"{elapsed / 60:.1f} min")


def _random_encounters(rng):
    """One patient's sorted, non-overlapping encounters of mixed kinds."""
    encs, day = [], 0
    for _ in range(int(rng.integers(1, 7))):
        day += int(rng.integers(0, 150))
        kind = rng.choice(["inpatient", "inpatient", "transfer", "recurring", "other"])
        length = int(rng.integers(0, 6))
        encs.append(Encounter("p", day, day + length, str(kind), ("c",)))
        day += length
    return encs


def test_cohort_labeling(criterion):
    rules = {}
    for gap in (29, 91, 45):
        encs = [Encounter("p", 0, 4, "inpatient"), Encounter("p", 4 + gap, 6 + gap, "inpatient")]
        rules[gap] = build_readmission_labels(encs)[0].label
    rules_ok = rules == {29: 1, 91: 0, 45: None}

    rng = np.random.default_rng(7)
    invariant = 0
    for _ in range(1000):
        encs = _random_encounters(rng)
        core = [e for e in encs if e.kind == "inpatient"]
        a = build_readmission_labels(encs)[0]
        b = build_readmission_labels(core)[0] if core else None
        same = (a.label, a.gap_days) == ((b.label, b.gap_days) if b else (None, None))
        invariant += same
    criterion(7, "cohort labeling", rules_ok and invariant == 1000,
              f"gap 29/91/45 -> {rules[29]}/{rules[91]}/{rules[45]}; "
              f"insertion invariance {invariant}/1000")


def _pipeline(root):
    root.mkdir()
    cohort = root / "cohort.jsonl"
    prefix = root / "split"
    steps = [
        ["gen", "--task", "hf", "--patients", "300", "--vocab", "60", "--seed", "11", "--out", str(cohort)],
        ["split", "--in", str(cohort), "--ratios", "7:1:2", "--seed", "11", "--out-prefix", str(prefix)],
        ["hpo", "--arch", "GRU", "--budget", "3", "--data-prefix", str(prefix), "--seed", "11",
         "--max-epochs", "3", "--out", str(root / "ledger.jsonl")],
        ["report", "--hf", str(root / "ledger.jsonl"), "--out", str(root / "report.csv")],
    ]
    codes = [run_cli(argv) for argv in steps]
    files = {p.name: p.read_bytes() for p in sorted(root.iterdir())}
    return codes, files


def test_determinism(criterion, tmp_path):
    codes_a, files_a = _pipeline(tmp_path / "a")
    codes_b, files_b = _pipeline(tmp_path / "b")
    identical = files_a == files_b and len(files_a) == 6
    gru_row = make_report(table1_fixture()).to_csv().splitlines()[1]
    ok = codes_a == codes_b == [0, 0, 0, 0] and identical and gru_row == "GRU,84.8,75.5"
    criterion(8, "determinism", ok,
              f"{len(files_a)} pipeline files byte-identical: {identical}; fixture row {gru_row!r}")

"""Acceptance criteria, one test each; every test prints a PASS/FAIL verdict line."""

import json
import time

import numpy as np
import pytest

from _gradcheck import max_violation, numeric_grads
from _reference import reference_config, reference_run
from hyperfed import metrics
from hyperfed.calibration import LAMBDA_GRID, accumulate_stats, calibration_loss, oracle_finetune, server_solve
from hyperfed.data import Partition, make_synthetic, stratified_split
from hyperfed.engine import STREAM_HEAD, FedConfig, HeadSpec, run
from hyperfed.experiment import STREAM_RUN, calibrate_checkpoint, execute
from hyperfed.model import ClassifierHead, MlpExtractor, backward, forward, normalize_rows, trainable_params
from hyperfed.numerics import Rng, orthonormal_rows

SEEDS = range(5)
ALPHAS = (0.1, 0.5, "iid")


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return report


def test_criterion_01_closed_form_equals_centralized(verdict):
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        g = Rng(100 + i).generator()
        l, c = int(g.integers(2, 33)), int(g.integers(2, 11))
        n = int(g.integers(2 * l, 501))
        k = (1, 3, 10)[i % 3]
        lam = (0.0, 1e-3, 0.1)[(i // 3) % 3]
        zt = normalize_rows(g.normal(size=(n, l)))
        y = g.integers(0, c, size=n)
        owner = g.integers(0, k, size=n)
        stats = [accumulate_stats(zt[owner == j], y[owner == j], c) for j in range(k)]
        got = server_solve(stats, lam).weights
        want = np.linalg.solve(zt.T @ zt + lam * np.eye(l), zt.T @ np.eye(c)[y]).T
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-10 and elapsed < 10, f"max |W - W_central| = {worst:.2e}, {elapsed:.2f}s")


def test_criterion_02_closed_form_matches_sgd_oracle(verdict):
    start = time.perf_counter()
    cfg, wl, res = reference_run(0, "hypersphere")
    x, y = wl.train.features, wl.train.labels
    w_oracle = oracle_finetune(res.extractor, x, y, res.trained_head.weights, 100, 1.0, Rng(0).child(7))
    acc_oracle = metrics.accuracy(res.extractor, ClassifierHead(w_oracle), wl.test.features, wl.test.labels)
    zt = normalize_rows(res.extractor.features(x))
    loss_ffc = calibration_loss(res.head.weights, zt, y)
    loss_oracle = calibration_loss(w_oracle, zt, y)
    gap = abs(res.accuracy_after - acc_oracle)
    elapsed = time.perf_counter() - start
    ok = gap <= 0.005 and loss_ffc <= loss_oracle + 1e-9 and elapsed < 120
    verdict(2, ok, f"acc ffc {res.accuracy_after:.4f} vs oracle {acc_oracle:.4f}; "
                   f"loss {loss_ffc:.9f} vs {loss_oracle:.9f}; {elapsed:.1f}s")


def test_criterion_03_cost_figures(verdict):
    fedavg_mb = metrics.cost_classifier_comm("fedavg", 1280, 100, rounds=100) / 1e6
    ffc_mb = metrics.cost_classifier_comm("ffc", 1280, 100) / 1e6
    flops = metrics.cost_ffc_flops(1280, 100, [50_000])[0]
    ok = (abs(fedavg_mb - 102.4) / 102.4 <= 0.005 and abs(ffc_mb - 7.07) / 7.07 <= 0.005
          and abs(flops - 1.766e11) / 1.766e11 <= 0.005)
    verdict(3, ok, f"fedavg {fedavg_mb:.2f} MB, ffc {ffc_mb:.3f} MB, {flops:.4e} FLOPs")


def test_criterion_04_hyperspherical_head(verdict):
    w = orthonormal_rows(100, 1280, Rng(0))
    gram_err = float(np.max(np.abs(w @ w.T - np.eye(100))))
    cfg, wl, res = reference_run(0, "hypersphere")
    built = cfg.head_spec().build(wl.train.num_classes, cfg.model.feature_dim,
                                  Rng(cfg.seed).child(STREAM_RUN).child(STREAM_HEAD))
    same = np.array_equal(res.trained_head.weights, built.weights) and len(res.reports) == 40
    verdict(4, gram_err < 1e-10 and same, f"|WW^T - I| = {gram_err:.2e}; head bit-identical after 40 rounds: {same}")


def test_criterion_05_finite_differences(verdict):
    start = time.perf_counter()
    worst, checked, seed = -np.inf, 0, 0
    for loss in ("mse", "ce"):
        for normalize in (False, True):
            done = 0
            while done < 8:
                seed += 1
                rng = Rng(seed).child(5)
                g = rng.generator()
                d, l, c = int(g.integers(2, 8)), int(g.integers(2, 7)), int(g.integers(2, 5))
                model = MlpExtractor.init([d, int(g.integers(2, 6)), l], rng.child(0))
                head = ClassifierHead.random(c, l, rng.child(1), normalize_features=normalize, tau=1.5)
                x, y = g.normal(size=(3, d)), g.integers(0, c, size=3)
                trace = forward(model, head, x)
                # skip draws that sit on a ReLU kink or a vanishing feature
                kink = min(np.min(np.abs(p)) for p in trace.pre[:-1])
                if kink <= 1e-3 or np.min(np.linalg.norm(trace.z, axis=1)) <= 1e-3:
                    continue
                analytic = backward(trace, model, head, y, loss).as_list()
                assert len(analytic) == len(trainable_params(model, head))
                worst = max(worst, max_violation(analytic, numeric_grads(model, head, x, y, loss)))
                done += 1
                checked += 1
    elapsed = time.perf_counter() - start
    verdict(5, worst <= 0 and elapsed < 30, f"{checked} instances, worst excess over tolerance {worst:.2e}, {elapsed:.1f}s")


def _micro_problem():
    rng = Rng(21)
    full = make_synthetic(4, 12, 40, 1.0, rng.child(1))
    train, test = stratified_split(full, 0.25, rng.child(2))
    order = rng.child(3).generator().permutation(len(train))
    # equal client sizes give every client the same number of local steps
    return train, test, Partition(list(np.array_split(order, 4)), 0.5), rng.child(4)


def test_criterion_06_strategy_reductions(verdict):
    train, test, part, rng = _micro_problem()
    base = dict(local_epochs=2, batch_size=10, lr=0.05, schedule="constant", momentum=0.9)
    variants = {
        "fedprox(mu=0)": dict(strategy="fedprox", mu=0.0),
        "fedopt(lr=1,m=0)": dict(strategy="fedopt", server_lr=1.0, server_momentum=0.0),
        "fednova(equal tau)": dict(strategy="fednova"),
    }
    spec, dims = HeadSpec("trainable"), [12, 16, 8]
    worst = {name: 0.0 for name in variants}
    for rounds in (1, 2, 3):
        ref = run(train, test, part, FedConfig(rounds=rounds, **base), spec, dims, rng)
        ref_vec = np.concatenate([p.ravel() for p in trainable_params(ref.extractor, ref.head)])
        for name, extra in variants.items():
            res = run(train, test, part, FedConfig(rounds=rounds, **base, **extra), spec, dims, rng)
            vec = np.concatenate([p.ravel() for p in trainable_params(res.extractor, res.head)])
            worst[name] = max(worst[name], float(np.max(np.abs(vec - ref_vec))))
    ok = all(v <= 1e-12 for v in worst.values())
    verdict(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def _baseline(seed, alpha):
    if alpha == 0.1:
        return reference_run(seed, "baseline")
    return reference_run(seed, "baseline", partition__alpha=alpha)


def test_criterion_07_alignment_trend(verdict):
    start = time.perf_counter()
    cos, diff = [], []
    for alpha in ALPHAS:
        per_seed = [_baseline(s, alpha)[2].reports for s in SEEDS]
        cos.append(np.mean([np.mean([r.cosine for r in reps]) for reps in per_seed]))
        diff.append(np.mean([np.mean([r.norm_diff for r in reps]) for reps in per_seed]))
    elapsed = time.perf_counter() - start
    ok = cos[0] < cos[1] < cos[2] and diff[0] > diff[1] > diff[2] and elapsed < 600
    verdict(7, ok, "cosine " + " < ".join(f"{v:.4f}" for v in cos)
            + "; norm diff " + " > ".join(f"{v:.4f}" for v in diff) + f"; {elapsed:.0f}s")


def test_criterion_08_fixed_head_beats_trainable(verdict):
    gains = []
    for seed in range(3):
        sphere = reference_run(seed, "hypersphere")[2].accuracy_after
        base = _baseline(seed, 0.1)[2].accuracy_before
        gains.append(sphere - base)
    ok = all(g > 0 for g in gains) and np.mean(gains) > 0
    verdict(8, ok, "accuracy gain per seed " + ", ".join(f"{g:+.4f}" for g in gains))


def test_criterion_09_byte_identical_logs(verdict, tmp_path):
    cfg = reference_config(0)
    execute(cfg, tmp_path)
    first = {p.name: p.read_bytes() for p in sorted(tmp_path.iterdir())}
    execute(cfg, tmp_path)
    second = {p.name: p.read_bytes() for p in sorted(tmp_path.iterdir())}
    same = first == second
    verdict(9, same and "run.jsonl" in first, f"artifacts compared: {sorted(first)}")


def test_criterion_10_calibration_variants(verdict, tmp_path):
    # lambda grid over the calibration statistics of one trained model
    grid_cfg = reference_config(0, "hypersphere", calibration__lambdas=list(LAMBDA_GRID))
    _, res = execute(grid_cfg, tmp_path / "grid")
    grid = [r for r in _read_jsonl(tmp_path / "grid" / "run.jsonl") if r.get("source") == "lambda_grid"]
    accs = [r["test_accuracy"] for r in grid]
    grid_ok = len(grid) == len(LAMBDA_GRID) and all(np.isfinite(accs))
    spread = max(accs) - min(accs)

    once = reference_run(0, "hypersphere", calibration__lam=0.1)[2].accuracy_after
    every = reference_run(0, "hypersphere", calibration__lam=0.1, calibration__mode="every",
                          calibration__every=10)[2].accuracy_after
    periodic_ok = abs(every - once) <= 0.01

    deltas = []
    for seed in range(3):
        cfg = reference_config(seed, "ce-calibrate")
        execute(cfg, tmp_path / f"ce{seed}")
        row = calibrate_checkpoint(tmp_path / f"ce{seed}" / "final.ckpt", cfg, [cfg.calibration.lam],
                                   tmp_path / f"ce{seed}" / "post")[0]
        deltas.append(row["delta"])
    ce_ok = all(d > 0 for d in deltas)
    verdict(10, grid_ok and periodic_ok and ce_ok,
            f"lambda grid spread {spread:.4f}; periodic {every:.4f} vs one-shot {once:.4f}; "
            "CE deltas " + ", ".join(f"{d:+.4f}" for d in deltas))


def _read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]

"""Acceptance criteria. Each test prints one PASS/FAIL line; all lines are
repeated in the terminal summary under "acceptance criteria"."""

import time
from pathlib import Path

import numpy as np
import pytest

from fedverify import cli, data, experiment, fed
from fedverify.config import parse_config
from fedverify.fed import ClientUpdate, DpConfig
from fedverify.nn import ParamSlot, ParamVector

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_gradient_suite(verdict):
    start = time.perf_counter()
    report = cli.gradcheck_suite(seeds=20, base_seed=0, input_size=16, tolerance=1e-4)
    elapsed = time.perf_counter() - start
    ok = report.worst < 1e-4 and elapsed < 60
    detail = f"worst rel err {report.worst:.2e} (< 1e-4) over 20 seeds in {elapsed:.1f}s (< 60s)"
    assert verdict("gradient suite", ok, detail), "\n".join(report.lines())


def test_aggregation_reduction(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        size = int(rng.integers(1, 500))
        layout = (ParamSlot("w", "W", (size,)),)
        g = ParamVector(rng.normal(size=size), layout)
        n = int(rng.integers(1, 100))
        updates = [
            ClientUpdate(cid, ParamVector(rng.normal(scale=rng.uniform(0.01, 10), size=size), layout), n, rng.random())
            for cid in rng.choice(1000, size=int(rng.integers(1, 12)), replace=False)
        ]
        w = fed.attention_weights(fed.score_updates(g, updates, "uniform"), rng.uniform(0.1, 5))
        diff = fed.attention_aggregate(g, updates, w).values - fed.fedavg_aggregate(g, updates).values
        worst = max(worst, float(np.max(np.abs(diff))))
    assert verdict("aggregation reduction", worst <= 1e-12, f"max |attention - fedavg| {worst:.1e} (<= 1e-12) on 50 sets")


def test_softmax_invariants(verdict):
    rng = np.random.default_rng(7)
    failures = 0
    trials = 2000
    for t in range(trials):
        k = int(rng.integers(1, 40))
        # every other vector sits at magnitude 1e3, where a naive exp() overflows
        offset = float(rng.choice([-1e3, 1e3])) if t % 2 else 0.0
        scores = {i: offset + float(s) for i, s in enumerate(rng.uniform(-50, 50, size=k))}
        tau = float(rng.uniform(0.2, 5))
        c = float(rng.uniform(-1e3, 1e3))
        a = np.array(list(fed.attention_weights(scores, tau).weights.values()))
        b = np.array(list(fed.attention_weights({i: s + c for i, s in scores.items()}, tau).weights.values()))
        ok = (
            np.all(np.isfinite(a))
            and abs(a.sum() - 1) <= 1e-12
            and np.all(a > 0)
            and np.max(np.abs(a - b)) <= 1e-12
        )
        failures += not ok
    extreme = fed.attention_weights({0: 1e3, 1: 0.0}).weights
    ok = failures == 0 and extreme[0] == 1.0 and np.isfinite(extreme[1])
    detail = f"{trials} random score vectors (half at magnitude 1e3), {failures} violations"
    assert verdict("softmax invariants", ok, detail)


def test_metrics_oracle(verdict):
    problems = cli.metrics_oracle(100, seed=0, max_n=200)
    assert verdict("metrics oracle", not problems, f"100 random scored sets (n <= 200), {len(problems)} mismatches"), problems


@pytest.fixture(scope="module")
def desk_run():
    cfg = parse_config(CONFIGS / "desk.ini")
    start = time.perf_counter()
    bundle = experiment.run_experiment(cfg)
    elapsed = time.perf_counter() - start
    finals = {
        m: np.array([bundle.records[(m, s)][-1].accuracy for s in cfg.experiment.seeds])
        for m in cfg.experiment.methods
    }
    return cfg, bundle, finals, elapsed


@pytest.mark.slow
def test_ordering_experiment(desk_run, verdict):
    cfg, bundle, finals, elapsed = desk_run
    assert not bundle.failures
    assert cfg.dataset.num_subjects == 40 and cfg.dataset.impressions_per_subject == 8
    assert (cfg.partition.scheme, cfg.partition.alpha) == ("dirichlet", 0.3)
    assert (cfg.fed.num_clients, cfg.fed.clients_per_round, cfg.fed.rounds) == (10, 5, 30)
    assert len(cfg.experiment.seeds) == 5
    att, avg, loc = (finals[m].mean() for m in ("attention", "fedavg", "local_only"))
    paired = float(np.mean(finals["attention"] - finals["fedavg"]))
    ok = paired >= -0.005 and avg >= loc and elapsed < 600
    detail = (
        f"attention {att:.4f}, fedavg {avg:.4f}, local_only {loc:.4f}; "
        f"paired attention - fedavg {paired:+.4f} (>= -0.005); whole experiment {elapsed:.0f}s (< 600s)"
    )
    assert verdict("ordering experiment", ok, detail)


@pytest.mark.slow
def test_dp_degradation(desk_run, verdict):
    cfg, _, finals, _ = desk_run
    assert cfg.dp == DpConfig(1.0, 0.05)
    gap = float(finals["attention"].mean() - finals["attention_dp"].mean())
    detail = (
        f"attention {finals['attention'].mean():.4f}, attention_dp {finals['attention_dp'].mean():.4f}, "
        f"gap {gap:.4f} (<= 0.05) at C=1.0, sigma=0.05"
    )
    assert verdict("DP degradation bound", abs(gap) <= 0.05, detail)


def test_dp_mechanism(verdict):
    rng = np.random.default_rng(11)
    layout = (ParamSlot("w", "W", (10_000,)),)
    worst_ratio, over = 0.0, 0
    for _ in range(200):
        delta = rng.normal(scale=rng.uniform(0.01, 100), size=10_000)
        clip = float(rng.uniform(0.1, 10))
        out = fed.dp_sanitize(ClientUpdate(0, ParamVector(delta, layout), 1, 0.0), DpConfig(clip, 0.0), rng)
        norm = float(np.linalg.norm(out.delta.values))
        over += norm > clip
        worst_ratio = max(worst_ratio, norm / clip)
    delta = rng.normal(size=10_000)
    clipped = delta * min(1.0, 1.0 / np.linalg.norm(delta))
    out = fed.dp_sanitize(ClientUpdate(0, ParamVector(delta, layout), 1, 0.0), DpConfig(1.0, 0.5), rng)
    std = float(np.std(out.delta.values - clipped))
    ok = over == 0 and 0.48 <= std <= 0.52
    detail = (
        f"sigma=0: {over} of 200 clipped norms above C (max norm/C {worst_ratio:.17g}); "
        f"sigma=0.5: noise std {std:.4f} over 1e4 coords"
    )
    assert verdict("DP mechanism", ok, detail)


def test_determinism(tmp_path, verdict):
    cfg = str(CONFIGS / "smoke.ini")
    codes = [cli.main(["run", cfg, "--output", str(tmp_path / d), "--quiet"]) for d in ("a", "b")]
    a, b = ((tmp_path / d / "rounds.csv").read_bytes() for d in ("a", "b"))
    ok = codes == [0, 0] and a == b and len(a.splitlines()) > 1
    assert verdict("determinism", ok, f"two `run` executions, rounds.csv {len(a)} bytes, identical={a == b}")


def test_conservation(verdict):
    rng = np.random.default_rng(99)
    bad = []
    for trial in range(100):
        n_subj = int(rng.integers(2, 40))
        subjects = [
            data.Subject(sid, [np.zeros((1, 1))] * int(rng.integers(2, 10))) for sid in range(1, n_subj + 1)
        ]
        k = int(rng.integers(1, n_subj // 2 + 1))
        kind = ["iid", "dirichlet", "shard"][trial % 3]
        scheme = data.Scheme(kind, alpha=float(10 ** rng.uniform(-2, 6)), shards=int(rng.integers(2, 5)))
        try:
            part = data.partition(subjects, k, scheme, seed=trial)
        except ValueError as exc:
            bad.append(f"trial {trial}: {exc}")
            continue
        got = sorted(r for refs in part.assignments.values() for r in refs)
        want = sorted((s.subject_id, i) for s in subjects for i in range(len(s.impressions)))
        if got != want:
            bad.append(f"trial {trial}: {scheme} k={k} lost or duplicated impressions")
    assert verdict("conservation", not bad, f"100 random (subjects, clients, scheme, seed) configurations, {len(bad)} failures"), bad

"""End-to-end acceptance checks. Each test records one PASS/FAIL line."""

import csv
import json
import math

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from streamfl import cli
from streamfl.cache import CacheConfig, PolicyConfig, next_counts
from streamfl.config import ExperimentConfig
from streamfl.distributions import RegimeSet, build_regimes, build_stream_profile, sample_stream_counts
from streamfl.federation import init_state, run_round
from streamfl.learner import ModelParams, SyntheticTask, forward_loss, gradient, local_train, sample_items
from streamfl.metrics import loglog_slope, monte_carlo_discrepancy
from streamfl.rng import substream

from test_cache import run_policy

SEEDS = "10"
ALL_POLICIES = ("FULL", "DRSR", "SRSR", "FIFO", "LAZY")


def record(n, ok, detail):
    line = f"[acceptance {n:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def per_seed(out_dir, policy, metric):
    """Per-seed metric read back from the rounds CSVs written by the CLI."""
    manifest = json.loads((out_dir / "manifest.json").read_text())
    values = []
    for seed in manifest["seeds"]:
        rows = read_rows(out_dir / f"rounds_{policy}_{seed}.csv")
        if metric == "final":
            values.append(float(rows[-1]["accuracy"]))
        elif metric == "late":
            window = rows[-max(1, len(rows) // 10) :]
            values.append(float(np.mean([float(r["accuracy"]) for r in window])))
        elif metric == "psi":
            values.append(math.fsum(float(r["psi_t"]) for r in rows))
    return np.array(values)


def mean_se(values):
    return float(np.mean(values)), float(np.std(values, ddof=1) / math.sqrt(len(values)))


def gap(a, b):
    """Mean difference ``a - b`` and its pooled standard error."""
    (ma, sa), (mb, sb) = mean_se(a), mean_se(b)
    return ma - mb, math.hypot(sa, sb)


# -- 1: bound grid ------------------------------------------------------------


def test_bounds_hold_over_grid(tmp_path):
    out = tmp_path / "bounds"
    rc = cli.main(["bounds", "--out", str(out)])
    rows = read_rows(out / "bounds.csv")
    expected = len(cli.default_grid())
    failed = [r for r in rows if r["pass"] != "PASS"]
    worst = max(rows, key=lambda r: float(r["mc_estimate"]) / float(r["bound"]))
    ok = rc == 0 and len(rows) == expected and not failed
    record(
        1,
        ok,
        f"{len(rows) - len(failed)}/{expected} cells within bound + 3 SE; tightest ratio "
        f"{float(worst['mc_estimate']) / float(worst['bound']):.3f} ({worst['policy']} M={worst['M']} "
        f"beta={worst['beta']} t={worst['t']})",
    )
    assert ok, failed[:5]


# -- 2: DRSR keeps the running average ------------------------------------------


@pytest.mark.parametrize("B, B_s, beta", [(300, 150, 1.0), (1000, 100, 4.0), (210, 7, 0.0)])
def test_drsr_tracks_running_average(B, B_s, beta):
    regimes = build_regimes(substream(11, 0, "regimes"), 10, 10, 0.5, [0, 1, 2, 5])
    rs = RegimeSet.build(regimes, beta)
    stream = sample_stream_counts(rs, B_s, 1000, substream(11, 0, "stream"))[0]
    cfg = CacheConfig(B, B_s)
    policy = PolicyConfig("DRSR")
    counts, ideal = np.zeros(10, dtype=np.int64), np.zeros(10)
    running = np.zeros(10)
    worst = 0.0
    for t, batch in enumerate(stream, start=1):
        counts, ideal = next_counts(policy, cfg, t, counts, ideal, batch)
        running += batch / B_s
        worst = max(worst, float(np.max(np.abs(counts / counts.sum() - running / t))))
    # the real-valued recursion accumulates a few ulps of drift over 1000 rounds
    ok = worst <= 1 / B + 1e-12
    record(2, ok, f"B={B} B_s={B_s} beta={beta}: max |v - running mean| = {worst:.3e} vs 1/B = {1 / B:.3e}")
    assert ok


# -- 3: SRSR closed form ------------------------------------------------------


@pytest.mark.parametrize("theta", [1 / 3, 2 / 3, 1.0])
def test_srsr_matches_geometric_sum(theta, small_regimes):
    cfg = CacheConfig(300, 30)
    M = cfg.M
    stream = sample_stream_counts(small_regimes, 30, 1000, substream(3, 0, "srsr"))[0]
    _, history = run_policy(PolicyConfig("SRSR", theta), cfg, stream)
    ideal = np.array([h[1] for h in history])

    # after the fill, L_t = a^(t-M) L_M + theta * sum_{tau=M+1..t} a^(t-tau) S_tau
    a = 1.0 - theta * cfg.batch_size / cfg.capacity
    L_M = stream[:M].sum(axis=0).astype(float)
    t = np.arange(M + 1, 1001)
    lag = t[:, None] - t[None, :]
    weights = np.where(lag >= 0, a ** np.clip(lag, 0, None), 0.0)
    closed = (a ** (t - M))[:, None] * L_M + theta * weights @ stream[M:]
    err = float(np.max(np.abs(closed - ideal[M:])))
    ok = err <= 1e-9 and np.array_equal(ideal[M - 1], L_M)
    record(3, ok, f"theta={theta:.3f}: max |recursion - closed form| = {err:.2e} over 1000 rounds")
    assert ok


# -- 4: DRSR 1/t rate -----------------------------------------------------------


def test_drsr_inverse_t_rate():
    profile = build_stream_profile(4, 0, 10, [0, 1, 2], concentration=math.inf, beta=0.0, batch_size=100)
    assert profile.correlation.gamma == 0
    probes = np.unique(np.geomspace(10, 1000, 15).astype(int))
    res = monte_carlo_discrepancy(PolicyConfig("DRSR"), profile.regime_set, CacheConfig(1000, 100), 1000, probes, seed=4)
    slope, r2 = loglog_slope(res.probes, res.mean.sum(axis=1))
    ok = abs(slope + 1.0) <= 0.15
    record(4, ok, f"log-log slope {slope:.3f} (R^2 {r2:.4f}) over t in [10, 1000], target -1 +/- 0.15")
    assert ok


# -- 5, 6: default runs over 10 seeds -------------------------------------------


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("default")
    rc = cli.main(["simulate", "--out", str(out), "--seeds", SEEDS, "--policies", ",".join(ALL_POLICIES)])
    assert rc == 0
    return out


def test_discrepancy_ordering(default_runs):
    psi = {p: per_seed(default_runs, p, "psi") for p in ("DRSR", "SRSR", "FIFO")}
    checks = [("DRSR", "SRSR"), ("SRSR", "FIFO")]
    parts, ok = [], True
    for lo, hi in checks:
        d, se = gap(psi[hi], psi[lo])
        ok &= d > 2 * se
        parts.append(f"{lo}<{hi} gap {d:.2f} (2SE {2 * se:.2f})")
    means = ", ".join(f"{p} {np.mean(v):.2f}" for p, v in psi.items())
    record(5, ok, f"psi means {means}; " + "; ".join(parts))
    assert ok


def test_learning_ordering(default_runs):
    acc = {p: per_seed(default_runs, p, "final") for p in ALL_POLICIES}
    full_ok = np.mean(acc["FULL"]) >= np.mean(acc["DRSR"])
    parts, ok = [f"FULL>=DRSR {np.mean(acc['FULL']) - np.mean(acc['DRSR']):+.4f}"], full_ok
    for p in ("DRSR", "SRSR", "FIFO"):
        d, se = gap(acc[p], acc["LAZY"])
        ok &= d > 2 * se
        parts.append(f"{p}>LAZY gap {d:.4f} (2SE {2 * se:.4f})")
    means = ", ".join(f"{p} {np.mean(v):.4f}" for p, v in acc.items())
    record(6, ok, f"final accuracy {means}; " + "; ".join(parts))
    assert ok


# -- 7: capacity trend ----------------------------------------------------------


def test_capacity_trend(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"batch_size": 30}))
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(config), "--param", "B", "--values", "100,300", "--keep-ratio"]
    assert cli.main(args + ["--policies", "DRSR", "--seeds", SEEDS, "--out", str(out)]) == 0
    small = per_seed(out / "B_100", "DRSR", "final")
    large = per_seed(out / "B_300", "DRSR", "final")
    d, se = gap(large, small)
    ok = d > 0
    record(7, ok, f"final accuracy B=100 {np.mean(small):.4f}, B=300 {np.mean(large):.4f} (diff {d:+.4f}, pooled SE {se:.4f})")
    assert ok


# -- 8: theta trend -------------------------------------------------------------


def test_theta_trend(tmp_path):
    out = tmp_path / "sweep"
    args = ["sweep", "--param", "theta", "--values", "1/3,1", "--policies", "SRSR"]
    assert cli.main(args + ["--seeds", SEEDS, "--out", str(out)]) == 0
    low = per_seed(out / "theta_1-3", "SRSR", "late")
    high = per_seed(out / "theta_1", "SRSR", "late")
    d, se = gap(low, high)
    ok = d > 0
    record(8, ok, f"late-window accuracy theta=1/3 {np.mean(low):.4f}, theta=1 {np.mean(high):.4f} (diff {d:+.4f}, pooled SE {se:.4f})")
    assert ok


# -- 9: gradient ----------------------------------------------------------------


def test_gradient_finite_difference():
    dims = (16, 32, 10)
    task = SyntheticTask.build(substream(9, 0, "task"), 10, feature_dim=16, test_size=10)
    worst = 0.0
    for point in range(10):
        rng = substream(9, point, "fd")
        params = ModelParams.init(rng, dims)
        params = params.replace_flat(params.flat + rng.normal(0, 0.3, params.flat.size))
        y = rng.integers(0, 10, 64)
        X = sample_items(rng, task, y)
        g = gradient(params, X, y)
        for i in rng.choice(params.flat.size, 100, replace=False):
            h = 1e-5 * max(1.0, abs(params.flat[i]))
            e = np.zeros_like(params.flat)
            e[i] = h
            num = (forward_loss(params.replace_flat(params.flat + e), X, y) - forward_loss(params.replace_flat(params.flat - e), X, y)) / (2 * h)
            worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-7))
    ok = worst < 1e-4
    record(9, ok, f"max relative error {worst:.2e} over 100 coordinates x 10 points")
    assert ok


# -- 10: protocol collapse --------------------------------------------------------


def test_protocol_collapse():
    cfg = ExperimentConfig(K=1, E=1, eta=0.8, eta_L=0.15, T=4)
    state = init_state(cfg)
    collapse = 0.0
    for _ in range(cfg.T):
        w0 = state.global_params
        # the cache is refreshed before local training, so read it after the round
        run_round(state, cfg)
        cache = state.clients[0].cache
        expected = w0.flat - cfg.eta * cfg.eta_L * gradient(w0, cache.features, cache.labels)
        collapse = max(collapse, float(np.max(np.abs(state.global_params.flat - expected))))

    identity = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        dims = (8, 6, 5)
        params = ModelParams(rng.normal(0, 0.7, ModelParams.size_for(dims)), dims)
        X, y = rng.normal(size=(30, 8)), rng.integers(0, 5, 30)
        E, eta_L = int(rng.integers(1, 8)), float(rng.uniform(0.01, 0.5))
        final, delta = local_train(params, X, y, E, eta_L)
        w, gsum = params.flat.copy(), np.zeros_like(params.flat)
        for _ in range(E):
            g = gradient(params.replace_flat(w), X, y)
            gsum += g
            w = w - eta_L * g
        identity = max(identity, float(np.max(np.abs((final.flat - params.flat) / eta_L - delta))))
        identity = max(identity, float(np.max(np.abs(delta + gsum))))
    ok = collapse <= 1e-12 and identity <= 1e-10
    record(10, ok, f"K=1,E=1 vs centralised step {collapse:.1e}; delta identities {identity:.1e}")
    assert ok


# -- 11: determinism ----------------------------------------------------------------


def test_commands_are_deterministic(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"K": 3, "T": 6, "stream": {"calibration_rounds": 3000}, "model": {"test_size": 300}}))
    grid = tmp_path / "grid.csv"
    grid.write_text("policy,M,beta,theta,t_probe,n_trials\nSRSR,2,4,1/3,30,200\nDRSR,5,0,,60,200\n")
    commands = {
        "simulate": ["simulate", "--config", str(config), "--seeds", "2", "--policies", ",".join(ALL_POLICIES)],
        "bounds": ["bounds", "--config", str(config), "--grid", str(grid)],
        "sweep": ["sweep", "--config", str(config), "--seeds", "2", "--param", "theta", "--values", "1/3,1", "--policies", "SRSR"],
    }
    compared, mismatched = 0, []
    for name, args in commands.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b), "--workers", "2"]) == 0
        files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
        assert files == sorted(p.relative_to(b) for p in b.rglob("*.csv"))
        for rel in files:
            compared += 1
            if (a / rel).read_bytes() != (b / rel).read_bytes():
                mismatched.append(f"{name}/{rel}")
    ok = compared > 0 and not mismatched
    record(11, ok, f"{compared} CSV files byte-identical across repeated runs" if ok else f"differ: {mismatched}")
    assert ok

"""Command-line front end: ``simulate``, ``bounds`` and ``sweep``.

Every command writes CSVs plus a ``manifest.json`` into ``--out``. Exit status
is 0 only when every requested run finished and every output was written;
configuration problems exit with 2 before any work starts, failed runs with 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .cache import POLICIES, CacheConfig, PolicyConfig
from .config import ConfigError, ExperimentConfig, load_config
from .distributions import build_stream_profile
from .federation import TEST_PROTOCOL, build_client_profiles, client_support, fmt, run_experiment, write_rounds_csv
from .metrics import MIN_TRIALS, check_bounds

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

SUMMARY_METRICS = ("final_accuracy", "late_accuracy", "psi_total", "final_loss")
SUMMARY_COLUMNS = ("policy", "n_seeds") + tuple(f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std"))
GRID_COLUMNS = ("policy", "M", "beta", "theta", "t_probe", "n_trials")
BOUNDS_COLUMNS = ("policy", "M", "beta", "theta", "t", "gamma", "delta_sq", "mc_estimate", "std_err", "bound", "pass")
SWEEP_PARAMS = {"B": "capacity", "B_s": "batch_size", "theta": "theta"}


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _map(fn, jobs, workers: int):
    """Run ``fn(*job)`` for each job; yields ``(job, result, error_text)`` in job order."""
    if workers <= 1:
        for job in jobs:
            try:
                yield job, fn(*job), None
            except Exception:
                yield job, None, traceback.format_exc()
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [(job, pool.submit(fn, *job)) for job in jobs]
        for job, fut in futures:
            try:
                yield job, fut.result(), None
            except Exception:
                yield job, None, traceback.format_exc()


# -- simulate ---------------------------------------------------------------


def _run_seed(config_doc: dict, seed: int, policies: tuple[str, ...], out_dir: str) -> dict:
    config = ExperimentConfig.from_dict(config_doc).with_(seed=seed)
    profiles = build_client_profiles(config)
    runs = []
    manifest = None
    for policy in policies:
        log = run_experiment(config.with_(policy=policy), profiles)
        manifest = log.manifest
        name = f"rounds_{policy}_{seed}.csv"
        write_rounds_csv(Path(out_dir) / name, log.records)
        recs = log.records
        window = recs[-max(1, len(recs) // 10) :]
        runs.append(
            {
                "policy": policy,
                "file": name,
                "final_accuracy": recs[-1].accuracy,
                "late_accuracy": float(np.nanmean([r.accuracy for r in window])),
                "psi_total": float(sum(r.psi_t for r in recs)),
                "final_loss": recs[-1].loss,
            }
        )
    return {"seed": seed, "runs": runs, "clients": manifest["clients"] if manifest else []}


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else math.nan


def summary_rows(results: list[dict], policies) -> list[list[str]]:
    rows = []
    for policy in policies:
        runs = [r for res in results for r in res["runs"] if r["policy"] == policy]
        if not runs:
            continue
        row = [policy, str(len(runs))]
        for metric in SUMMARY_METRICS:
            row += [fmt(x) for x in _mean_std([r[metric] for r in runs])]
        rows.append(row)
    return rows


def simulate(config: ExperimentConfig, seeds, policies, out_dir: Path, workers: int, argv=None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    results, errors = [], []
    jobs = [(config.to_dict(), s, tuple(policies), str(out_dir)) for s in seeds]
    for job, res, err in _map(_run_seed, jobs, workers):
        if err is None:
            results.append(res)
        else:
            errors.append({"seed": job[1], "error": err})
            print(f"error: seed {job[1]} failed:\n{err}", file=sys.stderr)
    _write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary_rows(results, policies))
    outputs = sorted(r["file"] for res in results for r in res["runs"]) + ["summary.csv"]
    status = "complete" if not errors else "partial"
    _write_json(
        out_dir / "manifest.json",
        {
            "command": "simulate",
            "argv": list(argv) if argv is not None else None,
            "version": __version__,
            "config": config.to_dict(),
            "config_sha256": config.digest(),
            "seeds": list(seeds),
            "policies": list(policies),
            "test_protocol": TEST_PROTOCOL,
            "started_at": started,
            "finished_at": _now(),
            "status": status,
            "partial": bool(errors),
            "errors": errors,
            "outputs": [f for f in outputs if (out_dir / f).exists()],
            "clients_by_seed": {str(res["seed"]): res["clients"] for res in results},
        },
    )
    return EXIT_OK if not errors else EXIT_FAILED


# -- bounds -----------------------------------------------------------------


@dataclass(frozen=True)
class GridRow:
    policy: str
    M: int
    beta: float
    theta: float | None
    t_probe: int
    n_trials: int


def default_grid() -> list[GridRow]:
    rows = []
    for beta in (0.0, 4.0):
        for M in (2, 5, 10):
            for policy, theta in (("FIFO", None), ("SRSR", 1 / 3), ("SRSR", 2 / 3), ("DRSR", None)):
                for t in (50, 500):
                    rows.append(GridRow(policy, M, beta, theta, t, 2000))
    return rows


def _parse_number(text: str, kind):
    text = text.strip()
    if kind is int:
        value = int(text)
    else:
        value = float(Fraction(text))
    return value


def parse_grid(path: Path) -> list[GridRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in GRID_COLUMNS if c not in header]
        if header and missing:
            raise UsageError(f"{path}: grid header lacks columns {missing}")
        rows = []
        for rec in reader:
            line_no = reader.line_num
            try:
                if None in rec or any(rec[c] is None for c in GRID_COLUMNS):
                    raise ValueError("wrong number of fields")
                policy = rec["policy"].strip().upper()
                if policy not in POLICIES:
                    raise ValueError(f"unknown policy {rec['policy']!r}")
                theta_text = rec["theta"].strip()
                if policy == "SRSR" and not theta_text:
                    raise ValueError("SRSR needs theta")
                row = GridRow(
                    policy,
                    _parse_number(rec["M"], int),
                    _parse_number(rec["beta"], float),
                    _parse_number(theta_text, float) if theta_text else None,
                    _parse_number(rec["t_probe"], int),
                    _parse_number(rec["n_trials"], int),
                )
                if row.M < 2 or row.beta < 0 or row.t_probe < 1 or row.n_trials < MIN_TRIALS:
                    raise ValueError(f"need M >= 2, beta >= 0, t_probe >= 1, n_trials >= {MIN_TRIALS}")
                PolicyConfig(row.policy, row.theta if row.theta is not None else 2 / 3)
            except (ValueError, ZeroDivisionError) as exc:
                raise UsageError(f"{path}: grid row {line_no}: {exc}") from None
            rows.append(row)
    return rows


def _bound_cell(config_doc: dict, policy: str, M: int, beta: float, theta, probes, n_trials: int):
    config = ExperimentConfig.from_dict(config_doc)
    s = config.stream
    profile = build_stream_profile(
        config.seed,
        0,
        config.R,
        client_support(0, config.R, config.C),
        n_regimes=s.n_regimes,
        concentration=s.concentration,
        beta=beta,
        batch_size=config.batch_size,
        calibration_rounds=s.calibration_rounds,
        tau_max=s.tau_max,
        sampling=s.sampling,
    )
    pol = PolicyConfig(policy, theta if theta is not None else 2 / 3)
    cache = CacheConfig(M * config.batch_size, config.batch_size)
    return check_bounds(pol, profile, cache, n_trials, probes, seed=config.seed, sampling=s.sampling)


def bounds(config: ExperimentConfig, grid: list[GridRow], out_dir: Path, workers: int, argv=None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    groups: dict[tuple, list[int]] = {}
    for row in grid:
        groups.setdefault((row.policy, row.M, row.beta, row.theta, row.n_trials), []).append(row.t_probe)
    jobs = [
        (config.to_dict(), pol, M, beta, theta, sorted(set(ts)), n)
        for (pol, M, beta, theta, n), ts in groups.items()
    ]
    checks, errors = {}, []
    for job, res, err in _map(_bound_cell, jobs, workers):
        key = (job[1], job[2], job[3], job[4], job[6])
        if err is None:
            for chk in res:
                checks[key + (chk.t,)] = chk
        else:
            errors.append({"cell": list(key), "error": err})
            print(f"error: cell {key} failed:\n{err}", file=sys.stderr)
    out_rows = []
    for row in grid:
        chk = checks.get((row.policy, row.M, row.beta, row.theta, row.n_trials, row.t_probe))
        if chk is None:
            continue
        out_rows.append(
            [
                row.policy,
                str(row.M),
                fmt(row.beta),
                "" if row.theta is None else fmt(row.theta),
                str(chk.t),
                str(chk.gamma),
                fmt(chk.delta_sq),
                fmt(chk.mc_estimate),
                fmt(chk.std_err),
                fmt(chk.bound),
                "PASS" if chk.passed else "FAIL",
            ]
        )
    _write_csv(out_dir / "bounds.csv", BOUNDS_COLUMNS, out_rows)
    _write_json(
        out_dir / "manifest.json",
        {
            "command": "bounds",
            "argv": list(argv) if argv is not None else None,
            "version": __version__,
            "config": config.to_dict(),
            "config_sha256": config.digest(),
            "grid_rows": len(grid),
            "started_at": started,
            "finished_at": _now(),
            "status": "complete" if not errors else "partial",
            "partial": bool(errors),
            "errors": errors,
            "outputs": ["bounds.csv"],
            "all_pass": all(r[-1] == "PASS" for r in out_rows),
        },
    )
    return EXIT_OK if not errors else EXIT_FAILED


# -- sweep ------------------------------------------------------------------


def sweep_configs(config: ExperimentConfig, param: str, values: list[str], keep_ratio: bool) -> list[ExperimentConfig]:
    """Validate every sweep point up front; raises :class:`ConfigError` naming the bad value."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"--param must be one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    out = []
    for text in values:
        try:
            value = _parse_number(text, float if param == "theta" else int)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{param}={text!r}: not a valid number") from None
        if param == "theta" and not 0.0 < value <= 1.0:
            raise ConfigError(f"theta={text}: must lie in (0, 1]")
        changes = {SWEEP_PARAMS[param]: value}
        if keep_ratio and param == "B":
            scaled = Fraction(value * config.batch_size, config.capacity)
            if scaled.denominator != 1:
                raise ConfigError(f"B={text}: B * B_s / B_default = {float(scaled)} is not an integer batch size")
            changes["batch_size"] = int(scaled)
        elif keep_ratio and param == "B_s":
            changes["capacity"] = value * config.cache.M
        try:
            out.append(config.with_(**changes))
        except ConfigError as exc:
            raise ConfigError(f"{param}={text}: {exc}") from None
    return out


def sweep(config, param, values, keep_ratio, seeds, policies, out_dir: Path, workers: int, argv=None) -> int:
    configs = sweep_configs(config, param, values, keep_ratio)
    if param == "theta" and "SRSR" not in policies:
        raise ConfigError("a theta sweep needs SRSR among --policies")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    merged, subdirs, status = [], [], EXIT_OK
    for text, cfg in zip(values, configs):
        sub = out_dir / f"{param}_{text.replace('/', '-')}"
        status = max(status, simulate(cfg, seeds, policies, sub, workers, argv))
        with open(sub / "summary.csv", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                merged.append([param, text, fmt(cfg._get(SWEEP_PARAMS[param])), str(cfg.capacity), str(cfg.batch_size)] + row)
        subdirs.append(sub.name)
    _write_csv(out_dir / "sweep.csv", ("param", "value", "numeric_value", "B", "B_s") + SUMMARY_COLUMNS, merged)
    _write_json(
        out_dir / "manifest.json",
        {
            "command": "sweep",
            "argv": list(argv) if argv is not None else None,
            "version": __version__,
            "config": config.to_dict(),
            "config_sha256": config.digest(),
            "param": param,
            "values": list(values),
            "keep_ratio": keep_ratio,
            "seeds": list(seeds),
            "policies": list(policies),
            "started_at": started,
            "finished_at": _now(),
            "status": "complete" if status == EXIT_OK else "partial",
            "partial": status != EXIT_OK,
            "outputs": ["sweep.csv"] + [f"{d}/manifest.json" for d in subdirs],
        },
    )
    return status


# -- argument handling ------------------------------------------------------


def _seeds(args, config: ExperimentConfig) -> list[int]:
    if args.seed_list is not None:
        try:
            seeds = [int(s) for s in args.seed_list.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seed-list: expected comma-separated integers, got {args.seed_list!r}") from None
        if not seeds or any(s < 0 for s in seeds):
            raise ConfigError("--seed-list: need at least one non-negative seed")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("--seed-list: duplicate seeds")
        return seeds
    n = 10 if args.seeds is None else args.seeds
    if n < 1:
        raise ConfigError(f"--seeds: must be >= 1, got {n}")
    return list(range(config.seed, config.seed + n))


def _policies(args, config: ExperimentConfig) -> list[str]:
    if args.policies is None:
        return [config.policy_config.kind]
    out = []
    for p in args.policies.split(","):
        try:
            kind = PolicyConfig(p.strip(), config.theta).kind
        except ValueError as exc:
            raise ConfigError(f"--policies: {exc}") from None
        if kind not in out:
            out.append(kind)
    return out


def _config(path) -> ExperimentConfig:
    return ExperimentConfig() if path is None else load_config(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamfl", description="Streaming federated learning cache simulator.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
        if seeds:
            g = p.add_mutually_exclusive_group()
            g.add_argument("--seeds", type=int, help="number of consecutive seeds from the config seed (default 10)")
            g.add_argument("--seed-list", help="explicit comma-separated seeds")
            p.add_argument("--policies", help="comma-separated policies (default: the config policy)")

    common(sub.add_parser("simulate", help="run experiments over seeds and policies"))
    b = sub.add_parser("bounds", help="Monte-Carlo check of the discrepancy bounds")
    common(b, seeds=False)
    b.add_argument("--grid", default="default", help="grid CSV path or 'default'")
    s = sub.add_parser("sweep", help="simulate over values of B, B_s or theta")
    common(s)
    s.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    s.add_argument("--values", required=True, help="comma-separated values (theta accepts fractions like 1/3)")
    s.add_argument("--keep-ratio", action="store_true", help="scale the other of B/B_s to keep B_s/B fixed")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError(f"--workers: must be >= 1, got {args.workers}")
        config = _config(args.config)
        out = Path(args.out)
        if args.command == "simulate":
            return simulate(config, _seeds(args, config), _policies(args, config), out, args.workers, argv)
        if args.command == "bounds":
            grid = default_grid() if args.grid == "default" else parse_grid(Path(args.grid))
            return bounds(config, grid, out, args.workers, argv)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("--values: need at least one value")
        return sweep(
            config, args.param, values, args.keep_ratio, _seeds(args, config), _policies(args, config), out, args.workers, argv
        )
    except (ConfigError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command line experiment harness.

Subcommands::

    cyberdo solve         --config desk.ini [--seed N] [--out DIR]
    cyberdo ablate        --param {alpha,khop} --values 1,5,50 [...]
    cyberdo scale         --devices 10,100,1000 [...]
    cyberdo verify-theory [--instances N] [...]

Every command echoes its fully resolved configuration into the output
directory and streams CSV logs with a flush per row, so partial results
survive interruption.  ``--parallel N`` runs independent configurations
(sweep points, seeds) in separate processes.

CSV schemas
-----------
``iterations.csv`` (solve): iteration, value, value_per_device,
defender_policies, attacker_policies, def_improvement, att_improvement,
eps_stop, wall_ms, cache_hits, cache_misses.  One row per outer-loop
iteration; ``value`` is the restricted-game defender value when the
iteration started.

``result.csv`` (solve): value, value_per_device, iterations, converged,
defender_policies, attacker_policies, payoff_wall_ms, total_wall_ms,
peak_memory_kb.  Final equilibrium summary.

``mixtures.csv`` (solve): side, index, name, probability.

``sweep.csv`` (ablate): param, value, seeds, utility_mean, utility_stderr,
iterations_mean, payoff_wall_ms_mean, total_wall_ms_mean, peak_memory_kb.
``utility`` is the final equilibrium defender value per device.

``scale.csv`` (scale): device_count, k, greedy_k, evals_bound,
decode_calls, critic_evals_mean, critic_evals_max, decode_ms_mean,
decode_ms_max, bound_ok, peak_memory_kb.

``theory.csv`` (verify-theory): one row per random MDP instance with the
measured bound sides; ``verify-theory`` exits non-zero if any instance
violates either bound.

Wall-time and memory columns are measurements and naturally vary between
runs; every other column is deterministic given the configuration.
"""

from __future__ import annotations

import argparse
import csv
import os
import resource
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace

import numpy as np

from . import br, game, theory
from .config import ConfigError, RunConfig, load_config, save_config
from .env import ATTACKER, DEFENDER, observe, reset, step
from .meta import MetaController, compute_k

ITERATION_COLUMNS = ["iteration", "value", "value_per_device",
                     "defender_policies", "attacker_policies",
                     "def_improvement", "att_improvement", "eps_stop",
                     "wall_ms", "cache_hits", "cache_misses"]
RESULT_COLUMNS = ["value", "value_per_device", "iterations", "converged",
                  "defender_policies", "attacker_policies", "payoff_wall_ms",
                  "total_wall_ms", "peak_memory_kb"]
SWEEP_COLUMNS = ["param", "value", "seeds", "utility_mean", "utility_stderr",
                 "iterations_mean", "payoff_wall_ms_mean",
                 "total_wall_ms_mean", "peak_memory_kb"]
SCALE_COLUMNS = ["device_count", "k", "greedy_k", "evals_bound",
                 "decode_calls", "critic_evals_mean", "critic_evals_max",
                 "decode_ms_mean", "decode_ms_max", "bound_ok",
                 "peak_memory_kb"]

ABLATE_PARAMS = ("alpha", "khop")
SCALE_DECODE_CALLS = 200


def peak_memory_kb() -> int:
    """Process-level peak resident set size in kB (a proxy, not a per-run
    measurement: it is monotone over the process lifetime)."""
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


class _CsvLog:
    """CSV writer that flushes after every row."""

    def __init__(self, path, columns):
        self.columns = columns
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(columns)
        self._fh.flush()

    def write(self, row: dict):
        self._writer.writerow([row[c] for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()


def run_solve(run_cfg: RunConfig, seed_offset: int = 0,
              on_iteration=None) -> game.DoubleOracleResult:
    """One double-oracle run; ``seed_offset`` shifts both the environment
    seed (topology, initial compromise, events) and the learning seed."""
    env_cfg = replace(run_cfg.env, seed=run_cfg.env.seed + seed_offset)
    return game.run_double_oracle(env_cfg, run_cfg.br, run_cfg.meta,
                                  run_cfg.cache, run_cfg.do,
                                  seed=run_cfg.seed + seed_offset,
                                  on_iteration=on_iteration)


def _record_row(record: game.IterationRecord) -> dict:
    return {"iteration": record.iteration, "value": record.value,
            "value_per_device": record.value_per_device,
            "defender_policies": record.n_defender,
            "attacker_policies": record.n_attacker,
            "def_improvement": record.def_improvement,
            "att_improvement": record.att_improvement,
            "eps_stop": record.eps_stop, "wall_ms": record.wall_ms,
            "cache_hits": record.cache_hits,
            "cache_misses": record.cache_misses}


def solve_into(run_cfg: RunConfig, out_dir: str,
               seed_offset: int = 0) -> game.DoubleOracleResult:
    """Run one solve and write the full artifact set into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    save_config(run_cfg, os.path.join(out_dir, "config.ini"))
    log = _CsvLog(os.path.join(out_dir, "iterations.csv"), ITERATION_COLUMNS)
    start = time.perf_counter()
    try:
        result = run_solve(run_cfg, seed_offset,
                           on_iteration=lambda rec: log.write(_record_row(rec)))
    finally:
        log.close()
    total_ms = (time.perf_counter() - start) * 1e3

    summary = _CsvLog(os.path.join(out_dir, "result.csv"), RESULT_COLUMNS)
    summary.write({"value": result.value,
                   "value_per_device": result.value_per_device,
                   "iterations": result.iterations,
                   "converged": result.converged,
                   "defender_policies": len(result.defender_policies),
                   "attacker_policies": len(result.attacker_policies),
                   "payoff_wall_ms": result.payoff_wall_ms,
                   "total_wall_ms": total_ms,
                   "peak_memory_kb": peak_memory_kb()})
    summary.close()

    mixtures = _CsvLog(os.path.join(out_dir, "mixtures.csv"),
                       ["side", "index", "name", "probability"])
    for side, policies, probs in (
            ("defender", result.defender_policies, result.defender_mixture),
            ("attacker", result.attacker_policies, result.attacker_mixture)):
        for idx, (policy, prob) in enumerate(zip(policies, probs)):
            mixtures.write({"side": side, "index": idx, "name": policy.name,
                            "probability": float(prob)})
    mixtures.close()

    ckpt_dir = os.path.join(out_dir, "policies")
    os.makedirs(ckpt_dir, exist_ok=True)
    for policies, probs in ((result.defender_policies,
                             result.defender_mixture),
                            (result.attacker_policies,
                             result.attacker_mixture)):
        for policy, prob in zip(policies, probs):
            if prob > 0.0:
                br.save_policy(policy, os.path.join(ckpt_dir,
                                                    f"{policy.name}.ckpt"))
    return result


def cmd_solve(run_cfg: RunConfig, out_dir: str, parallel: int = 1) -> int:
    result = solve_into(run_cfg, out_dir)
    print(f"solve: value={result.value:.6f} "
          f"value_per_device={result.value_per_device:.6f} "
          f"iterations={result.iterations} converged={result.converged}")
    return 0


def _sweep_overrides(run_cfg: RunConfig, param: str, value: int) -> RunConfig:
    if param == "alpha":
        return replace(run_cfg, meta=replace(run_cfg.meta, alpha=value))
    if param == "khop":
        return replace(run_cfg, cache=replace(run_cfg.cache, khop_radius=value))
    raise ConfigError(f"unknown ablation parameter {param!r}; "
                      f"choose from {ABLATE_PARAMS}")


def _ablate_task(args):
    run_cfg, param, value, seed_offset, out_dir = args
    start = time.perf_counter()
    result = solve_into(_sweep_overrides(run_cfg, param, value), out_dir,
                        seed_offset=seed_offset)
    return {"param": param, "value": value, "seed_offset": seed_offset,
            "utility": result.value_per_device,
            "iterations": result.iterations,
            "payoff_wall_ms": result.payoff_wall_ms,
            "total_wall_ms": (time.perf_counter() - start) * 1e3}


def cmd_ablate(run_cfg: RunConfig, param: str, values, out_dir: str,
               parallel: int = 1) -> int:
    os.makedirs(out_dir, exist_ok=True)
    save_config(run_cfg, os.path.join(out_dir, "config.ini"))
    tasks = [(run_cfg, param, value, offset,
              os.path.join(out_dir, f"{param}_{value}", f"seed_{offset}"))
             for value in values for offset in range(run_cfg.seeds)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_ablate_task, tasks))
    else:
        rows = [_ablate_task(task) for task in tasks]

    log = _CsvLog(os.path.join(out_dir, "sweep.csv"), SWEEP_COLUMNS)
    for value in values:
        picked = [r for r in rows if r["value"] == value]
        utils = np.array([r["utility"] for r in picked])
        stderr = (float(utils.std(ddof=1) / np.sqrt(len(utils)))
                  if len(utils) > 1 else 0.0)
        log.write({"param": param, "value": value, "seeds": len(picked),
                   "utility_mean": float(utils.mean()),
                   "utility_stderr": stderr,
                   "iterations_mean": float(np.mean(
                       [r["iterations"] for r in picked])),
                   "payoff_wall_ms_mean": float(np.mean(
                       [r["payoff_wall_ms"] for r in picked])),
                   "total_wall_ms_mean": float(np.mean(
                       [r["total_wall_ms"] for r in picked])),
                   "peak_memory_kb": peak_memory_kb()})
        print(f"ablate {param}={value}: utility_mean={utils.mean():.6f} "
              f"stderr={stderr:.6f}")
    log.close()
    return 0


def _scale_task(args):
    run_cfg, device_count, calls = args
    env_cfg = replace(run_cfg.env, device_count=device_count,
                      num_attacker_owned=None, max_network_size=None)
    policy = br.make_policy(env_cfg, run_cfg.br, DEFENDER,
                            seed=run_cfg.seed, name=f"scale_{device_count}")
    controller = MetaController(DEFENDER, device_count,
                                alpha=run_cfg.meta.alpha,
                                seed=run_cfg.seed + 1)
    cache = (run_cfg.cache.build(seed=run_cfg.seed + 2)
             if run_cfg.cache.enabled else None)
    opponent = br.noop_policy(env_cfg, ATTACKER)
    k = compute_k(device_count, run_cfg.meta.alpha)
    bound = k * run_cfg.br.greedy_k

    state = reset(env_cfg)
    obs = observe(state, DEFENDER)
    evals, times = [], []
    for _ in range(calls):
        if state.step >= env_cfg.steps_per_episode:
            state = reset(env_cfg)
            controller.mark_dirty(range(device_count))
            obs = observe(state, DEFENDER)
        tick = time.perf_counter()
        allowed = controller.select(state, obs)
        atoms = br.act(policy, state, obs, allowed, cache=cache,
                       explore=False, meta=controller)
        times.append((time.perf_counter() - tick) * 1e3)
        evals.append(policy.last_decode_evals)
        opp_atoms = br.act(opponent, state,
                           observe(state, ATTACKER), [], explore=False)
        state, _, _ = step(state, opp_atoms, atoms)
        controller.mark_dirty(state.last_changed)
        if cache is not None:
            cache.invalidate_khop(state.last_changed, state.adjacency)
        obs = observe(state, DEFENDER)

    evals = np.array(evals)
    times = np.array(times)
    return {"device_count": device_count, "k": k,
            "greedy_k": run_cfg.br.greedy_k, "evals_bound": bound,
            "decode_calls": calls,
            "critic_evals_mean": float(evals.mean()),
            "critic_evals_max": int(evals.max()),
            "decode_ms_mean": float(times.mean()),
            "decode_ms_max": float(times.max()),
            "bound_ok": bool(evals.max() <= bound)}


def cmd_scale(run_cfg: RunConfig, devices, out_dir: str,
              parallel: int = 1) -> int:
    os.makedirs(out_dir, exist_ok=True)
    save_config(run_cfg, os.path.join(out_dir, "config.ini"))
    tasks = [(run_cfg, int(m), SCALE_DECODE_CALLS) for m in devices]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_scale_task, tasks))
    else:
        rows = [_scale_task(task) for task in tasks]

    log = _CsvLog(os.path.join(out_dir, "scale.csv"), SCALE_COLUMNS)
    all_ok = True
    for row in rows:
        row["peak_memory_kb"] = peak_memory_kb()
        log.write(row)
        all_ok = all_ok and row["bound_ok"]
        print(f"scale M={row['device_count']}: k={row['k']} "
              f"evals_max={row['critic_evals_max']} bound={row['evals_bound']} "
              f"decode_ms_mean={row['decode_ms_mean']:.3f}")
    log.close()
    if not all_ok:
        print("scale: critic evaluation bound violated", file=sys.stderr)
        return 1
    return 0


def cmd_verify_theory(run_cfg: RunConfig, out_dir: str,
                      instances: int = 200, tol: float = 1e-8) -> int:
    os.makedirs(out_dir, exist_ok=True)
    save_config(run_cfg, os.path.join(out_dir, "config.ini"))
    report = theory.run_campaign(n_instances=instances, seed=run_cfg.seed,
                                 tol=tol)
    columns = [f.name for f in fields(theory.CampaignRow)]
    log = _CsvLog(os.path.join(out_dir, "theory.csv"), columns)
    for row in report.rows:
        log.write({c: getattr(row, c) for c in columns})
    log.close()
    print(f"verify-theory: {len(report.rows)} instances, "
          f"{report.violations} violations")
    return 0 if report.all_hold else 1


def _int_list(raw: str):
    try:
        return [int(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, "
                                         f"got {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyberdo",
        description="Double-oracle equilibrium experiments on desk-scale "
                    "attacker/defender network games.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="INI configuration file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured base seed")
        p.add_argument("--out", default=None,
                       help="output directory (default from config)")
        p.add_argument("--parallel", type=int, default=1,
                       help="processes for independent configurations")

    p = sub.add_parser("solve", help="run the double oracle to equilibrium")
    common(p)

    p = sub.add_parser("ablate", help="sweep one pruning/cache parameter")
    common(p)
    p.add_argument("--param", required=True, choices=ABLATE_PARAMS)
    p.add_argument("--values", required=True, type=_int_list,
                   help="comma-separated values, e.g. 1,5,50")

    p = sub.add_parser("scale", help="measure decode cost across device counts")
    common(p)
    p.add_argument("--devices", required=True, type=_int_list,
                   help="comma-separated device counts, e.g. 10,100,1000")

    p = sub.add_parser("verify-theory",
                       help="check the pruning bound on random MDPs")
    common(p)
    p.add_argument("--instances", type=int, default=200)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_cfg = load_config(args.config)
        if args.seed is not None:
            run_cfg.seed = args.seed
        out_dir = args.out if args.out is not None else run_cfg.out_dir
        if args.command == "solve":
            return cmd_solve(run_cfg, out_dir, parallel=args.parallel)
        if args.command == "ablate":
            return cmd_ablate(run_cfg, args.param, args.values, out_dir,
                              parallel=args.parallel)
        if args.command == "scale":
            return cmd_scale(run_cfg, args.devices, out_dir,
                             parallel=args.parallel)
        if args.command == "verify-theory":
            return cmd_verify_theory(run_cfg, out_dir,
                                     instances=args.instances)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Double oracle over learned best responses.

The outer loop keeps finite restricted strategy sets for both sides, a
Monte Carlo payoff matrix of mean discounted defender utilities, and the
exact Nash equilibrium of the restricted zero-sum game (solved as a pair
of linear programs).  Each iteration trains one approximate best response
per side against the opponent's current equilibrium mixture, extends the
matrix, and stops once neither best response improves on the restricted
value by more than ``eps_stop`` and the restricted value itself has moved
by less than ``eps_stop`` across the last three iterations (all after a
minimum number of iterations).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

from .br import (BrConfig, CacheConfig, MetaConfig, Mixture, Policy,
                 act, allowed_devices, make_policy, train_best_response)
from .env import ATTACKER, DEFENDER, EnvConfig, observe, reset, step
from .meta import MetaController


def rollout_value(defender: Policy, attacker: Policy, env_config: EnvConfig,
                  defender_cache=None, attacker_cache=None) -> float:
    """Discounted defender utility of one episode with both policies in
    exploit mode (no exploration)."""
    state = reset(env_config)
    gamma = env_config.discount
    weight = 1.0
    total = 0.0
    done = False
    while not done:
        d_obs = observe(state, DEFENDER)
        a_obs = observe(state, ATTACKER)
        d_atoms = act(defender, state, d_obs,
                      allowed_devices(defender, state, d_obs),
                      cache=defender_cache, explore=False)
        a_atoms = act(attacker, state, a_obs,
                      allowed_devices(attacker, state, a_obs),
                      cache=attacker_cache, explore=False)
        state, reward, done = step(state, a_atoms, d_atoms)
        total += weight * (-reward)
        weight *= gamma
        for cache in (defender_cache, attacker_cache):
            if cache is not None:
                cache.invalidate_khop(state.last_changed, state.adjacency)
    return total


def estimate_payoff(defender: Policy, attacker: Policy, env_config: EnvConfig,
                    episodes: int = 8, seed: int = 0,
                    cache_config: CacheConfig | None = None,
                    stats_out: dict | None = None):
    """Mean discounted defender utility over ``episodes`` seeded rollouts.

    The topology stays fixed at ``env_config.seed``; episodes differ only
    in their dynamics seed (initial compromise, workloads, events), all
    derived deterministically from ``seed``.  Re-running a cell with its
    logged seed therefore reproduces the stored value exactly, and two
    cells estimated with the same seed share episode dynamics, so their
    difference reflects the policies rather than sampling luck.  Each pair
    gets fresh empty caches shared across its episodes (when caching is
    enabled).  Returns ``(mean, stderr)``.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    cache_config = cache_config if cache_config is not None else CacheConfig()
    seq = np.random.SeedSequence(seed)
    episode_seeds = seq.generate_state(episodes + 2, dtype=np.uint32)
    d_cache = a_cache = None
    if cache_config.enabled:
        if defender.baseline is None:
            d_cache = cache_config.build(seed=int(episode_seeds[episodes]))
        if attacker.baseline is None:
            a_cache = cache_config.build(seed=int(episode_seeds[episodes + 1]))
    values = np.empty(episodes)
    for e in range(episodes):
        cfg = replace(env_config, dynamics_seed=int(episode_seeds[e]))
        values[e] = rollout_value(defender, attacker, cfg,
                                  defender_cache=d_cache,
                                  attacker_cache=a_cache)
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    if stats_out is not None:
        for cache in (d_cache, a_cache):
            if cache is not None:
                for key, val in cache.stats.as_dict().items():
                    stats_out[key] = stats_out.get(key, 0) + val
    return mean, stderr


@dataclass
class PayoffMatrix:
    """Defender-utility matrix over the restricted strategy sets, with the
    per-cell standard errors and estimation seeds needed to reproduce any
    cell."""

    values: np.ndarray
    stderrs: np.ndarray
    seeds: np.ndarray

    @classmethod
    def single(cls, value: float, stderr: float, seed: int) -> "PayoffMatrix":
        return cls(values=np.array([[value]]), stderrs=np.array([[stderr]]),
                   seeds=np.array([[seed]], dtype=np.int64))

    @property
    def n_defender(self) -> int:
        return self.values.shape[0]

    @property
    def n_attacker(self) -> int:
        return self.values.shape[1]

    def add_row(self, values, stderrs, seeds):
        self.values = np.vstack([self.values, np.asarray(values)[None, :]])
        self.stderrs = np.vstack([self.stderrs, np.asarray(stderrs)[None, :]])
        self.seeds = np.vstack(
            [self.seeds, np.asarray(seeds, dtype=np.int64)[None, :]])

    def add_col(self, values, stderrs, seeds):
        self.values = np.hstack([self.values, np.asarray(values)[:, None]])
        self.stderrs = np.hstack([self.stderrs, np.asarray(stderrs)[:, None]])
        self.seeds = np.hstack(
            [self.seeds, np.asarray(seeds, dtype=np.int64)[:, None]])


class SolverError(RuntimeError):
    """Raised when the restricted game cannot be solved to tolerance."""


def solve_restricted(values: np.ndarray, tol: float = 1e-6):
    """Exact Nash equilibrium of the zero-sum matrix game ``values``
    (defender = row maximizer).  Returns ``(x, y, value)``.

    Solved as two linear programs (one per player); the solution is
    checked for probability-simplex membership, matching game values, and
    exploitability at most ``tol`` before being returned.
    """
    u = np.asarray(values, dtype=np.float64)
    if u.ndim != 2 or u.size == 0:
        raise ValueError(f"payoff matrix must be 2-D and non-empty, got shape "
                         f"{u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("payoff matrix contains non-finite entries")
    n_def, n_att = u.shape

    # Row player: max v subject to x^T U[:, j] >= v for all j.
    c = np.zeros(n_def + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-u.T, np.ones((n_att, 1))])
    res_x = linprog(c, A_ub=a_ub, b_ub=np.zeros(n_att),
                    A_eq=np.concatenate([np.ones(n_def), [0.0]])[None, :],
                    b_eq=[1.0],
                    bounds=[(0.0, None)] * n_def + [(None, None)],
                    method="highs")
    if not res_x.success:
        raise SolverError(f"row LP failed: {res_x.message}")
    x = np.clip(res_x.x[:n_def], 0.0, None)
    x = x / x.sum()
    value_row = float(res_x.x[-1])

    # Column player: min w subject to U[i, :] y <= w for all i.
    c = np.zeros(n_att + 1)
    c[-1] = 1.0
    a_ub = np.hstack([u, -np.ones((n_def, 1))])
    res_y = linprog(c, A_ub=a_ub, b_ub=np.zeros(n_def),
                    A_eq=np.concatenate([np.ones(n_att), [0.0]])[None, :],
                    b_eq=[1.0],
                    bounds=[(0.0, None)] * n_att + [(None, None)],
                    method="highs")
    if not res_y.success:
        raise SolverError(f"column LP failed: {res_y.message}")
    y = np.clip(res_y.x[:n_att], 0.0, None)
    y = y / y.sum()
    value_col = float(res_y.x[-1])

    if abs(value_row - value_col) > tol:
        raise SolverError(f"LP values disagree: {value_row} vs {value_col}")
    value = 0.5 * (value_row + value_col)
    ex_def, ex_att = exploitability(u, x, y, value)
    if max(ex_def, ex_att) > tol:
        raise SolverError(f"equilibrium exploitable: defender {ex_def}, "
                          f"attacker {ex_att}")
    return x, y, value


def exploitability(values: np.ndarray, x: np.ndarray, y: np.ndarray,
                   value: float):
    """Best pure-deviation gains inside the matrix: how much the defender
    (resp. attacker) could gain by deviating from ``x`` (resp. ``y``)."""
    u = np.asarray(values, dtype=np.float64)
    gain_def = float(np.max(u @ y) - value)
    gain_att = float(value - np.min(x @ u))
    return max(gain_def, 0.0), max(gain_att, 0.0)


@dataclass
class DoConfig:
    """Outer-loop knobs.  ``eps_stop = eps_stop_rel * |value| + eps_stop_abs``."""

    min_iterations: int = 10
    max_iterations: int = 15
    episodes_per_cell: int = 8
    eps_stop_rel: float = 0.01
    eps_stop_abs: float = 1e-3
    solver_tol: float = 1e-6

    def validate(self):
        if self.min_iterations < 1:
            raise ValueError("min_iterations must be >= 1")
        if self.max_iterations < self.min_iterations:
            raise ValueError(f"max_iterations {self.max_iterations} below "
                             f"min_iterations {self.min_iterations}")
        if self.episodes_per_cell < 1:
            raise ValueError("episodes_per_cell must be >= 1")
        if self.eps_stop_rel < 0 or self.eps_stop_abs < 0:
            raise ValueError("eps_stop terms must be >= 0")

    def eps_stop(self, value: float) -> float:
        return self.eps_stop_rel * abs(value) + self.eps_stop_abs


@dataclass
class IterationRecord:
    iteration: int
    value: float
    value_per_device: float
    n_defender: int
    n_attacker: int
    def_improvement: float
    att_improvement: float
    eps_stop: float
    wall_ms: float
    cache_hits: int
    cache_misses: int


@dataclass
class DoubleOracleResult:
    defender_policies: list
    attacker_policies: list
    payoff: PayoffMatrix
    defender_mixture: np.ndarray
    attacker_mixture: np.ndarray
    value: float
    records: list = field(default_factory=list)
    converged: bool = False
    payoff_wall_ms: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def value_per_device(self) -> float:
        policies = self.defender_policies or self.attacker_policies
        m = policies[0].env_config.device_count
        return self.value / m


def run_double_oracle(env_config: EnvConfig,
                      br_config: BrConfig | None = None,
                      meta_config: MetaConfig | None = None,
                      cache_config: CacheConfig | None = None,
                      do_config: DoConfig | None = None,
                      seed: int = 0,
                      on_iteration=None) -> DoubleOracleResult:
    """Run the full outer loop from random initial policies.

    ``on_iteration`` (if given) receives each :class:`IterationRecord` as
    soon as it exists, which the CLI uses to stream the iteration log.
    """
    br_config = br_config if br_config is not None else BrConfig()
    meta_config = meta_config if meta_config is not None else MetaConfig()
    cache_config = cache_config if cache_config is not None else CacheConfig()
    do_config = do_config if do_config is not None else DoConfig()
    do_config.validate()

    seq = np.random.SeedSequence(seed)
    seeds = seq.generate_state(6 + 4 * do_config.max_iterations,
                               dtype=np.uint32)
    next_seed = iter(int(s) for s in seeds)

    def initial_policy(role: str, name: str) -> Policy:
        policy = make_policy(env_config, br_config, role,
                             seed=next(next_seed), name=name)
        if meta_config.enabled:
            # With pruning on, the whole restricted game is played under
            # it, so the seed policies carry (untrained) controllers too;
            # otherwise they would decode over every device and the two
            # arms' strategy spaces would not be comparable.
            policy.meta = MetaController(
                role=role, device_count=env_config.device_count,
                alpha=meta_config.alpha, seed=next(next_seed),
                lr=meta_config.lr, tau=meta_config.tau,
                max_grad_norm=br_config.max_grad_norm,
                replay_capacity=meta_config.replay_capacity)
        return policy

    defender_policies = [initial_policy(DEFENDER, "defender_0")]
    attacker_policies = [initial_policy(ATTACKER, "attacker_0")]
    # One estimation seed shared by every payoff cell: all cells then see the
    # same episode dynamics, so value differences between cells come from the
    # policies alone and restricted values stay stable between iterations.
    cell_seed = next(next_seed)
    tick = time.perf_counter()
    mean, stderr = estimate_payoff(defender_policies[0], attacker_policies[0],
                                   env_config, do_config.episodes_per_cell,
                                   seed=cell_seed, cache_config=cache_config)
    payoff_wall_ms = (time.perf_counter() - tick) * 1e3
    payoff = PayoffMatrix.single(mean, stderr, cell_seed)

    result = DoubleOracleResult(defender_policies=defender_policies,
                                attacker_policies=attacker_policies,
                                payoff=payoff,
                                defender_mixture=np.array([1.0]),
                                attacker_mixture=np.array([1.0]),
                                value=mean)

    for iteration in range(1, do_config.max_iterations + 1):
        tick = time.perf_counter()
        x, y, value = solve_restricted(payoff.values, tol=do_config.solver_tol)
        n_def, n_att = payoff.values.shape
        stats: dict = {}

        br_def = train_best_response(
            env_config, br_config, DEFENDER,
            Mixture(list(attacker_policies), y), seed=next(next_seed),
            meta_config=meta_config, cache_config=cache_config,
            name=f"defender_{iteration}")
        br_att = train_best_response(
            env_config, br_config, ATTACKER,
            Mixture(list(defender_policies), x), seed=next(next_seed),
            meta_config=meta_config, cache_config=cache_config,
            name=f"attacker_{iteration}")

        payoff_tick = time.perf_counter()
        row_vals, row_errs, row_seeds = [], [], []
        for att in attacker_policies:
            mean, stderr = estimate_payoff(
                br_def.policy, att, env_config, do_config.episodes_per_cell,
                seed=cell_seed, cache_config=cache_config, stats_out=stats)
            row_vals.append(mean)
            row_errs.append(stderr)
            row_seeds.append(cell_seed)
        col_vals, col_errs, col_seeds = [], [], []
        for deff in defender_policies + [br_def.policy]:
            mean, stderr = estimate_payoff(
                deff, br_att.policy, env_config, do_config.episodes_per_cell,
                seed=cell_seed, cache_config=cache_config, stats_out=stats)
            col_vals.append(mean)
            col_errs.append(stderr)
            col_seeds.append(cell_seed)
        payoff_wall_ms += (time.perf_counter() - payoff_tick) * 1e3

        def_improvement = float(np.asarray(row_vals) @ y - value)
        att_improvement = float(value - x @ np.asarray(col_vals[:n_def]))

        defender_policies.append(br_def.policy)
        attacker_policies.append(br_att.policy)
        payoff.add_row(row_vals, row_errs, row_seeds)
        payoff.add_col(col_vals, col_errs, col_seeds)

        for source in (br_def, br_att):
            if source.cache is not None:
                for key, val in source.cache.stats.as_dict().items():
                    stats[key] = stats.get(key, 0) + val

        eps = do_config.eps_stop(value)
        record = IterationRecord(
            iteration=iteration, value=value,
            value_per_device=value / env_config.device_count,
            n_defender=n_def, n_attacker=n_att,
            def_improvement=def_improvement, att_improvement=att_improvement,
            eps_stop=eps,
            wall_ms=(time.perf_counter() - tick) * 1e3,
            cache_hits=int(stats.get("hits", 0)),
            cache_misses=int(stats.get("misses", 0)))
        result.records.append(record)
        if on_iteration is not None:
            on_iteration(record)

        # Stop once neither best response improves on the restricted value
        # by more than eps AND the value itself has settled across the last
        # three iterations.  Non-improving responses can still shift the
        # mixed equilibrium when their payoff row is added (the improvement
        # estimate comes from mixture-sampled episodes, the matrix entries
        # from per-pair common-random-number episodes), so improvement
        # alone does not certify a stable value.
        vals = [r.value for r in result.records]
        value_settled = (len(vals) >= 3
                         and abs(vals[-1] - vals[-2]) < eps
                         and abs(vals[-2] - vals[-3]) < eps)
        if (iteration >= do_config.min_iterations
                and max(def_improvement, 0.0) <= eps
                and max(att_improvement, 0.0) <= eps
                and value_settled):
            result.converged = True
            break

    x, y, value = solve_restricted(payoff.values, tol=do_config.solver_tol)
    result.defender_mixture = x
    result.attacker_mixture = y
    result.value = value
    result.payoff_wall_ms = payoff_wall_ms
    return result


def double_oracle_exact(full_matrix: np.ndarray, eps: float = 1e-9,
                        max_iterations: int = 100):
    """Double oracle with exact best responses on a known matrix game.

    Starts from strategy 0 for both players and expands with pure best
    responses until neither side improves by more than ``eps``.  Returns
    ``(x, y, value, iterations)`` with mixtures over the full strategy
    spaces.  Used to validate the outer loop's logic independently of any
    learning.
    """
    u = np.asarray(full_matrix, dtype=np.float64)
    rows, cols = [0], [0]
    for iteration in range(1, max_iterations + 1):
        sub = u[np.ix_(rows, cols)]
        x_sub, y_sub, value = solve_restricted(sub)
        y_full = np.zeros(u.shape[1])
        y_full[cols] = y_sub
        x_full = np.zeros(u.shape[0])
        x_full[rows] = x_sub
        br_row = int(np.argmax(u @ y_full))
        br_col = int(np.argmin(x_full @ u))
        row_gain = float(u[br_row] @ y_full - value)
        col_gain = float(value - x_full @ u[:, br_col])
        expanded = False
        if row_gain > eps and br_row not in rows:
            rows.append(br_row)
            expanded = True
        if col_gain > eps and br_col not in cols:
            cols.append(br_col)
            expanded = True
        if not expanded:
            return x_full, y_full, value, iteration
    raise RuntimeError(f"exact double oracle did not converge in "
                       f"{max_iterations} iterations")

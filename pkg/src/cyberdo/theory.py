"""Tabular MDP checks of the pruning suboptimality bound.

A pruning rule restricts each state's action set.  Acting greedily w.r.t.
the optimal Q values but only over the pruned sets loses at most
``delta_max / (1 - gamma)`` in every state, where ``delta_max`` is the
largest per-state gap between the best unpruned and best pruned Q value.
The underlying one-step lemma says any policy whose chosen actions are
within ``eps_q`` of the greedy Q value in every state is ``eps_q/(1-gamma)``
optimal.  Both statements are verified numerically on random MDPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEG_INF = -np.inf


@dataclass
class TabularMdp:
    """Finite MDP with per-state legal-action masks.

    ``transitions[s, a]`` is a distribution over next states for legal
    ``(s, a)``; ``rewards[s, a]`` is the expected immediate reward.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    discount: float
    action_mask: np.ndarray = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.transitions.ndim != 3:
            raise ValueError("transitions must have shape (S, A, S)")
        s, a, s2 = self.transitions.shape
        if s != s2:
            raise ValueError(f"transitions must be square in states, got {s}x{s2}")
        if self.rewards.shape != (s, a):
            raise ValueError(f"rewards must have shape ({s}, {a}), got "
                             f"{self.rewards.shape}")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must be in [0, 1), got {self.discount}")
        if self.action_mask is None:
            self.action_mask = np.ones((s, a), dtype=bool)
        else:
            self.action_mask = np.asarray(self.action_mask, dtype=bool)
            if self.action_mask.shape != (s, a):
                raise ValueError(f"action_mask must have shape ({s}, {a})")
        if not self.action_mask.any(axis=1).all():
            raise ValueError("every state needs at least one legal action")
        sums = self.transitions.sum(axis=2)
        bad = self.action_mask & (np.abs(sums - 1.0) > 1e-9)
        if bad.any():
            s_bad, a_bad = np.argwhere(bad)[0]
            raise ValueError(f"transition row (s={s_bad}, a={a_bad}) sums to "
                             f"{sums[s_bad, a_bad]}, expected 1")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass
class PruneRule:
    """Per-state allowed-action masks; must keep at least one legal action
    per state and never allow an illegal action."""

    allowed: np.ndarray

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)

    def validate(self, mdp: TabularMdp):
        if self.allowed.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(f"allowed must have shape ({mdp.n_states}, "
                             f"{mdp.n_actions}), got {self.allowed.shape}")
        if (self.allowed & ~mdp.action_mask).any():
            raise ValueError("prune rule allows an illegal action")
        if not self.allowed.any(axis=1).all():
            raise ValueError("prune rule empties some state's action set")


def full_rule(mdp: TabularMdp) -> PruneRule:
    return PruneRule(mdp.action_mask.copy())


def _masked_q(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, q, NEG_INF)


def bellman_backup(mdp: TabularMdp, values: np.ndarray):
    """One optimal Bellman backup; returns ``(new_values, q)`` with
    illegal entries at ``-inf``."""
    q = mdp.rewards + mdp.discount * (mdp.transitions @ values)
    q = _masked_q(q, mdp.action_mask)
    return q.max(axis=1), q


def value_iteration(mdp: TabularMdp, tol: float = 1e-10,
                    max_iterations: int = 1_000_000):
    """Iterate optimal backups until the residual ``||TV - V||_inf <= tol``.

    Returns ``(V, Q, iterations)`` where ``Q`` is the backup at the
    returned ``V``.
    """
    if tol <= 0.0:
        raise ValueError(f"tol must be positive, got {tol}")
    values = np.zeros(mdp.n_states)
    for iteration in range(1, max_iterations + 1):
        new_values, q = bellman_backup(mdp, values)
        residual = float(np.max(np.abs(new_values - values)))
        values = new_values
        if residual <= tol:
            _, q = bellman_backup(mdp, values)
            return values, q, iteration
    raise RuntimeError(f"value iteration did not reach tol={tol} in "
                       f"{max_iterations} iterations")


def policy_eval(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Exact value of a deterministic policy via the linear system
    ``(I - gamma * P_pi) V = r_pi``."""
    policy = np.asarray(policy, dtype=np.int64)
    if policy.shape != (mdp.n_states,):
        raise ValueError(f"policy must have shape ({mdp.n_states},)")
    states = np.arange(mdp.n_states)
    if not mdp.action_mask[states, policy].all():
        bad = states[~mdp.action_mask[states, policy]][0]
        raise ValueError(f"policy picks illegal action {policy[bad]} in "
                         f"state {bad}")
    p_pi = mdp.transitions[states, policy]
    r_pi = mdp.rewards[states, policy]
    lhs = np.eye(mdp.n_states) - mdp.discount * p_pi
    values = np.linalg.solve(lhs, r_pi)
    residual = float(np.max(np.abs(lhs @ values - r_pi)))
    if residual > 1e-8:
        raise RuntimeError(f"policy evaluation residual {residual} too large")
    return values


def optimal_values(mdp: TabularMdp, tol: float = 1e-10):
    """Machine-precision ``(V*, Q*)`` via policy iteration refinement.

    Value iteration only reaches ``tol``; running exact policy evaluation
    with greedy improvement afterwards pins ``V*`` to solver precision,
    which the bound checks need at tight tolerances.
    """
    values, q, _ = value_iteration(mdp, tol=tol)
    policy = np.argmax(q, axis=1)
    for _ in range(mdp.n_states * mdp.n_actions + 10):
        values = policy_eval(mdp, policy)
        _, q = bellman_backup(mdp, values)
        new_policy = np.argmax(q, axis=1)
        if np.array_equal(new_policy, policy):
            return values, q
        policy = new_policy
    return values, q


def pruned_greedy(q: np.ndarray, rule: PruneRule) -> np.ndarray:
    """Greedy policy over the pruned action sets, ties to the lowest index."""
    masked = _masked_q(np.asarray(q, dtype=np.float64), rule.allowed)
    return np.argmax(masked, axis=1)


def delta_max(q: np.ndarray, rule: PruneRule) -> float:
    """Largest per-state gap between the best unpruned and best pruned
    Q value.  Non-negative whenever the pruned sets are subsets."""
    q = np.asarray(q, dtype=np.float64)
    best_full = np.max(q, axis=1)
    best_pruned = np.max(_masked_q(q, rule.allowed), axis=1)
    return float(np.max(best_full - best_pruned))


@dataclass
class BoundReport:
    """One verified bound: ``lhs <= rhs + tol`` must hold."""

    lhs: float
    rhs: float
    tol: float
    holds: bool
    slack: float
    witness_state: int

    @staticmethod
    def from_values(gaps: np.ndarray, rhs: float, tol: float) -> "BoundReport":
        lhs = float(np.max(gaps))
        witness = int(np.argmax(gaps))
        return BoundReport(lhs=lhs, rhs=float(rhs), tol=tol,
                           holds=lhs <= rhs + tol,
                           slack=float(rhs + tol - lhs),
                           witness_state=witness)


@dataclass
class LemmaReport:
    eps_q: float
    bound: BoundReport

    @property
    def holds(self) -> bool:
        return self.bound.holds


@dataclass
class TheoremReport:
    delta_max: float
    bound: BoundReport
    lemma: LemmaReport
    optimal_values: np.ndarray
    pruned_policy_values: np.ndarray
    policy: np.ndarray

    @property
    def holds(self) -> bool:
        return self.bound.holds and self.lemma.holds


def check_lemma(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-8,
                precomputed=None) -> LemmaReport:
    """Verify the one-step lemma for an arbitrary deterministic policy:
    with ``eps_q = max_s (max_a Q*(s,a) - Q*(s, pi(s)))``,
    ``||V* - V_pi||_inf <= eps_q / (1 - gamma)``."""
    v_star, q_star = precomputed if precomputed is not None else optimal_values(mdp)
    states = np.arange(mdp.n_states)
    eps_q = float(np.max(np.max(_masked_q(q_star, mdp.action_mask), axis=1)
                         - q_star[states, policy]))
    v_pi = policy_eval(mdp, policy)
    gaps = np.abs(v_star - v_pi)
    return LemmaReport(eps_q=eps_q, bound=BoundReport.from_values(
        gaps, eps_q / (1.0 - mdp.discount), tol))


def check_theorem(mdp: TabularMdp, rule: PruneRule,
                  tol: float = 1e-8) -> TheoremReport:
    """Verify the pruning bound on one MDP instance.

    Computes exact ``V*``/``Q*``, the pruned-greedy policy, its exact
    value, and checks ``||V* - V_pruned||_inf <= delta_max/(1-gamma)``.
    Also re-checks the lemma on the pruned-greedy policy, whose one-step
    gap is at most ``delta_max``.
    """
    rule.validate(mdp)
    v_star, q_star = optimal_values(mdp)
    policy = pruned_greedy(q_star, rule)
    v_policy = policy_eval(mdp, policy)
    gap = delta_max(q_star, rule)
    gaps = np.abs(v_star - v_policy)
    bound = BoundReport.from_values(gaps, gap / (1.0 - mdp.discount), tol)
    lemma = check_lemma(mdp, policy, tol=tol, precomputed=(v_star, q_star))
    return TheoremReport(delta_max=gap, bound=bound, lemma=lemma,
                         optimal_values=v_star, pruned_policy_values=v_policy,
                         policy=policy)


def random_mdp(rng: np.random.Generator, max_states: int = 20,
               max_actions: int = 6, discount: float = 0.99) -> TabularMdp:
    """Random instance: Dirichlet(1) transition rows, rewards U[-1, 1],
    random non-empty legal-action masks."""
    n_states = int(rng.integers(2, max_states + 1))
    n_actions = int(rng.integers(2, max_actions + 1))
    transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    mask = rng.random((n_states, n_actions)) < 0.8
    for s in range(n_states):
        if not mask[s].any():
            mask[s, int(rng.integers(n_actions))] = True
    return TabularMdp(transitions=transitions, rewards=rewards,
                      discount=discount, action_mask=mask)


def random_rule(rng: np.random.Generator, mdp: TabularMdp) -> PruneRule:
    """Random pruning rule keeping a non-empty subset of each legal set."""
    allowed = mdp.action_mask & (rng.random(mdp.action_mask.shape) < 0.5)
    for s in range(mdp.n_states):
        if not allowed[s].any():
            legal = np.flatnonzero(mdp.action_mask[s])
            allowed[s, legal[int(rng.integers(len(legal)))]] = True
    return PruneRule(allowed)


def random_policy(rng: np.random.Generator, mdp: TabularMdp) -> np.ndarray:
    """Uniformly random deterministic legal policy."""
    policy = np.zeros(mdp.n_states, dtype=np.int64)
    for s in range(mdp.n_states):
        legal = np.flatnonzero(mdp.action_mask[s])
        policy[s] = legal[int(rng.integers(len(legal)))]
    return policy


@dataclass
class CampaignRow:
    instance: int
    discount: float
    n_states: int
    n_actions: int
    delta_max: float
    theorem_lhs: float
    theorem_rhs: float
    theorem_slack: float
    theorem_holds: bool
    lemma_eps_q: float
    lemma_lhs: float
    lemma_rhs: float
    lemma_slack: float
    lemma_holds: bool


@dataclass
class CampaignReport:
    rows: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(1 for r in self.rows
                   if not (r.theorem_holds and r.lemma_holds))

    @property
    def all_hold(self) -> bool:
        return self.violations == 0


def run_campaign(n_instances: int = 200, seed: int = 0,
                 discounts=(0.9, 0.99), max_states: int = 20,
                 max_actions: int = 6, tol: float = 1e-8) -> CampaignReport:
    """Verify theorem and lemma on ``n_instances`` random MDPs, cycling
    through ``discounts``.  The lemma is additionally checked on an
    unrelated random policy per instance."""
    rng = np.random.default_rng(seed)
    report = CampaignReport()
    for idx in range(n_instances):
        discount = discounts[idx % len(discounts)]
        mdp = random_mdp(rng, max_states=max_states, max_actions=max_actions,
                         discount=discount)
        rule = random_rule(rng, mdp)
        theorem = check_theorem(mdp, rule, tol=tol)
        _, q_star = bellman_backup(mdp, theorem.optimal_values)
        arbitrary = check_lemma(
            mdp, random_policy(rng, mdp), tol=tol,
            precomputed=(theorem.optimal_values, q_star))
        report.rows.append(CampaignRow(
            instance=idx, discount=discount, n_states=mdp.n_states,
            n_actions=mdp.n_actions, delta_max=theorem.delta_max,
            theorem_lhs=theorem.bound.lhs, theorem_rhs=theorem.bound.rhs,
            theorem_slack=theorem.bound.slack,
            theorem_holds=theorem.bound.holds and theorem.lemma.holds,
            lemma_eps_q=arbitrary.eps_q,
            lemma_lhs=arbitrary.bound.lhs, lemma_rhs=arbitrary.bound.rhs,
            lemma_slack=arbitrary.bound.slack, lemma_holds=arbitrary.holds))
    return report

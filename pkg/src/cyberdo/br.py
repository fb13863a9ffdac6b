"""Approximate best responses via deterministic actor-critic learners.

A policy holds an actor that emits a fixed-width continuous preference
vector (per-device block, action-type block, exploit block, app block)
and a critic that scores ``[observation || encoded action]``.  Decoding
is a two-stage greedy pass: the actor's preferences shortlist the top
``greedy_k`` legal atoms on each allowed device, the critic scores the
pooled shortlist (through the Q cache when one is attached), and the
single best-scored atom is played each step (softmax-sampled by score
when exploring).  Critic evaluations per decode are therefore bounded
by ``len(allowed) * greedy_k`` no matter how many atoms are legal.

Training is standard for this family: replayed one-step TD targets from
target networks for the critic, the deterministic policy gradient through
the critic for the actor, soft target updates, and clipped Adam steps.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .env import (ATTACKER, DEFENDER, ActionAtom, EnvConfig, IllegalActionError,
                  NetworkState, action_types_for, holding_reward, legal_actions,
                  noop_atom, observation_size, observe, reset, reward_bound,
                  step)
from .meta import MetaController, MetaSample, pool_observation
from .qcache import CacheKey, QCache

HIDDEN = 128


@dataclass
class BrConfig:
    """Best-response training knobs."""

    actor_lr: float = 1e-3
    critic_lr: float = 1e-2
    tau: float = 0.01
    noise_std: float = 0.1
    greedy_k: int = 5
    greedy_tau: float = 0.5
    buffer_capacity: int = 100_000
    batch_size: int = 64
    warmup: int = 500
    budget: int = 2000
    max_grad_norm: float = 0.5
    hidden: int = HIDDEN
    # Fraction of training steps rolled out on a random visible device set
    # of the controller's size instead of its selection.  Without this the
    # replay only ever contains atoms on controller-selected devices and
    # the critic never sees most device/action pairs.  Evaluation always
    # uses the frozen controller's selection.
    device_explore_eps: float = 0.2
    # Discount used inside TD learning (targets, shaping potential, value
    # cap).  Kept below the game discount: bootstrap noise at the target
    # actor's action inflates values by roughly noise/(1 - discount), and
    # at the game's 0.99 that amplification swamps per-action reward
    # differences at desk-scale budgets.  Payoff estimation and the outer
    # game always use the environment discount.
    train_discount: float = 0.9

    def validate(self):
        if self.greedy_k < 1:
            raise ValueError(f"greedy_k must be >= 1, got {self.greedy_k}")
        if self.greedy_tau <= 0.0:
            raise ValueError(f"greedy_tau must be > 0, got {self.greedy_tau}")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.budget < 0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")
        for name in ("actor_lr", "critic_lr", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if not 0.0 <= self.device_explore_eps <= 1.0:
            raise ValueError("device_explore_eps must be in [0, 1], got "
                             f"{self.device_explore_eps}")
        if not 0.0 <= self.train_discount < 1.0:
            raise ValueError("train_discount must be in [0, 1), got "
                             f"{self.train_discount}")


@dataclass
class MetaConfig:
    """Device-pruning controller knobs; ``enabled=False`` is the no-meta
    ablation (decode over every visible device)."""

    enabled: bool = True
    alpha: int = 1
    lr: float = 1e-3
    tau: float = 0.01
    replay_capacity: int = 10_000
    # One controller regression step every this many environment steps.
    # The bilinear score couples per-device embeddings with a projected
    # observation; an undertrained projector can rank devices differently
    # from episode to episode, so the controller needs dense updates to
    # stabilise across dynamics draws.
    train_every: int = 2
    batch_size: int = 64

    def validate(self):
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.train_every < 1:
            raise ValueError("train_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.replay_capacity < 1:
            raise ValueError("replay_capacity must be >= 1")


@dataclass
class CacheConfig:
    """Q-cache knobs; ``ttl``/``flush_interval`` of 0 disable that limit
    and ``decimals < 0`` disables key quantization."""

    enabled: bool = True
    capacity: int = 50_000
    ttl: int = 50
    flush_interval: int = 200
    reeval_prob: float = 0.01
    khop_radius: int = 1
    decimals: int = 3

    def validate(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.ttl < 0 or self.flush_interval < 0:
            raise ValueError("ttl and flush_interval must be >= 0")
        if not 0.0 <= self.reeval_prob <= 1.0:
            raise ValueError("reeval_prob must be in [0, 1]")
        if self.khop_radius < 0:
            raise ValueError("khop_radius must be >= 0")

    def build(self, seed: int = 0) -> QCache:
        return QCache(capacity=self.capacity,
                      ttl=self.ttl if self.ttl > 0 else None,
                      flush_interval=(self.flush_interval
                                      if self.flush_interval > 0 else None),
                      reeval_prob=self.reeval_prob,
                      khop_radius=self.khop_radius,
                      decimals=self.decimals if self.decimals >= 0 else None,
                      seed=seed)


def action_vector_size(config: EnvConfig, role: str) -> int:
    return (config.device_count + len(action_types_for(role))
            + config.exploit_catalog_size + config.app_catalog_size)


def encode_atoms(atoms, config: EnvConfig, role: str) -> np.ndarray:
    """Multi-hot encoding of a joint action: device, action-type, exploit
    and app blocks.  A single atom is the one-atom special case."""
    types = action_types_for(role)
    m = config.device_count
    vec = np.zeros(action_vector_size(config, role))
    for atom in atoms:
        if atom.action_type not in types:
            raise IllegalActionError(f"atom {atom!r} does not belong to {role}")
        vec[atom.node] = 1.0
        vec[m + types.index(atom.action_type)] = 1.0
        if atom.exploit_id is not None:
            vec[m + len(types) + atom.exploit_id] = 1.0
        if atom.app_id is not None:
            vec[m + len(types) + config.exploit_catalog_size + atom.app_id] = 1.0
    return vec


def harden_actions(actor_out: np.ndarray, config: EnvConfig,
                   role: str) -> np.ndarray:
    """Blockwise argmax of continuous actor output, as encoded actions.

    Rows of the result are valid single-atom encodings: one device bit,
    one action-type bit, and an exploit bit only when the chosen type
    carries an exploit id.  The TD bootstrap evaluates the target critic
    at these points, so it never queries the critic off the manifold of
    encodings it is trained on.
    """
    out = np.atleast_2d(actor_out)
    types = action_types_for(role)
    m = config.device_count
    t = len(types)
    enc = np.zeros((out.shape[0], out.shape[1]))
    rows = np.arange(out.shape[0])
    enc[rows, np.argmax(out[:, :m], axis=1)] = 1.0
    type_idx = np.argmax(out[:, m:m + t], axis=1)
    enc[rows, m + type_idx] = 1.0
    needs_exploit = np.array([types[i] in ("exploit", "patch")
                              for i in type_idx])
    if needs_exploit.any():
        e0 = m + t
        e1 = e0 + config.exploit_catalog_size
        exploit_idx = np.argmax(out[:, e0:e1], axis=1)
        enc[rows[needs_exploit], e0 + exploit_idx[needs_exploit]] = 1.0
    return enc if np.ndim(actor_out) > 1 else enc[0]


def atom_affinity(actor_out: np.ndarray, atom: ActionAtom, config: EnvConfig,
                  role: str) -> float:
    """Actor preference for one atom: the sum of its blocks' logits."""
    types = action_types_for(role)
    m = config.device_count
    value = actor_out[atom.node] + actor_out[m + types.index(atom.action_type)]
    if atom.exploit_id is not None:
        value += actor_out[m + len(types) + atom.exploit_id]
    if atom.app_id is not None:
        value += actor_out[m + len(types) + config.exploit_catalog_size
                           + atom.app_id]
    return float(value)


@dataclass
class Policy:
    """One pure strategy: actor/critic nets with their target copies.

    ``meta`` optionally carries a frozen clone of the pruning controller
    the policy was trained with, so replaying the policy reproduces its
    restricted decoding.  ``baseline="noop"`` short-circuits decoding to
    the do-nothing action; used for fixed reference strategies.

    ``reward_scale`` is the factor applied to signed rewards before they
    reach the critic (1 / reward bound, so scaled rewards live in
    [-1, 1]).  It only rescales learned values; candidate ranking at
    decode time is unchanged by it.
    """

    role: str
    env_config: EnvConfig
    br_config: BrConfig
    actor: nets.Mlp
    critic: nets.Mlp
    actor_target: nets.Mlp
    critic_target: nets.Mlp
    actor_opt: nets.AdamState
    critic_opt: nets.AdamState
    reward_scale: float = 1.0
    meta: MetaController | None = None
    baseline: str | None = None
    critic_evals: int = 0
    last_decode_evals: int = 0
    name: str = ""

    @property
    def obs_dim(self) -> int:
        return observation_size(self.env_config)

    @property
    def action_dim(self) -> int:
        return action_vector_size(self.env_config, self.role)

    def critic_q(self, obs_mat: np.ndarray, action_mat: np.ndarray) -> np.ndarray:
        """Critic scores for rows of (observation, encoded action) pairs."""
        x = np.concatenate([np.atleast_2d(obs_mat), np.atleast_2d(action_mat)],
                           axis=1)
        return self.critic.forward(x)[:, 0]

    def param_arrays(self) -> dict:
        out = {}
        for prefix, net in (("actor.", self.actor), ("critic.", self.critic),
                            ("actor_target.", self.actor_target),
                            ("critic_target.", self.critic_target)):
            out.update(net.state_arrays(prefix))
        return out

    def clone(self) -> "Policy":
        return copy.deepcopy(self)


def make_policy(env_config: EnvConfig, br_config: BrConfig, role: str,
                seed: int = 0, name: str = "") -> Policy:
    """Freshly initialised policy, deterministic in ``seed``."""
    br_config.validate()
    obs_dim = observation_size(env_config)
    act_dim = action_vector_size(env_config, role)
    h = br_config.hidden
    # Sigmoid keeps actor outputs inside [0, 1]^A, the hull of the one-hot
    # action encodings the critic is fit on, so bootstrap targets never
    # evaluate the critic far outside its training distribution.
    actor = nets.Mlp([obs_dim, h, h, act_dim], activation="relu",
                     output_activation="sigmoid", seed=seed * 4 + 1)
    critic = nets.Mlp([obs_dim + act_dim, h, h, 1], activation="relu",
                      seed=seed * 4 + 2)
    return Policy(role=role, env_config=env_config, br_config=br_config,
                  actor=actor, critic=critic,
                  actor_target=actor.copy(), critic_target=critic.copy(),
                  actor_opt=nets.AdamState.for_params(actor.params(),
                                                      br_config.actor_lr),
                  critic_opt=nets.AdamState.for_params(critic.params(),
                                                       br_config.critic_lr),
                  reward_scale=1.0 / reward_bound(env_config),
                  name=name)


def noop_policy(env_config: EnvConfig, role: str,
                name: str = "noop") -> Policy:
    policy = make_policy(env_config, BrConfig(), role, seed=0, name=name)
    policy.baseline = "noop"
    return policy


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def act(policy: Policy, state: NetworkState, obs: np.ndarray, allowed,
        cache: QCache | None = None, explore: bool = False,
        rng: np.random.Generator | None = None,
        meta: MetaController | None = None) -> set[ActionAtom]:
    """Decode one action atom, restricted to the ``allowed`` devices.

    Candidates are the top ``greedy_k`` legal atoms on each allowed
    device by actor affinity, pooled together with the always-legal noop
    atom.  The pool is capped at ``len(allowed) * greedy_k`` entries
    (noop keeps its slot; the weakest device atoms are dropped), every
    pooled candidate is scored by the critic (through the Q cache when
    one is attached, which then ticks once per scoring pass), and the
    best-scored atom is played; when exploring the pick is
    softmax-sampled by score at temperature ``greedy_tau``.  A pool with
    no device atom, or with room for only one candidate, is decided
    without the critic, so critic evaluations per decode never exceed
    ``len(allowed) * greedy_k``.
    """
    if policy.baseline == "noop":
        policy.last_decode_evals = 0
        return {noop_atom(0)}
    if explore and rng is None:
        raise ValueError("explore=True requires an rng")
    if meta is None:
        meta = policy.meta
    cfg = policy.env_config

    by_node: dict[int, list[ActionAtom]] = {}
    for atom in sorted(legal_actions(state, policy.role),
                       key=ActionAtom.sort_key):
        if atom.action_type == "noop":
            continue
        by_node.setdefault(atom.node, []).append(atom)

    actor_out = policy.actor.forward(obs)
    if explore and policy.br_config.noise_std > 0.0:
        actor_out = actor_out + rng.normal(0.0, policy.br_config.noise_std,
                                           size=actor_out.shape)

    pool: list[tuple[float, ActionAtom]] = []
    for node in sorted(int(n) for n in allowed):
        candidates = by_node.get(node)
        if not candidates:
            continue
        affinities = np.array([atom_affinity(actor_out, a, cfg, policy.role)
                               for a in candidates])
        order = np.argsort(-affinities, kind="stable")
        pool.extend((float(affinities[i]), candidates[i])
                    for i in order[:policy.br_config.greedy_k])

    budget = len(allowed) * policy.br_config.greedy_k
    if len(pool) + 1 > budget:
        keep = sorted(range(len(pool)),
                      key=lambda i: (-pool[i][0], i))[:max(budget - 1, 0)]
        pool = [pool[i] for i in sorted(keep)]
    candidates = [noop_atom(0)] + [atom for _, atom in pool]
    if len(candidates) == 1:
        policy.last_decode_evals = 0
        return {candidates[0]}

    if cache is not None:
        cache.tick()
        key_emb = (meta.key_embedding(obs) if meta is not None
                   else pool_observation(obs))
        skey = cache.state_key(key_emb)
    scores = np.empty(len(candidates))
    missing = []
    for idx, atom in enumerate(candidates):
        value = None
        if cache is not None:
            value = cache.lookup(CacheKey(skey, atom.node, atom.action_type,
                                          atom.exploit_id, atom.app_id))
        if value is None:
            missing.append(idx)
        else:
            scores[idx] = value
    if missing:
        enc = np.stack([encode_atoms([candidates[i]], cfg, policy.role)
                        for i in missing])
        obs_mat = np.broadcast_to(obs, (len(missing), obs.shape[0]))
        fresh = policy.critic_q(obs_mat, enc)
        for row, idx in enumerate(missing):
            scores[idx] = fresh[row]
            if cache is not None:
                atom = candidates[idx]
                cache.insert(CacheKey(skey, atom.node, atom.action_type,
                                      atom.exploit_id, atom.app_id),
                             float(fresh[row]))
    if explore:
        pick = int(rng.choice(len(candidates),
                              p=_softmax(scores / policy.br_config.greedy_tau)))
    else:
        pick = int(np.argmax(scores))
    policy.critic_evals += len(missing)
    policy.last_decode_evals = len(missing)
    return {candidates[pick]}


def allowed_devices(policy: Policy, state: NetworkState,
                    obs: np.ndarray) -> list[int]:
    """Devices the policy decodes over when replayed: its bundled
    controller's selection, or every visible device without one."""
    if policy.baseline is not None:
        return []
    if policy.meta is not None:
        return select_frozen(policy.meta, state, obs)
    return sorted(state.visible_set(policy.role))


def select_frozen(meta: MetaController, state: NetworkState,
                  obs: np.ndarray) -> list[int]:
    """Selection with a frozen controller outside its training run: node
    features are recomputed from scratch so stale dirty-tracking from the
    original run cannot leak in."""
    meta.mark_dirty(range(meta.device_count))
    return meta.select(state, obs)


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer; sampling is uniform without replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._items: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, item: Transition):
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._cursor] = item
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, rng: np.random.Generator, batch_size: int):
        if batch_size > len(self._items):
            raise ValueError(f"cannot sample {batch_size} from "
                             f"{len(self._items)} transitions")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[int(i)] for i in idx]


def _batch_arrays(batch):
    obs = np.stack([t.obs for t in batch])
    actions = np.stack([t.action for t in batch])
    rewards = np.array([t.reward for t in batch])
    next_obs = np.stack([t.next_obs for t in batch])
    done = np.array([1.0 if t.done else 0.0 for t in batch])
    return obs, actions, rewards, next_obs, done


def critic_loss(policy: Policy, batch):
    """TD loss ``mean((Q(o, a) - y)^2)`` with one-step bootstrapped targets
    ``y = r + gamma * (1 - done) * Q_target(o', actor_target(o'))``, where
    the target actor's action is its hardened (blockwise argmax) encoding
    per :func:`harden_actions`.

    Targets are clamped to a provable value range: per-step rewards in
    the buffer are bounded by ``reward_bound * reward_scale`` and the
    potential shift adds at most the same bound again, so no true target
    can exceed twice that over ``1 - gamma`` in magnitude.  Bootstrapped
    overestimates would otherwise feed back through the target networks
    and diverge.  Returns ``(loss, critic_param_grads)``.
    """
    obs, actions, rewards, next_obs, done = _batch_arrays(batch)
    gamma = policy.br_config.train_discount
    next_actions = harden_actions(policy.actor_target.forward(next_obs),
                                  policy.env_config, policy.role)
    q_next = policy.critic_target.forward(
        np.concatenate([next_obs, next_actions], axis=1))[:, 0]
    value_cap = (2.0 * reward_bound(policy.env_config) * policy.reward_scale
                 / (1.0 - gamma))
    targets = np.clip(rewards + gamma * (1.0 - done) * q_next,
                      -value_cap, value_cap)
    q, cache = policy.critic.forward_cached(
        np.concatenate([obs, actions], axis=1))
    err = q[:, 0] - targets
    loss = float(np.mean(err ** 2))
    upstream = (2.0 / len(batch)) * err[:, None]
    grads, _ = policy.critic.backward(cache, upstream)
    return loss, grads


def critic_step(policy: Policy, batch) -> float:
    loss, grads = critic_loss(policy, batch)
    nets.opt_step(policy.critic.params(), grads, policy.critic_opt,
                  max_grad_norm=policy.br_config.max_grad_norm)
    return loss


def actor_objective(policy: Policy, obs_batch: np.ndarray):
    """Mean critic score of the actor's own actions, with its gradient
    w.r.t. actor parameters (the deterministic policy gradient)."""
    obs_batch = np.atleast_2d(obs_batch)
    actions, actor_cache = policy.actor.forward_cached(obs_batch)
    q, critic_cache = policy.critic.forward_cached(
        np.concatenate([obs_batch, actions], axis=1))
    objective = float(np.mean(q[:, 0]))
    upstream = np.full((obs_batch.shape[0], 1), 1.0 / obs_batch.shape[0])
    _, input_grad = policy.critic.backward(critic_cache, upstream)
    action_grad = input_grad[:, policy.obs_dim:]
    grads, _ = policy.actor.backward(actor_cache, action_grad)
    return objective, grads


def actor_step(policy: Policy, obs_batch: np.ndarray) -> float:
    """Gradient-ascent step on the actor; the critic is left untouched."""
    objective, grads = actor_objective(policy, obs_batch)
    neg = [-g for g in grads]
    nets.opt_step(policy.actor.params(), neg, policy.actor_opt,
                  max_grad_norm=policy.br_config.max_grad_norm)
    return objective


@dataclass
class Mixture:
    """Finite mixed strategy over pure policies."""

    policies: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.policies) != self.probs.shape[0]:
            raise ValueError(f"{len(self.policies)} policies but "
                             f"{self.probs.shape[0]} probabilities")
        if self.probs.min() < -1e-12:
            raise ValueError("mixture probabilities must be non-negative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"mixture probabilities sum to "
                             f"{float(self.probs.sum())}, expected 1")

    def sample(self, rng: np.random.Generator) -> Policy:
        idx = int(rng.choice(len(self.policies), p=self.probs))
        return self.policies[idx]

    @classmethod
    def pure(cls, policy: Policy) -> "Mixture":
        return cls([policy], np.array([1.0]))


@dataclass
class TrainResult:
    policy: Policy
    env_steps: int
    episodes: int
    critic_losses: list = field(default_factory=list)
    meta_losses: list = field(default_factory=list)
    cache: QCache | None = None


def train_best_response(env_config: EnvConfig, br_config: BrConfig, role: str,
                        opponent: Mixture, seed: int = 0,
                        meta_config: MetaConfig | None = None,
                        cache_config: CacheConfig | None = None,
                        cache: QCache | None = None,
                        name: str = "") -> TrainResult:
    """Train an approximate best response to ``opponent`` for ``role``.

    Episodes share one topology (the environment seed stays fixed for the
    run) but draw fresh dynamics each time: initial compromise placement,
    workloads, and the event stream all vary with a per-episode dynamics
    seed.  Each environment step records a replay transition,
    feeds the pruning controller's replay, invalidates the cache around
    changed devices, and (after warmup) applies one critic and one actor
    update with soft target updates.  With ``budget=0`` the returned
    policy is exactly its random initialisation.

    Rewards entering the learner are potential-shaped with the holding
    flow as potential, ``phi(s) = signed_holding(s) / (1 - train_discount)``
    (in scaled units): a step that leaves the network unchanged contributes
    exactly zero, and only changes in the standing flow carry signal.
    Potential-based shaping shifts every Q-value at a state by the same
    constant, so per-state action ranking (hence greedy decoding) is the
    same as under raw rewards, while the critic no longer has to resolve
    small per-action differences on top of a large shared baseline.  The
    shaping discount matches the TD discount (``train_discount``), which
    the telescoping argument behind both properties requires.
    """
    br_config.validate()
    meta_config = meta_config if meta_config is not None else MetaConfig()
    cache_config = cache_config if cache_config is not None else CacheConfig()
    meta_config.validate()
    cache_config.validate()
    if role not in (ATTACKER, DEFENDER):
        raise ValueError(f"unknown role: {role!r}")

    seq = np.random.SeedSequence(seed)
    child = seq.generate_state(4, dtype=np.uint32)
    rng = np.random.default_rng(seq.spawn(1)[0])
    policy = make_policy(env_config, br_config, role, seed=int(child[0]),
                         name=name)
    meta = None
    if meta_config.enabled:
        meta = MetaController(role=role, device_count=env_config.device_count,
                              alpha=meta_config.alpha, seed=int(child[1]),
                              lr=meta_config.lr, tau=meta_config.tau,
                              max_grad_norm=br_config.max_grad_norm,
                              replay_capacity=meta_config.replay_capacity)
    if cache is None and cache_config.enabled:
        cache = cache_config.build(seed=int(child[2]))
    buffer = ReplayBuffer(br_config.buffer_capacity)

    opp_role = DEFENDER if role == ATTACKER else ATTACKER
    sign = 1.0 if role == ATTACKER else -1.0
    gamma_tr = br_config.train_discount
    phi_scale = policy.reward_scale / (1.0 - gamma_tr)
    steps_done = 0
    episodes = 0
    result = TrainResult(policy=policy, env_steps=0, episodes=0)

    while steps_done < br_config.budget:
        episode_cfg = replace(env_config,
                              dynamics_seed=int(rng.integers(2 ** 31)))
        state = reset(episode_cfg)
        if meta is not None:
            meta.mark_dirty(range(env_config.device_count))
        opp_policy = opponent.sample(rng)
        obs = observe(state, role)
        done = False
        while not done and steps_done < br_config.budget:
            if meta is not None:
                allowed = meta.select(state, obs)
                if (allowed and br_config.device_explore_eps > 0.0
                        and rng.random() < br_config.device_explore_eps):
                    visible = sorted(state.visible_set(role))
                    allowed = sorted(int(i) for i in rng.choice(
                        visible, size=min(len(allowed), len(visible)),
                        replace=False))
                feats = (meta.sample_features(state, allowed)
                         if allowed else None)
            else:
                allowed = sorted(state.visible_set(role))
                feats = None
            atoms = act(policy, state, obs, allowed, cache=cache,
                        explore=True, rng=rng, meta=meta)
            opp_obs = observe(state, opp_role)
            opp_atoms = act(opp_policy, state, opp_obs,
                            allowed_devices(opp_policy, state, opp_obs),
                            explore=False)
            phi = sign * holding_reward(state) * phi_scale
            if role == ATTACKER:
                state, reward, done = step(state, atoms, opp_atoms)
            else:
                state, reward, done = step(state, opp_atoms, atoms)
            phi_next = sign * holding_reward(state) * phi_scale
            shaped = (sign * reward * policy.reward_scale
                      + gamma_tr * phi_next - phi)
            next_obs = observe(state, role)
            buffer.add(Transition(obs=obs,
                                  action=encode_atoms(atoms, env_config, role),
                                  reward=shaped, next_obs=next_obs, done=done))
            if meta is not None:
                if allowed:
                    meta.record(MetaSample(obs=obs, selected=tuple(allowed),
                                           features=feats, reward=shaped,
                                           next_obs=next_obs, done=done))
                meta.mark_dirty(state.last_changed)
            if cache is not None:
                cache.invalidate_khop(state.last_changed, state.adjacency)
            obs = next_obs
            steps_done += 1

            if len(buffer) >= max(br_config.warmup, br_config.batch_size):
                batch = buffer.sample(rng, br_config.batch_size)
                result.critic_losses.append(critic_step(policy, batch))
                actor_step(policy, np.stack([t.obs for t in batch]))
                nets.soft_update(policy.critic_target, policy.critic,
                                 br_config.tau)
                nets.soft_update(policy.actor_target, policy.actor,
                                 br_config.tau)
            if (meta is not None and steps_done % meta_config.train_every == 0
                    and len(meta.replay) >= meta_config.batch_size):
                result.meta_losses.append(meta.train_meta(
                    meta.sample_replay(rng, meta_config.batch_size)))
        episodes += 1

    if meta is not None:
        policy.meta = meta.clone()
    result.env_steps = steps_done
    result.episodes = episodes
    result.cache = cache
    return result


def save_policy(policy: Policy, path):
    """Checkpoint a policy (nets, targets, bundled controller) in the
    shared binary array format; configs travel in the JSON header."""
    from dataclasses import asdict

    arrays = policy.param_arrays()
    meta_info = {
        "role": policy.role,
        "name": policy.name,
        "baseline": policy.baseline,
        "reward_scale": policy.reward_scale,
        "env_config": asdict(policy.env_config),
        "br_config": asdict(policy.br_config),
        "actor": policy.actor.spec(),
        "critic": policy.critic.spec(),
    }
    if policy.meta is not None:
        m_arrays, m_meta = policy.meta.checkpoint_arrays()
        arrays.update({f"meta.{k}": v for k, v in m_arrays.items()})
        meta_info["meta"] = m_meta
    nets.save_checkpoint(path, arrays, meta_info)


def load_policy(path) -> Policy:
    arrays, info = nets.load_checkpoint(path)
    env_config = EnvConfig(**info["env_config"])
    br_config = BrConfig(**info["br_config"])
    policy = Policy(role=info["role"], env_config=env_config,
                    br_config=br_config,
                    actor=nets.Mlp.from_spec(info["actor"]),
                    critic=nets.Mlp.from_spec(info["critic"]),
                    actor_target=nets.Mlp.from_spec(info["actor"]),
                    critic_target=nets.Mlp.from_spec(info["critic"]),
                    actor_opt=None, critic_opt=None,
                    reward_scale=float(info.get("reward_scale", 1.0)),
                    baseline=info["baseline"], name=info["name"])

    def pick(prefix, net):
        params = []
        for idx in range(len(net.weights)):
            params.append(arrays[f"{prefix}W{idx}"])
            params.append(arrays[f"{prefix}b{idx}"])
        net.load_params(params)

    pick("actor.", policy.actor)
    pick("critic.", policy.critic)
    pick("actor_target.", policy.actor_target)
    pick("critic_target.", policy.critic_target)
    policy.actor_opt = nets.AdamState.for_params(policy.actor.params(),
                                                 br_config.actor_lr)
    policy.critic_opt = nets.AdamState.for_params(policy.critic.params(),
                                                  br_config.critic_lr)
    if "meta" in info:
        meta_arrays = {k[len("meta."):]: v for k, v in arrays.items()
                       if k.startswith("meta.")}
        policy.meta = MetaController.from_arrays(meta_arrays, info["meta"])
    return policy

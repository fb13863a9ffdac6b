"""Learned top-k device pruning.

Best-response decoding over all ``M`` devices costs ``O(M)`` critic
evaluations per step.  The meta controller cuts this to ``k = max(1,
alpha * ceil(log10(max(10, M))))`` devices by scoring every visible
device against the current observation and keeping the top ``k``.

Scores are bilinear: ``score(i | o) = z_i . h(o) + b`` where ``z_i``
projects fixed random per-device id embeddings plus cheap structural
features (normalised degree, visibility, ownership) and ``h`` projects a
pooled, fixed-width summary of the observation.  Only the two projectors
and the bias train, so the trained parameter count does not grow with
``M``.  The controller regresses its mean selected score onto realised
reward and keeps per-device embeddings fresh lazily through a dirty set
fed by the environment's change reports.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nets
from .env import OBS_FEATURES_PER_DEVICE, NetworkState, device_obs_block

EMBED_DIM = 32
ID_DIM = 16
NODE_HIDDEN = 32
STATE_HIDDEN = 64
# Per-node inputs beyond the id embedding: three structural entries
# (degree, visibility, ownership) plus the device's own block from the
# role's observation.  The block is what lets scores separate devices in
# the same structural class, e.g. a compromised device from a clean one.
STRUCT_FEATURES = 3
NODE_STATE_FEATURES = STRUCT_FEATURES + OBS_FEATURES_PER_DEVICE


def ceil_log10(n: int) -> int:
    """Smallest ``p`` with ``10**p >= n``, in exact integer arithmetic."""
    if n < 1:
        raise ValueError(f"need a positive integer, got {n}")
    p, reach = 0, 1
    while reach < n:
        reach *= 10
        p += 1
    return p


def compute_k(device_count: int, alpha: int = 1) -> int:
    """Budget of devices to keep: ``max(1, alpha * ceil(log10(max(10, M))))``."""
    if device_count < 1:
        raise ValueError(f"device_count must be >= 1, got {device_count}")
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    return max(1, alpha * ceil_log10(max(10, device_count)))


def pooled_obs_size() -> int:
    return 2 * OBS_FEATURES_PER_DEVICE + 1


def pool_observation(obs: np.ndarray) -> np.ndarray:
    """Fixed-width summary of an observation: per-feature means and maxes
    over the device blocks plus the episode-progress entry.  Keeps the
    state projector's input width independent of the device count."""
    obs = np.asarray(obs, dtype=np.float64)
    if (obs.shape[-1] - 1) % OBS_FEATURES_PER_DEVICE != 0:
        raise ValueError(f"observation length {obs.shape[-1]} does not match "
                         f"the {OBS_FEATURES_PER_DEVICE}-feature layout")
    blocks = obs[:-1].reshape(-1, OBS_FEATURES_PER_DEVICE)
    return np.concatenate([blocks.mean(axis=0), blocks.max(axis=0), obs[-1:]])


@dataclass
class MetaSample:
    """One replayed selection: observation, chosen device ids, the node
    features those devices had at selection time, and the realised reward."""

    obs: np.ndarray
    selected: tuple
    features: np.ndarray
    reward: float
    next_obs: np.ndarray | None = None
    done: bool = False


class MetaController:
    """Per-role device pruner; one instance per best-response training run."""

    def __init__(self, role: str, device_count: int, alpha: int = 1,
                 seed: int = 0, lr: float = 1e-3, tau: float = 0.01,
                 max_grad_norm: float = 0.5, replay_capacity: int = 10_000,
                 embed_dim: int = EMBED_DIM, id_dim: int = ID_DIM):
        self.role = role
        self.device_count = int(device_count)
        self.alpha = int(alpha)
        self.seed = int(seed)
        self.tau = float(tau)
        self.max_grad_norm = float(max_grad_norm)
        self.embed_dim = int(embed_dim)
        self.id_dim = int(id_dim)

        # Fixed random ids, reconstructed from the seed, never trained.
        self.id_embeddings = np.random.default_rng(seed).normal(
            0.0, 1.0, size=(self.device_count, self.id_dim))
        self.node_projector = nets.Mlp(
            [self.id_dim + NODE_STATE_FEATURES, NODE_HIDDEN, self.embed_dim],
            activation="relu", seed=seed + 1)
        self.state_projector = nets.Mlp(
            [pooled_obs_size(), STATE_HIDDEN, self.embed_dim],
            activation="relu", seed=seed + 2)
        self.state_projector_target = self.state_projector.copy()
        self.bias = np.zeros(1)
        self.opt = nets.AdamState.for_params(self._trained_params(), lr=lr)

        self.embed_cache = np.zeros((self.device_count, self.embed_dim))
        self.dirty: set[int] = set(range(self.device_count))
        self.replay: deque[MetaSample] = deque(maxlen=replay_capacity)
        self.train_steps = 0

    def _trained_params(self) -> list:
        return (self.node_projector.params() + self.state_projector.params()
                + [self.bias])

    def trained_param_count(self) -> int:
        """Parameter count excluding the fixed id embeddings; independent
        of the device count."""
        return sum(p.size for p in self._trained_params())

    @property
    def k(self) -> int:
        return compute_k(self.device_count, self.alpha)

    def _check_state(self, state: NetworkState):
        if state.device_count != self.device_count:
            raise ValueError(f"state has {state.device_count} devices, "
                             f"controller expects {self.device_count}")

    def node_features(self, state: NetworkState, node: int) -> np.ndarray:
        """Id embedding of ``node``, then normalised degree, role visibility
        and attacker ownership, then the device's own observation block as
        seen by the controller's role (all-zero while the device is hidden,
        matching the observation masking)."""
        self._check_state(state)
        if not 0 <= node < self.device_count:
            raise ValueError(f"node {node} outside [0, {self.device_count})")
        dev = state.devices[node]
        visible = (dev.visible_to_attacker if self.role == "attacker"
                   else dev.visible_to_defender)
        deg_norm = state.degree(node) / max(1, state.max_degree())
        struct = np.array([deg_norm, 1.0 if visible else 0.0,
                           1.0 if dev.attacker_owned else 0.0])
        return np.concatenate([self.id_embeddings[node], struct,
                               device_obs_block(state, self.role, node)])

    def mark_dirty(self, nodes):
        """Queue devices for lazy re-embedding.  Union semantics; marking
        nothing is a no-op."""
        for node in nodes:
            node = int(node)
            if not 0 <= node < self.device_count:
                raise ValueError(f"node {node} outside [0, {self.device_count})")
            self.dirty.add(node)

    def refresh_embeddings(self, state: NetworkState):
        """Recompute cached ``z_i`` rows for dirty devices only."""
        self._check_state(state)
        if not self.dirty:
            return
        order = sorted(self.dirty)
        feats = np.stack([self.node_features(state, i) for i in order])
        self.embed_cache[order] = self.node_projector.forward(feats)
        self.dirty.clear()

    def state_embedding(self, obs: np.ndarray) -> np.ndarray:
        return self.state_projector.forward(pool_observation(obs))

    def key_embedding(self, obs: np.ndarray) -> np.ndarray:
        """Embedding from the slowly-updated target projector; used for
        cache keys so keys do not churn with every training step."""
        return self.state_projector_target.forward(pool_observation(obs))

    def score(self, obs: np.ndarray, node: int) -> float:
        if not 0 <= node < self.device_count:
            raise ValueError(f"node {node} outside [0, {self.device_count})")
        h = self.state_embedding(obs)
        return float(self.embed_cache[node] @ h + self.bias[0])

    def score_all(self, obs: np.ndarray) -> np.ndarray:
        h = self.state_embedding(obs)
        return self.embed_cache @ h + self.bias[0]

    def select(self, state: NetworkState, obs: np.ndarray,
               role: str | None = None) -> list[int]:
        """Top-k visible devices by score, ties to the lower id.  Refreshes
        stale embeddings first so scores are always current."""
        self._check_state(state)
        role = self.role if role is None else role
        if role != self.role:
            raise ValueError(f"controller is for role {self.role!r}, "
                             f"got {role!r}")
        self.refresh_embeddings(state)
        visible = sorted(state.visible_set(role))
        if not visible:
            return []
        scores = self.score_all(obs)[visible]
        order = np.lexsort((visible, -scores))
        return [int(visible[i]) for i in order[:min(self.k, len(visible))]]

    def predict_reward(self, obs: np.ndarray, selected) -> float:
        """Mean score of the selected devices; the controller's one-step
        reward estimate."""
        selected = list(selected)
        if not selected:
            raise ValueError("cannot predict reward for an empty selection")
        h = self.state_embedding(obs)
        return float(np.mean(self.embed_cache[selected] @ h + self.bias[0]))

    def record(self, sample: MetaSample):
        self.replay.append(sample)

    def sample_features(self, state: NetworkState, selected) -> np.ndarray:
        return np.stack([self.node_features(state, i) for i in selected])

    def _predictions(self, batch):
        """Forward pass for training; returns caches for both projectors."""
        obs_mat = np.stack([pool_observation(s.obs) for s in batch])
        h_mat, sp_cache = self.state_projector.forward_cached(obs_mat)
        feats = np.concatenate([s.features for s in batch], axis=0)
        z_rows, np_cache = self.node_projector.forward_cached(feats)
        preds = np.empty(len(batch))
        offset = 0
        for j, s in enumerate(batch):
            n = len(s.selected)
            z_mean = z_rows[offset:offset + n].mean(axis=0)
            preds[j] = z_mean @ h_mat[j] + self.bias[0]
            offset += n
        return preds, h_mat, z_rows, sp_cache, np_cache

    def meta_loss(self, batch) -> float:
        preds, *_ = self._predictions(batch)
        targets = np.array([s.reward for s in batch])
        return float(np.mean((preds - targets) ** 2))

    def meta_loss_and_grads(self, batch):
        """Mean squared error of predicted vs realised reward, with
        analytic gradients for both projectors and the bias."""
        if not batch:
            raise ValueError("empty meta batch")
        for s in batch:
            if len(s.selected) == 0:
                raise ValueError("meta sample with empty selection")
            if s.features.shape[0] != len(s.selected):
                raise ValueError("meta sample features do not match selection")
        preds, h_mat, z_rows, sp_cache, np_cache = self._predictions(batch)
        targets = np.array([s.reward for s in batch])
        err = preds - targets
        loss = float(np.mean(err ** 2))
        g = 2.0 * err / len(batch)

        sp_upstream = np.empty_like(h_mat)
        np_upstream = np.empty_like(z_rows)
        offset = 0
        for j, s in enumerate(batch):
            n = len(s.selected)
            z_mean = z_rows[offset:offset + n].mean(axis=0)
            sp_upstream[j] = g[j] * z_mean
            np_upstream[offset:offset + n] = g[j] * h_mat[j] / n
            offset += n
        sp_grads, _ = self.state_projector.backward(sp_cache, sp_upstream)
        np_grads, _ = self.node_projector.backward(np_cache, np_upstream)
        bias_grad = np.array([float(np.sum(g))])
        return loss, np_grads + sp_grads + [bias_grad]

    def train_meta(self, batch) -> float:
        """One clipped Adam step on the reward regression; soft-updates the
        target projector and invalidates cached embeddings (the node
        projector changed, so every ``z_i`` is stale)."""
        loss, grads = self.meta_loss_and_grads(batch)
        nets.opt_step(self._trained_params(), grads, self.opt,
                      max_grad_norm=self.max_grad_norm)
        nets.soft_update(self.state_projector_target, self.state_projector,
                         self.tau)
        self.dirty.update(range(self.device_count))
        self.train_steps += 1
        return loss

    def sample_replay(self, rng: np.random.Generator, batch_size: int):
        if len(self.replay) < batch_size:
            raise ValueError(f"replay holds {len(self.replay)} samples, "
                             f"need {batch_size}")
        idx = rng.choice(len(self.replay), size=batch_size, replace=False)
        return [self.replay[int(i)] for i in idx]

    def clone(self) -> "MetaController":
        """Frozen deep copy used when a trained policy is stored alongside
        the controller that shaped it."""
        return copy.deepcopy(self)

    def checkpoint_arrays(self):
        arrays = {"bias": self.bias, "embed_cache": self.embed_cache}
        arrays.update(self.node_projector.state_arrays("node_projector."))
        arrays.update(self.state_projector.state_arrays("state_projector."))
        arrays.update(
            self.state_projector_target.state_arrays("state_projector_target."))
        meta = {"role": self.role, "device_count": self.device_count,
                "alpha": self.alpha, "seed": self.seed, "tau": self.tau,
                "max_grad_norm": self.max_grad_norm,
                "embed_dim": self.embed_dim, "id_dim": self.id_dim,
                "lr": self.opt.lr,
                "node_projector": self.node_projector.spec(),
                "state_projector": self.state_projector.spec()}
        return arrays, meta

    def save(self, path):
        """Id embeddings are reconstructed from the stored seed, not saved."""
        arrays, meta = self.checkpoint_arrays()
        nets.save_checkpoint(path, arrays, meta)

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "MetaController":
        mc = cls(role=meta["role"], device_count=meta["device_count"],
                 alpha=meta["alpha"], seed=meta["seed"], lr=meta["lr"],
                 tau=meta["tau"], max_grad_norm=meta["max_grad_norm"],
                 embed_dim=meta["embed_dim"], id_dim=meta["id_dim"])

        def pick(prefix, net):
            params = []
            for idx in range(len(net.weights)):
                params.append(arrays[f"{prefix}W{idx}"])
                params.append(arrays[f"{prefix}b{idx}"])
            net.load_params(params)

        pick("node_projector.", mc.node_projector)
        pick("state_projector.", mc.state_projector)
        pick("state_projector_target.", mc.state_projector_target)
        mc.bias[...] = arrays["bias"]
        mc.embed_cache[...] = arrays["embed_cache"]
        mc.dirty = set(range(mc.device_count))
        return mc

    @classmethod
    def load(cls, path) -> "MetaController":
        arrays, meta = nets.load_checkpoint(path)
        return cls.from_arrays(arrays, meta)

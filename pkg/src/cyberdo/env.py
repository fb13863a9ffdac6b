"""Desk-scale attacker/defender network security game.

A network of ``M`` devices on an undirected graph plays out over a fixed
number of steps.  The attacker expands a foothold (scan, exploit, move
laterally), the defender cleans up (patch, isolate, restore).  Both sides
act simultaneously through sets of action atoms, at most one atom per
device per side, with defender atoms resolving first so that same-device
conflicts go to the defender.

The game is zero-sum.  ``step`` returns the attacker's per-step reward
``r``; the defender's utility is ``-r``.  The reward aggregates three
scaled terms: the fraction of compromised devices, the workload value of
attacker-owned devices, and the cost of defender actions (a cost to the
defender, so it enters the attacker's reward with a positive sign).

Background vulnerability churn is modelled by a Poisson stream of events
that add or remove vulnerabilities on random devices.  Events never touch
compromise or ownership, so the holding reward of a static compromise set
stays analytic even with events enabled.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace

import networkx as nx
import numpy as np

ATTACKER = "attacker"
DEFENDER = "defender"
ROLES = (ATTACKER, DEFENDER)

NOOP = "noop"
ATTACKER_ACTION_TYPES = ("noop", "scan", "exploit", "lateral_move")
DEFENDER_ACTION_TYPES = ("noop", "patch", "isolate", "restore")

# Action types that carry an exploit id.
_EXPLOIT_TYPES = frozenset({"exploit", "patch"})

# Upper bound on per-device workload values drawn at reset.
WORKLOAD_MAX = 1.0
# Privilege levels saturate here; lateral movement raises them by one.
PRIVILEGE_CAP = 3
# Per-device feature block width in observations (plus one global entry).
OBS_FEATURES_PER_DEVICE = 8

GRAPH_MODELS = ("preferential_attachment", "random_regular")


class EnvError(ValueError):
    """Raised for invalid configurations or misuse of the environment."""


class IllegalActionError(EnvError):
    """Raised when a submitted atom is not legal in the current state."""


def action_types_for(role: str) -> tuple[str, ...]:
    if role == ATTACKER:
        return ATTACKER_ACTION_TYPES
    if role == DEFENDER:
        return DEFENDER_ACTION_TYPES
    raise EnvError(f"unknown role: {role!r}")


@dataclass(frozen=True)
class ActionAtom:
    """One primitive action targeting a single device.

    ``exploit_id`` is required for ``exploit`` and ``patch`` atoms and
    forbidden otherwise.  ``app_id`` is an optional service annotation kept
    for encoding and cache-key purposes; no built-in action requires it.
    """

    node: int
    action_type: str
    exploit_id: int | None = None
    app_id: int | None = None

    def __post_init__(self):
        if self.action_type in _EXPLOIT_TYPES:
            if self.exploit_id is None:
                raise EnvError(
                    f"{self.action_type} atom requires exploit_id: {self!r}")
        elif self.exploit_id is not None:
            raise EnvError(
                f"{self.action_type} atom must not carry exploit_id: {self!r}")

    def sort_key(self):
        return (self.node, self.action_type,
                -1 if self.exploit_id is None else self.exploit_id,
                -1 if self.app_id is None else self.app_id)


def noop_atom(node: int = 0) -> ActionAtom:
    return ActionAtom(node=node, action_type=NOOP)


def default_attacker_owned(device_count: int) -> int:
    """Default size of the attacker's initial foothold: max(1, round(0.05 M))."""
    return max(1, int(math.floor(0.05 * device_count + 0.5)))


@dataclass
class EnvConfig:
    """Parameters of one game instance.

    ``fast_scan``, ``defaultversion``, ``default_mode``, ``default_high``
    and ``max_network_size`` are accepted and recorded in run metadata for
    compatibility with larger simulator configurations but do not alter
    desk-scale dynamics.
    """

    device_count: int = 10
    steps_per_episode: int = 100
    initial_compromised_ratio: float = 0.4
    num_attacker_owned: int | None = None
    discount: float = 0.99
    comp_scale: float = 30.0
    work_scale: float = 1.0
    def_scale: float = 1.0
    exploit_catalog_size: int = 4
    app_catalog_size: int = 4
    graph_model: str = "preferential_attachment"
    event_rate: float = 0.7
    event_add_prob: float = 0.1
    seed: int = 0
    dynamics_seed: int | None = None
    fast_scan: bool = True
    defaultversion: float = 1.0
    default_mode: int = 1
    default_high: int = 3
    max_network_size: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.device_count < 1:
            raise EnvError(f"device_count must be >= 1, got {self.device_count}")
        if self.steps_per_episode < 1:
            raise EnvError(
                f"steps_per_episode must be >= 1, got {self.steps_per_episode}")
        if not 0.0 <= self.initial_compromised_ratio <= 1.0:
            raise EnvError("initial_compromised_ratio must be in [0, 1], got "
                           f"{self.initial_compromised_ratio}")
        if not 0.0 < self.discount < 1.0:
            raise EnvError(f"discount must be in (0, 1), got {self.discount}")
        if self.exploit_catalog_size < 1:
            raise EnvError("exploit_catalog_size must be >= 1, got "
                           f"{self.exploit_catalog_size}")
        if self.app_catalog_size < 1:
            raise EnvError(
                f"app_catalog_size must be >= 1, got {self.app_catalog_size}")
        if self.graph_model not in GRAPH_MODELS:
            raise EnvError(f"graph_model must be one of {GRAPH_MODELS}, got "
                           f"{self.graph_model!r}")
        if self.event_rate < 0.0:
            raise EnvError(f"event_rate must be >= 0, got {self.event_rate}")
        if not 0.0 <= self.event_add_prob <= 1.0:
            raise EnvError(
                f"event_add_prob must be in [0, 1], got {self.event_add_prob}")
        for name in ("comp_scale", "work_scale", "def_scale"):
            if getattr(self, name) < 0.0:
                raise EnvError(f"{name} must be >= 0, got {getattr(self, name)}")
        owned = self.resolved_attacker_owned()
        if owned > self.device_count:
            raise EnvError(f"num_attacker_owned {owned} exceeds device_count "
                           f"{self.device_count}")

    def resolved_attacker_owned(self) -> int:
        if self.num_attacker_owned is None:
            return default_attacker_owned(self.device_count)
        return self.num_attacker_owned

    def resolved_max_network_size(self) -> int:
        if self.max_network_size is None:
            return self.device_count + 10
        return self.max_network_size


@dataclass
class Device:
    device_id: int
    services: set[int] = field(default_factory=set)
    vulnerabilities: set[int] = field(default_factory=set)
    compromised: bool = False
    attacker_owned: bool = False
    privilege_level: int = 0
    workload_value: float = 0.0
    visible_to_attacker: bool = False
    visible_to_defender: bool = True


@dataclass
class NetworkState:
    """Full game state.  ``last_changed`` holds the device ids whose fields,
    incident edges, or visibility changed during the most recent ``step``;
    callers use it for cache invalidation and lazy embedding refresh."""

    config: EnvConfig
    devices: list[Device]
    adjacency: list[set[int]]
    step: int = 0
    rng: np.random.Generator = None
    last_changed: set[int] = field(default_factory=set)

    @property
    def device_count(self) -> int:
        return len(self.devices)

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def max_degree(self) -> int:
        return max((len(nbrs) for nbrs in self.adjacency), default=0)

    def visible_set(self, role: str) -> set[int]:
        if role == ATTACKER:
            return {d.device_id for d in self.devices if d.visible_to_attacker}
        if role == DEFENDER:
            return {d.device_id for d in self.devices if d.visible_to_defender}
        raise EnvError(f"unknown role: {role!r}")

    def compromised_count(self) -> int:
        return sum(1 for d in self.devices if d.compromised)

    def clone(self) -> "NetworkState":
        return copy.deepcopy(self)


def _build_graph(config: EnvConfig, graph_seed: int) -> list[set[int]]:
    m = config.device_count
    if m == 1:
        return [set()]
    if config.graph_model == "preferential_attachment":
        attach = min(2, m - 1)
        g = nx.barabasi_albert_graph(m, attach, seed=graph_seed)
    else:
        deg = min(3, m - 1)
        if (deg * m) % 2 == 1:
            deg -= 1
        if deg < 1:
            return [set() for _ in range(m)]
        g = nx.random_regular_graph(deg, m, seed=graph_seed)
    adjacency = [set() for _ in range(m)]
    for u, v in g.edges():
        adjacency[u].add(v)
        adjacency[v].add(u)
    return adjacency


def reset(config: EnvConfig) -> NetworkState:
    """Build the initial state for ``config``, deterministically in its seed.

    The defender sees every device from the start.  The attacker sees only
    its owned foothold; other initially compromised devices stay hidden
    until scanned.  Attacker-owned devices are always compromised.

    ``config.seed`` fixes the topology.  ``config.dynamics_seed`` (when set)
    independently drives everything else: device workloads, service and
    vulnerability draws, the initial compromise placement, and the in-episode
    event stream.  This lets callers roll many episodes on one network.
    """
    config.validate()
    seq = np.random.SeedSequence(config.seed)
    graph_seed = int(seq.generate_state(1, dtype=np.uint32)[0])
    dyn = config.seed if config.dynamics_seed is None else config.dynamics_seed
    rng = np.random.default_rng(np.random.SeedSequence(dyn).spawn(1)[0])

    m = config.device_count
    adjacency = _build_graph(config, graph_seed)
    devices = []
    for i in range(m):
        services = {a for a in range(config.app_catalog_size)
                    if rng.random() < 0.5}
        vulns = {e for e in range(config.exploit_catalog_size)
                 if rng.random() < 0.5}
        devices.append(Device(device_id=i, services=services,
                              vulnerabilities=vulns,
                              workload_value=float(rng.uniform(0.0, WORKLOAD_MAX))))

    n_owned = config.resolved_attacker_owned()
    owned = sorted(int(i) for i in rng.choice(m, size=n_owned, replace=False))
    n_comp = max(n_owned,
                 int(math.floor(config.initial_compromised_ratio * m + 0.5)))
    rest = [i for i in range(m) if i not in set(owned)]
    extra = sorted(int(i) for i in rng.choice(
        len(rest), size=min(n_comp - n_owned, len(rest)), replace=False))
    compromised = set(owned) | {rest[i] for i in extra}

    for i in owned:
        dev = devices[i]
        dev.attacker_owned = True
        dev.privilege_level = 1
        dev.visible_to_attacker = True
    for i in compromised:
        devices[i].compromised = True

    return NetworkState(config=config, devices=devices, adjacency=adjacency,
                        step=0, rng=rng)


def _atom_legal(state: NetworkState, role: str, atom: ActionAtom) -> bool:
    m = state.device_count
    if not 0 <= atom.node < m:
        return False
    if atom.action_type not in action_types_for(role):
        return False
    if atom.exploit_id is not None and not (
            0 <= atom.exploit_id < state.config.exploit_catalog_size):
        return False
    if atom.app_id is not None and not (
            0 <= atom.app_id < state.config.app_catalog_size):
        return False
    dev = state.devices[atom.node]
    kind = atom.action_type
    if role == ATTACKER:
        if kind == NOOP:
            return atom.node == 0 or dev.visible_to_attacker
        if kind == "scan":
            return dev.attacker_owned
        if kind == "exploit":
            return (dev.visible_to_attacker and not dev.compromised
                    and atom.exploit_id in dev.vulnerabilities
                    and any(state.devices[nbr].compromised
                            for nbr in state.adjacency[atom.node]))
        if kind == "lateral_move":
            return (dev.visible_to_attacker and dev.compromised
                    and not dev.attacker_owned)
        return False
    if kind == NOOP:
        return atom.node == 0 or dev.visible_to_defender
    if kind == "patch":
        return dev.visible_to_defender and atom.exploit_id in dev.vulnerabilities
    if kind == "isolate":
        return dev.visible_to_defender and state.degree(atom.node) > 0
    if kind == "restore":
        return (dev.visible_to_defender and dev.compromised
                and not dev.attacker_owned)
    return False


def legal_actions(state: NetworkState, role: str) -> set[ActionAtom]:
    """Enumerate every atom legal for ``role``.

    Noop is legal on device 0 and on every role-visible device, so the set
    is never empty.  Effectful atoms are restricted to role-visible devices.
    """
    atoms = {noop_atom(0)}
    ecat = state.config.exploit_catalog_size
    if role == ATTACKER:
        for dev in state.devices:
            i = dev.device_id
            if not dev.visible_to_attacker:
                continue
            atoms.add(noop_atom(i))
            if dev.attacker_owned:
                atoms.add(ActionAtom(i, "scan"))
            if dev.compromised and not dev.attacker_owned:
                atoms.add(ActionAtom(i, "lateral_move"))
            if not dev.compromised and any(
                    state.devices[nbr].compromised
                    for nbr in state.adjacency[i]):
                for e in sorted(dev.vulnerabilities):
                    atoms.add(ActionAtom(i, "exploit", exploit_id=e))
        return atoms
    if role == DEFENDER:
        for dev in state.devices:
            i = dev.device_id
            if not dev.visible_to_defender:
                continue
            atoms.add(noop_atom(i))
            for e in sorted(dev.vulnerabilities):
                atoms.add(ActionAtom(i, "patch", exploit_id=e))
            if state.degree(i) > 0:
                atoms.add(ActionAtom(i, "isolate"))
            if dev.compromised and not dev.attacker_owned:
                atoms.add(ActionAtom(i, "restore"))
        return atoms
    raise EnvError(f"unknown role: {role!r}")


def _check_joint(state: NetworkState, role: str, atoms) -> list[ActionAtom]:
    seen_nodes = set()
    ordered = sorted(atoms, key=ActionAtom.sort_key)
    for atom in ordered:
        if not isinstance(atom, ActionAtom):
            raise IllegalActionError(f"{role} action is not an ActionAtom: {atom!r}")
        if atom.node in seen_nodes:
            raise IllegalActionError(
                f"{role} submitted more than one atom for device {atom.node}")
        seen_nodes.add(atom.node)
        if not _atom_legal(state, role, atom):
            raise IllegalActionError(f"illegal {role} atom: {atom!r}")
    return ordered


def _apply_defender(state: NetworkState, atom: ActionAtom,
                    changed: set[int]) -> float:
    dev = state.devices[atom.node]
    kind = atom.action_type
    if kind == NOOP:
        return 0.0
    if kind == "patch":
        dev.vulnerabilities.discard(atom.exploit_id)
        if dev.compromised and not dev.attacker_owned:
            dev.compromised = False
        changed.add(atom.node)
        return 1.0
    if kind == "isolate":
        neighbors = set(state.adjacency[atom.node])
        for nbr in neighbors:
            state.adjacency[nbr].discard(atom.node)
        state.adjacency[atom.node] = set()
        if not dev.attacker_owned:
            dev.visible_to_attacker = False
        changed.add(atom.node)
        changed.update(neighbors)
        return 1.0
    if kind == "restore":
        if not dev.attacker_owned:
            dev.compromised = False
        changed.add(atom.node)
        return dev.workload_value
    raise IllegalActionError(f"unknown defender atom: {atom!r}")


def _apply_attacker(state: NetworkState, atom: ActionAtom, changed: set[int]):
    # Preconditions are rechecked against the post-defender state; atoms
    # whose preconditions were removed by the defender fizzle silently.
    dev = state.devices[atom.node]
    kind = atom.action_type
    if kind == NOOP:
        return
    if kind == "scan":
        if not dev.attacker_owned:
            return
        for nbr in sorted(state.adjacency[atom.node]):
            nbr_dev = state.devices[nbr]
            if not nbr_dev.visible_to_attacker:
                nbr_dev.visible_to_attacker = True
                changed.add(nbr)
        return
    if kind == "exploit":
        if (dev.visible_to_attacker and not dev.compromised
                and atom.exploit_id in dev.vulnerabilities
                and any(state.devices[nbr].compromised
                        for nbr in state.adjacency[atom.node])):
            dev.compromised = True
            changed.add(atom.node)
        return
    if kind == "lateral_move":
        if dev.visible_to_attacker and dev.compromised and not dev.attacker_owned:
            dev.attacker_owned = True
            dev.privilege_level = min(PRIVILEGE_CAP, dev.privilege_level + 1)
            changed.add(atom.node)
        return
    raise IllegalActionError(f"unknown attacker atom: {atom!r}")


def _apply_events(state: NetworkState, changed: set[int]):
    cfg = state.config
    if cfg.event_rate <= 0.0:
        return
    count = int(state.rng.poisson(cfg.event_rate))
    for _ in range(count):
        node = int(state.rng.integers(state.device_count))
        dev = state.devices[node]
        if state.rng.random() < cfg.event_add_prob:
            exploit = int(state.rng.integers(cfg.exploit_catalog_size))
            if exploit not in dev.vulnerabilities:
                dev.vulnerabilities.add(exploit)
                changed.add(node)
        elif dev.vulnerabilities:
            pool = sorted(dev.vulnerabilities)
            victim = pool[int(state.rng.integers(len(pool)))]
            dev.vulnerabilities.discard(victim)
            changed.add(node)


def step(state: NetworkState, attacker_atoms, defender_atoms):
    """Advance one step: defender atoms, attacker atoms, background events.

    Returns ``(state, reward, done)`` where ``reward`` is the attacker's
    per-step reward and the defender's utility is its negation.  Every
    submitted atom must be legal in the current state (at most one per
    device per side); attacker atoms whose preconditions are removed by
    the defender in the same step fizzle without effect, which is how
    same-device conflicts resolve in the defender's favour.
    """
    cfg = state.config
    if state.step >= cfg.steps_per_episode:
        raise EnvError(f"episode is over (step {state.step} of "
                       f"{cfg.steps_per_episode})")
    def_sorted = _check_joint(state, DEFENDER, defender_atoms)
    att_sorted = _check_joint(state, ATTACKER, attacker_atoms)

    max_deg_before = state.max_degree()
    changed: set[int] = set()
    defender_cost = 0.0
    for atom in def_sorted:
        defender_cost += _apply_defender(state, atom, changed)
    for atom in att_sorted:
        _apply_attacker(state, atom, changed)
    _apply_events(state, changed)

    if state.max_degree() != max_deg_before:
        # Degree normalisation is global, so a max-degree change makes every
        # connected device's structural features stale.
        changed.update(i for i in range(state.device_count)
                       if state.degree(i) > 0)

    state.step += 1
    m = state.device_count
    frac = state.compromised_count() / m
    owned_value = sum(d.workload_value for d in state.devices
                      if d.attacker_owned)
    reward = (cfg.comp_scale * frac + owned_value
              + cfg.def_scale * cfg.work_scale * defender_cost)
    state.last_changed = changed
    done = state.step >= cfg.steps_per_episode
    return state, float(reward), done


def holding_reward(state: NetworkState) -> float:
    """Per-step reward if both sides noop forever from this state."""
    cfg = state.config
    frac = state.compromised_count() / state.device_count
    owned_value = sum(d.workload_value for d in state.devices
                      if d.attacker_owned)
    return float(cfg.comp_scale * frac + owned_value)


def reward_bound(config: EnvConfig) -> float:
    """Finite bound with ``|r| <= reward_bound(config)`` for every reachable
    per-step reward.  Sum of non-negative per-device terms: full compromise,
    maximal owned workload, and one maximal-cost defender atom per device."""
    m = config.device_count
    per_atom_cost = max(1.0, WORKLOAD_MAX)
    return float(config.comp_scale + m * WORKLOAD_MAX
                 + config.def_scale * config.work_scale * m * per_atom_cost)


def observation_size(config: EnvConfig) -> int:
    return config.device_count * OBS_FEATURES_PER_DEVICE + 1


def device_obs_block(state: NetworkState, role: str, node: int) -> np.ndarray:
    """Length-8 observation block for one device as ``role`` sees it.

    A visibility indicator followed by compromise, ownership, normalised
    privilege, workload, normalised degree, and normalised vulnerability
    and service counts.  All-zero when the device is hidden from the role.
    """
    cfg = state.config
    dev = state.devices[node]
    if role == ATTACKER:
        visible = dev.visible_to_attacker
    elif role == DEFENDER:
        visible = dev.visible_to_defender
    else:
        raise EnvError(f"unknown role: {role!r}")
    block = np.zeros(OBS_FEATURES_PER_DEVICE, dtype=np.float64)
    if not visible:
        return block
    block[0] = 1.0
    block[1] = 1.0 if dev.compromised else 0.0
    block[2] = 1.0 if dev.attacker_owned else 0.0
    block[3] = dev.privilege_level / PRIVILEGE_CAP
    block[4] = dev.workload_value
    block[5] = state.degree(node) / max(1, state.device_count - 1)
    block[6] = len(dev.vulnerabilities) / cfg.exploit_catalog_size
    block[7] = len(dev.services) / cfg.app_catalog_size
    return block


def observe(state: NetworkState, role: str) -> np.ndarray:
    """Role-restricted observation vector.

    One ``device_obs_block`` per device (all-zero for devices the role
    cannot see) plus one trailing entry holding the episode progress.
    Length is ``M * 8 + 1`` regardless of visibility.
    """
    cfg = state.config
    out = np.zeros(observation_size(cfg), dtype=np.float64)
    for node in range(state.device_count):
        base = node * OBS_FEATURES_PER_DEVICE
        out[base:base + OBS_FEATURES_PER_DEVICE] = device_obs_block(
            state, role, node)
    out[-1] = state.step / cfg.steps_per_episode
    return out


SNAPSHOT_FORMAT = "cyberdo-state"
SNAPSHOT_VERSION = 1


def state_to_snapshot(state: NetworkState) -> dict:
    """JSON-serialisable snapshot that round-trips the state bit-exactly,
    including the RNG stream."""
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "config": asdict(state.config),
        "step": state.step,
        "devices": [{
            "device_id": d.device_id,
            "services": sorted(d.services),
            "vulnerabilities": sorted(d.vulnerabilities),
            "compromised": d.compromised,
            "attacker_owned": d.attacker_owned,
            "privilege_level": d.privilege_level,
            "workload_value": d.workload_value,
            "visible_to_attacker": d.visible_to_attacker,
            "visible_to_defender": d.visible_to_defender,
        } for d in state.devices],
        "adjacency": [sorted(nbrs) for nbrs in state.adjacency],
        "rng_state": state.rng.bit_generator.state,
        "last_changed": sorted(state.last_changed),
    }


def state_from_snapshot(snapshot: dict) -> NetworkState:
    if snapshot.get("format") != SNAPSHOT_FORMAT:
        raise EnvError(f"not a state snapshot: format={snapshot.get('format')!r}")
    if snapshot.get("version") != SNAPSHOT_VERSION:
        raise EnvError(f"unsupported snapshot version {snapshot.get('version')!r}")
    config = EnvConfig(**snapshot["config"])
    devices = [Device(device_id=d["device_id"],
                      services=set(d["services"]),
                      vulnerabilities=set(d["vulnerabilities"]),
                      compromised=d["compromised"],
                      attacker_owned=d["attacker_owned"],
                      privilege_level=d["privilege_level"],
                      workload_value=d["workload_value"],
                      visible_to_attacker=d["visible_to_attacker"],
                      visible_to_defender=d["visible_to_defender"])
               for d in snapshot["devices"]]
    rng = np.random.default_rng()
    rng.bit_generator.state = snapshot["rng_state"]
    return NetworkState(config=config, devices=devices,
                        adjacency=[set(nbrs) for nbrs in snapshot["adjacency"]],
                        step=snapshot["step"], rng=rng,
                        last_changed=set(snapshot["last_changed"]))


def save_state(state: NetworkState, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_to_snapshot(state), fh, indent=None, sort_keys=True)


def load_state(path) -> NetworkState:
    with open(path, "r", encoding="utf-8") as fh:
        return state_from_snapshot(json.load(fh))


def fresh_copy(config: EnvConfig, seed: int | None = None) -> EnvConfig:
    """Copy of ``config``, optionally reseeded."""
    if seed is None:
        return replace(config)
    return replace(config, seed=int(seed))

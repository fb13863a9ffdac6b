"""LRU cache for critic values keyed by quantized state embeddings.

Decoding scores many (state, atom) candidates per step; most recur across
nearby steps.  Entries are keyed by a platform-independent 64-bit hash of
the state embedding rounded to a fixed number of decimals, plus the atom
coordinates.  Staleness is bounded three ways: a TTL in cache steps, a
periodic full flush, and k-hop breadth-first invalidation around devices
the environment reports as changed.  A small random fraction of hits is
deliberately recomputed as a drift audit; those lookups count as misses.

The cache clock advances by one "cache step" per decode call (the decoder
ticks it once per invocation).
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict, deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CacheKey:
    state_key: int
    node: int
    action_type: str
    exploit_id: int | None = None
    app_id: int | None = None


def state_key(embedding: np.ndarray, decimals: int | None = 3) -> int:
    """64-bit key for an embedding vector, stable across processes and
    platforms.

    With ``decimals`` set, each coordinate is scaled by ``10**decimals``
    and rounded half-to-even to an integer, so vectors closer than half a
    grid cell collapse to the same key.  ``decimals=None`` hashes the raw
    float64 bytes (full precision, used by soundness mode).
    """
    emb = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(emb)):
        raise ValueError("non-finite embedding cannot be hashed")
    if decimals is None:
        payload = np.ascontiguousarray(emb, dtype="<f8").tobytes()
    else:
        scaled = np.rint(emb * (10.0 ** decimals))
        # +0.0 normalises -0.0 so both zeros share a key.
        payload = np.ascontiguousarray(scaled + 0.0, dtype="<f8").tobytes()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class _Entry:
    q: float
    inserted_at: int
    uses: int = 0


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    forced_reevals: int = 0
    invalidations: int = 0
    flushes: int = 0
    insertions: int = 0
    evictions: int = 0
    expirations: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


class QCache:
    """Bounded-staleness LRU cache of scalar critic values.

    ``ttl`` and ``flush_interval`` may be ``None`` to disable them;
    ``reeval_prob=0.0`` disables the drift audit.  ``decimals=None``
    disables key quantization.  The strict combination (no TTL, no flush,
    no re-evaluation, full precision) plus diameter-radius invalidation
    makes cached decoding bitwise-identical to uncached decoding.
    """

    def __init__(self, capacity: int = 50_000, ttl: int | None = 50,
                 flush_interval: int | None = 200, reeval_prob: float = 0.01,
                 khop_radius: int = 1, decimals: int | None = 3, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if ttl is not None and ttl < 1:
            raise ValueError(f"ttl must be >= 1 or None, got {ttl}")
        if flush_interval is not None and flush_interval < 1:
            raise ValueError(
                f"flush_interval must be >= 1 or None, got {flush_interval}")
        if not 0.0 <= reeval_prob <= 1.0:
            raise ValueError(f"reeval_prob must be in [0, 1], got {reeval_prob}")
        if khop_radius < 0:
            raise ValueError(f"khop_radius must be >= 0, got {khop_radius}")
        self.capacity = int(capacity)
        self.ttl = ttl
        self.flush_interval = flush_interval
        self.reeval_prob = float(reeval_prob)
        self.khop_radius = int(khop_radius)
        self.decimals = decimals
        self.cache_step = 0
        self.rng = np.random.default_rng(seed)
        self.stats = CacheStats()
        self._entries: OrderedDict[CacheKey, _Entry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def state_key(self, embedding: np.ndarray) -> int:
        return state_key(embedding, self.decimals)

    def _expired(self, entry: _Entry) -> bool:
        return self.ttl is not None and self.cache_step - entry.inserted_at > self.ttl

    def lookup(self, key: CacheKey) -> float | None:
        """Return the cached value, or ``None`` when the caller must
        recompute (absent, expired, or randomly chosen for re-evaluation)."""
        entry = self._entries.get(key)
        if entry is None:
            self.stats.misses += 1
            return None
        if self._expired(entry):
            del self._entries[key]
            self.stats.expirations += 1
            self.stats.misses += 1
            return None
        if self.reeval_prob > 0.0 and self.rng.random() < self.reeval_prob:
            # Drift audit: drop the entry and make the caller recompute.
            del self._entries[key]
            self.stats.forced_reevals += 1
            self.stats.misses += 1
            return None
        entry.uses += 1
        self._entries.move_to_end(key)
        self.stats.hits += 1
        return entry.q

    def insert(self, key: CacheKey, q: float):
        if not np.isfinite(q):
            raise ValueError(f"non-finite Q value rejected: {q!r}")
        if key in self._entries:
            del self._entries[key]
        self._entries[key] = _Entry(q=float(q), inserted_at=self.cache_step)
        self.stats.insertions += 1
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)
            self.stats.evictions += 1

    def invalidate_khop(self, changed_nodes, adjacency, radius: int | None = None):
        """Drop every entry whose device lies within ``radius`` hops of a
        changed node.  ``adjacency`` is a sequence of neighbour-id sets.
        Returns the number of entries removed."""
        if radius is None:
            radius = self.khop_radius
        zone = khop_zone(changed_nodes, adjacency, radius)
        if not zone:
            return 0
        doomed = [k for k in self._entries if k.node in zone]
        for k in doomed:
            del self._entries[k]
        self.stats.invalidations += len(doomed)
        return len(doomed)

    def tick(self):
        """Advance the cache clock one step; flush on schedule."""
        self.cache_step += 1
        if (self.flush_interval is not None
                and self.cache_step % self.flush_interval == 0):
            self._entries.clear()
            self.stats.flushes += 1

    def clear(self):
        self._entries.clear()

    def keys(self):
        return list(self._entries.keys())


def khop_zone(changed_nodes, adjacency, radius: int) -> set[int]:
    """Devices within ``radius`` hops of any changed node (BFS)."""
    n = len(adjacency)
    frontier = deque()
    zone = set()
    for node in changed_nodes:
        node = int(node)
        if not 0 <= node < n:
            raise ValueError(f"changed node {node} outside [0, {n})")
        if node not in zone:
            zone.add(node)
            frontier.append((node, 0))
    while frontier:
        node, depth = frontier.popleft()
        if depth >= radius:
            continue
        for nbr in adjacency[node]:
            if nbr not in zone:
                zone.add(nbr)
                frontier.append((nbr, depth + 1))
    return zone


def strict_cache(capacity: int = 50_000, seed: int = 0) -> QCache:
    """Soundness-mode cache: full-precision keys, no TTL, no flush, no
    random re-evaluation.  Pair with diameter-radius invalidation for
    bitwise-identical decoding."""
    return QCache(capacity=capacity, ttl=None, flush_interval=None,
                  reeval_prob=0.0, khop_radius=0, decimals=None, seed=seed)
